"""Bundled test cases and default measurement sets."""

from importlib import resources
from pathlib import Path


def bundled_path(name: str, suffix: str) -> Path:
    """Resolve a bundled resource such as ``case14`` + ``.m``."""
    fname = name if name.endswith(suffix) else name + suffix
    ref = resources.files(__name__) / fname
    if not ref.is_file():
        raise FileNotFoundError(f"no such file or bundled resource: {name!r}")
    return Path(str(ref))


def bundled_names(suffix: str = ".m") -> list[str]:
    return sorted(p.name[: -len(suffix)] for p in resources.files(__name__).iterdir() if p.name.endswith(suffix))
