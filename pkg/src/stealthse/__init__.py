"""Power-network state estimation under stealthy deception attacks."""

__version__ = "0.1.0"
