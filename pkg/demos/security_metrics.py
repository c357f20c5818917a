"""How many meters must an attacker own to move each active-power measurement?

Run with:  python3 demos/security_metrics.py
"""
import math

from stealthse import attack as atk
from stealthse.harness import run_metric_scan
from stealthse.measurement import load_measurements
from stealthse.netmodel import load_case

net = load_case("case14")
mset = load_measurements("case14", net)

scan = run_metric_scan(net, mset)
print("alpha histogram:    ", scan.histogram)
print("alpha-bar histogram:", scan.bar_histogram)

weakest = min(scan.report.entries, key=lambda e: e.alpha)
print(f"cheapest target {mset[weakest.k].label()}: alpha = {weakest.alpha:g},"
      f" attack {[mset[i].label() for i in weakest.witness.support]}")
print("unattackable:", [mset[e.k].label() for e in scan.report.entries if math.isinf(e.alpha)])

# exact search vs the l1 relaxation
model = atk.dc_model(net, mset)
relax = atk.security_metric_relaxation(model)
gaps = [(e.k, e.alpha - scan.report.alpha(e.k)) for e in relax.entries if math.isfinite(e.alpha)]
print("targets where the relaxation overestimates:", [(mset[k].label(), g) for k, g in gaps if g > 0])

# protecting the weakest attack's meters raises its cost
protected = model.with_protected(weakest.witness.support[1:])
after = atk.security_metric_exact(protected, [weakest.k]).alpha(weakest.k)
print(f"after protecting {len(weakest.witness.support) - 1} meters, alpha of {mset[weakest.k].label()} = {after:g}")
