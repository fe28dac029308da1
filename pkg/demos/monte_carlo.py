"""A short Monte Carlo study on the bundled simulation design.

Runs 200 replicates at n = 1000 (the bundled configuration asks for 1000)
and prints bias, SD, mean SE and coverage per contrast and method.  The
true contrasts come from a 10^6-draw oracle to keep the demo quick.

    python demos/monte_carlo.py
"""

from dataclasses import replace

from ecetrial.simulation import bundled_config, run_monte_carlo

cfg = bundled_config()
cfg = replace(cfg, runs=200, oracle_m=1_000_000)
report = run_monte_carlo(cfg)
print(report.to_table())
