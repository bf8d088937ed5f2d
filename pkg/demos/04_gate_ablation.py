"""
What the gates are worth
========================

Two ablations: drop the spatial gate (attention from the expert outputs
alone) or drop the temporal gate (no sigmoid amplitude field). Each
variant is trained from scratch on the ring city with weekend behaviour
switched on, and compared with one wide conv stack of matching size.

Takes a few minutes per seed. The numbers are close, because all of
these models end up near the Poisson noise of the data.
"""
import sys

import torch

from stmoe.experiments import ExperimentSettings, ablation, mean_of, preset_dataset, versus_monolith

torch.set_num_threads(1)
seeds = tuple(range(int(sys.argv[1]) if len(sys.argv) > 1 else 1))
settings = ExperimentSettings(hidden=32, max_epochs=40, patience=8)

ab = ablation(seeds, settings=settings, log=print)
vm = versus_monolith(seeds, settings=settings, moe_runs=ab["full"], log=print)

data, ds = preset_dataset("ring16")
print("\nnoise floor %.4f" % data.intensity[ds.test.anchors + 1].mean())
for name, runs in list(ab.items()) + [("monolith", vm["monolith"])]:
    print(f"{name:9s} test mse {mean_of(runs):.4f}  params {runs[0].n_params}")
