"""
Do the experts find the districts?
==================================

After training, average each expert's attention over the test period and
correlate the maps with the planted masks. The Hungarian assignment pairs
experts with patterns one to one.
"""
import numpy as np
import torch

from stmoe.eval_stats import match_experts_to_patterns
from stmoe.experiments import preset_dataset
from stmoe.model import ModelConfig
from stmoe.training import TrainConfig, collect, fit

torch.set_num_threads(1)

data, ds = preset_dataset("tiny8")
res = fit(ds, ModelConfig(K=3, hidden=16), TrainConfig(max_epochs=20, patience=5, seed=0))

att = collect(res.model, ds.test, fields=("attention",))["attention"]
maps = att[:, :, 0].mean(axis=0)   # inflow channel, averaged over time
match = match_experts_to_patterns(maps, data.truth_masks)

names = [p["name"] for p in data.patterns]
print("correlation (experts x patterns)")
print(np.round(match.correlation, 2))
for (k, m), c in zip(match.assignment, match.matched):
    print(f"expert {k} -> {names[m]:12s} r = {c:.2f}")
print("mean matched correlation %.3f" % match.mean_matched)

# a crude picture of the attention each expert receives
for k in range(3):
    print(f"\nexpert {k}")
    for row in maps[k]:
        print(" ".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row))
