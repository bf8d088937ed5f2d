"""
Training a three-expert forecaster
==================================

Samples fuse the closeness, period and trend frames with a calendar
embedding. Training minimizes MSE plus the responsibility and
inter-discrepancy terms, keeping the epoch with the best validation MSE.
"""
import torch

from stmoe.experiments import preset_dataset
from stmoe.losses import LossConfig
from stmoe.model import ModelConfig
from stmoe.training import TrainConfig, evaluate, fit

torch.set_num_threads(1)

data, ds = preset_dataset("tiny8")
print("train/val/test samples:", len(ds.train), len(ds.val), len(ds.test))
print("input channels:", ds.train.X.shape[1], "on a", ds.train.X.shape[2:], "grid")

cfg = TrainConfig(max_epochs=8, patience=3, seed=0, loss=LossConfig(lambda_er=1e-2, lambda_eid=0.1))
res = fit(ds, ModelConfig(K=3, hidden=16), cfg)
for row in res.history:
    print("epoch {epoch:2d}  mse {mse:.4f}  l_er {l_er:.4f}  l_eid {l_eid:+.5f}  val mse {val_mse:7.3f}".format(**row))

report = evaluate(res.model, ds.test, ds.stats)
print(f"best epoch {res.best_epoch}: test MSE {report.mse:.3f}, RMSE {report.rmse:.3f}, MAE {report.mae:.3f}")

# the Poisson variance equals the intensity, so this much MSE is irreducible
anchors = ds.test.anchors
print("noise floor (mean intensity of the targets): %.3f" % data.intensity[anchors + 1].mean())
