"""Mini-batch Adam training with early stopping, hyperparameter search and a
finite-difference gradient checker."""
from __future__ import annotations

import copy
import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, NumericalError
from .eval_stats import metrics
from .fusion import Dataset, SampleSet
from .losses import LossConfig, total_loss
from .model import ForwardTrace, ModelConfig, build_model


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    clip_norm: float | None = 5.0
    betas: tuple[float, float] = (0.9, 0.999)
    eval_batch: int = 256
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.patience < 1 or self.max_epochs < 0:
            raise ConfigError("patience must be >= 1 and max_epochs >= 0")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def _tensors(s: SampleSet):
    return torch.from_numpy(s.X), torch.from_numpy(s.E), torch.from_numpy(s.Y)


@torch.no_grad()
def collect(model, samples: SampleSet, variant: str | None = None, batch: int = 256,
            fields=("prediction",)) -> dict:
    """Run the model in eval mode and gather the requested trace fields as
    numpy arrays concatenated over samples."""
    was_training = model.training
    model.eval()
    X, E, _ = _tensors(samples)
    out = {f: [] for f in fields}
    for b in range(0, len(samples), batch):
        tr = model(X[b:b + batch], E[b:b + batch], variant=variant)
        for f in fields:
            out[f].append(getattr(tr, f).numpy())
    model.train(was_training)
    return {f: np.concatenate(v) if v else np.zeros(0) for f, v in out.items()}


def predict(model, samples: SampleSet, variant: str | None = None, batch: int = 256) -> np.ndarray:
    return collect(model, samples, variant, batch)["prediction"]


def evaluate(model, samples: SampleSet, stats, variant: str | None = None, batch: int = 256, **kw):
    return metrics(predict(model, samples, variant, batch), samples.Y, stats, **kw)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    steps: list
    best_epoch: int
    best_val_mse: float
    optimizer: torch.optim.Optimizer | None = None
    stopped_early: bool = False


def train(dataset: Dataset, model: torch.nn.Module, cfg: TrainConfig,
          on_epoch: Callable | None = None, resume: dict | None = None) -> TrainResult:
    """Minimize the combined loss; keep the parameters of the epoch with the
    lowest denormalized validation MSE.

    ``on_epoch(info)`` runs after every epoch with the keys ``epoch``,
    ``improved``, ``model``, ``optimizer``, ``history``, ``best_epoch``,
    ``best_val_mse`` and ``best_state``.

    ``resume`` carries ``epoch``, ``history``, ``best_epoch``,
    ``best_val_mse``, ``best_state`` and ``optimizer_state`` from an earlier
    run with the same config; training continues at ``epoch``.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    X, E, Y = _tensors(dataset.train)
    n = len(dataset.train)
    history, steps = [], []
    best_val, best_epoch, best_state = math.inf, -1, copy.deepcopy(model.state_dict())
    start = 0
    if resume:
        start = int(resume["epoch"])
        history = list(resume.get("history", []))
        best_val = float(resume.get("best_val_mse", math.inf))
        best_epoch = int(resume.get("best_epoch", -1))
        if resume.get("best_state") is not None:
            best_state = resume["best_state"]
        if resume.get("optimizer_state") is not None:
            opt.load_state_dict(resume["optimizer_state"])
        for _ in range(start):  # replay the shuffles of completed epochs
            rng.permutation(n)
    step = start * math.ceil(n / cfg.batch_size)
    stopped = False
    for epoch in range(start, cfg.max_epochs):
        model.train()
        perm = torch.from_numpy(rng.permutation(n))
        sums = dict.fromkeys(("mse", "l_er", "l_eid", "total"), 0.0)
        for b in range(0, n, cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            trace = model(X[idx], E[idx])
            parts = total_loss(trace, Y[idx], cfg.loss)
            if not torch.isfinite(parts.total):
                model.load_state_dict(best_state)
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}; restored best parameters")
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            vals = parts.floats()
            steps.append({"step": step, **vals})
            for k in sums:
                sums[k] += vals[k] * len(idx)
            step += 1
        val_mse = evaluate(model, dataset.val, dataset.stats, batch=cfg.eval_batch).mse
        if not math.isfinite(val_mse):
            model.load_state_dict(best_state)
            raise NumericalError(f"non-finite validation MSE at epoch {epoch}; restored best parameters")
        improved = val_mse < best_val
        if improved:
            best_val, best_epoch = val_mse, epoch
            best_state = copy.deepcopy(model.state_dict())
        history.append({"epoch": epoch, **{k: v / n for k, v in sums.items()},
                        "val_mse": val_mse, "best_val_mse": best_val})
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "improved": improved, "model": model, "optimizer": opt,
                      "history": history, "best_epoch": best_epoch, "best_val_mse": best_val,
                      "best_state": best_state})
        if epoch - best_epoch >= cfg.patience:
            stopped = True
            break
    model.load_state_dict(best_state)
    return TrainResult(model, history, steps, best_epoch, best_val, opt, stopped)


def fit(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, **kw) -> TrainResult:
    """Build a model seeded by ``cfg.seed`` and train it."""
    model = build_model(model_cfg, dataset.train.X.shape[2:], dataset.cfg.n_frames,
                        dataset.train.E.shape[1], seed=cfg.seed)
    return train(dataset, model, cfg, **kw)


# ---------------------------------------------------------------------------
# hyperparameter search

@dataclass
class SearchReport:
    best: dict
    rows: list
    table: list


def _summarize(rows, keys):
    table = []
    for key, grp in itertools.groupby(sorted(rows, key=lambda r: [str(r[k]) for k in keys]),
                                      key=lambda r: tuple(r[k] for k in keys)):
        vals = np.array([r["val_mse"] for r in grp])
        table.append({**dict(zip(keys, key)), "mean_val_mse": float(vals.mean()),
                      "var_val_mse": float(vals.var()), "n": int(len(vals))})
    return table


def grid_search(dataset_for: Callable, model_cfg: ModelConfig, cfg: TrainConfig,
                Ks=(1, 2, 3, 4, 5, 6, 7, 8, 9, 10),
                lambda_er=(1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0),
                lambda_eid=(1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0),
                windows=None, seeds=(0, 1, 2), log: Callable | None = None) -> SearchReport:
    """Staged search: K with the base loss weights, then the loss weights at
    the best K, then (optionally) window lengths. A configuration already
    trained in an earlier stage is not retrained.

    ``dataset_for(fusion_cfg_or_None)`` returns a prepared Dataset; ``None``
    asks for the default windows. Each configuration is trained once per seed
    and ranked by mean validation MSE. Loss-weight pairs summing to 1 or more
    are skipped.
    """
    rows = []
    cache = {}

    def data(win):
        if win not in cache:
            cache[win] = dataset_for(win)
        return cache[win]

    scored = {}

    def run(stage, mcfg, lcfg, win):
        key = (mcfg.K, lcfg.lambda_er, lcfg.lambda_eid, win)
        if key in scored:
            return scored[key]
        scores = []
        for s in seeds:
            tcfg = replace(cfg, seed=s, loss=lcfg)
            res = fit(data(win), mcfg, tcfg)
            row = {"stage": stage, "K": mcfg.K, "lambda_er": lcfg.lambda_er,
                   "lambda_eid": lcfg.lambda_eid, "windows": win, "seed": s,
                   "best_epoch": res.best_epoch, "val_mse": res.best_val_mse}
            rows.append(row)
            scores.append(res.best_val_mse)
            if log:
                log(row)
        scored[key] = float(np.mean(scores))
        return scored[key]

    best_k, best_score = model_cfg.K, math.inf
    for k in Ks:
        score = run("K", replace(model_cfg, K=k), cfg.loss, None)
        if score < best_score:
            best_k, best_score = k, score
    mcfg = replace(model_cfg, K=best_k)

    best_loss, best_score = cfg.loss, math.inf
    for a, b in ((a, b) for a in lambda_er for b in lambda_eid if a + b < 1):
        lcfg = replace(cfg.loss, lambda_er=a, lambda_eid=b)
        score = run("lambda", mcfg, lcfg, None)
        if score < best_score:
            best_loss, best_score = lcfg, score

    best_win = None
    if windows:
        best_score = math.inf
        for win in windows:
            score = run("windows", mcfg, best_loss, tuple(win))
            if score < best_score:
                best_win, best_score = tuple(win), score

    best = {"K": best_k, "lambda_er": best_loss.lambda_er, "lambda_eid": best_loss.lambda_eid,
            "windows": best_win}
    return SearchReport(best, rows, _summarize(rows, ["stage", "K", "lambda_er", "lambda_eid", "windows"]))


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(loss_at_params: Callable, params, eps: float = 1e-4, grad=None,
                      threshold: float = 1e-8) -> float:
    """Largest relative gap between central differences and ``grad``.

    ``loss_at_params`` maps a float64 parameter vector to a scalar. Without
    ``grad`` the gradient comes from autograd through ``loss_at_params``.
    Coordinates where both gradients are below ``threshold`` are skipped.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    theta = torch.as_tensor(params, dtype=torch.float64).detach().clone().reshape(-1)
    if theta.numel() > 10_000:
        raise ConfigError(f"too many parameters for a finite-difference check ({theta.numel()})")
    if grad is None:
        t = theta.clone().requires_grad_(True)
        f = loss_at_params(t)
        if not torch.isfinite(f):
            raise NumericalError("non-finite loss")
        (grad,) = torch.autograd.grad(f, t)
    grad = torch.as_tensor(grad, dtype=torch.float64).reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for k in range(theta.numel()):
            tp, tm = theta.clone(), theta.clone()
            tp[k] += eps
            tm[k] -= eps
            fp, fm = float(loss_at_params(tp)), float(loss_at_params(tm))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError(f"non-finite loss while perturbing coordinate {k}")
            fd = (fp - fm) / (2 * eps)
            g = float(grad[k])
            scale = max(abs(fd), abs(g))
            if scale > threshold:
                worst = max(worst, abs(fd - g) / scale)
    return worst


def params_loss_fn(model: torch.nn.Module, x, ext, y, loss_cfg: LossConfig,
                   variant: str | None = None) -> tuple[Callable, torch.Tensor]:
    """Flatten a model's parameters into one vector and return
    ``(f, theta0)`` with ``f(theta)`` the total loss at ``theta``."""
    names = [k for k, _ in model.named_parameters()]
    shapes = [p.shape for _, p in model.named_parameters()]
    sizes = [p.numel() for _, p in model.named_parameters()]
    theta0 = torch.cat([p.detach().reshape(-1) for p in model.parameters()]).double()
    model = copy.deepcopy(model).double()  # leave the caller's model in float32
    x, y = torch.as_tensor(x).double(), torch.as_tensor(y).double()
    ext = None if ext is None else torch.as_tensor(ext).double()

    def f(theta):
        chunks = torch.split(theta, sizes)
        params = {n: c.reshape(s) for n, c, s in zip(names, chunks, shapes)}
        trace: ForwardTrace = torch.func.functional_call(model, params, (x, ext), {"variant": variant})
        return total_loss(trace, y, loss_cfg).total

    return f, theta0
