"""Seed-averaged synthetic experiments: expert/pattern disentanglement,
gate ablations and the mixture-versus-monolith comparison.

Each function trains from scratch on a built-in preset and returns plain
numbers, so the same code backs the acceptance tests and the demo scripts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .eval_stats import match_experts_to_patterns, pairwise_expert_quade
from .fusion import FusionConfig, prepare_dataset
from .losses import LossConfig
from .model import ModelConfig, build_model, count_params, matched_monolith_config
from .synthgen import builtin_city, generate
from .training import TrainConfig, collect, evaluate, fit

QUADE_BATCH = 32


@dataclass
class RunSummary:
    seed: int
    test_mse: float
    best_epoch: int
    n_params: int
    matched_corr: float | None = None
    quade: np.ndarray | None = None


@dataclass
class ExperimentSettings:
    hidden: int = 16
    depth: int = 3
    max_epochs: int = 20
    patience: int = 5
    data_seed: int = 0
    extra: dict = field(default_factory=dict)

    def train_config(self, seed: int, loss: LossConfig) -> TrainConfig:
        return TrainConfig(max_epochs=self.max_epochs, patience=self.patience, seed=seed, loss=loss)


def preset_dataset(preset: str, data_seed: int = 0, **overrides):
    city = builtin_city(preset, seed=data_seed)
    if overrides:
        city = replace(city, **overrides)
    data = generate(city)
    ds = prepare_dataset(data.series, data.externals, FusionConfig.for_interval(city.grid.interval))
    return data, ds


def _quade_mean(gated: np.ndarray) -> np.ndarray:
    n = min(QUADE_BATCH, gated.shape[0])
    mats = [pairwise_expert_quade(np.moveaxis(gated[s:s + n], 1, 0))
            for s in range(0, gated.shape[0] - n + 1, n)]
    return np.mean(mats, axis=0)


def disentanglement(seeds=(0, 1, 2), lambda_er: float = 1e-2, lambda_eid: float = 0.1, K: int = 3,
                    preset: str = "tiny8", settings: ExperimentSettings | None = None, log=None) -> list[RunSummary]:
    """Train one mixture per seed; score Hungarian-matched correlation of
    test-time mean inflow attention with the planted masks and the mean
    pairwise Quade p-value matrix of the gated expert outputs."""
    st = settings or ExperimentSettings()
    data, ds = preset_dataset(preset, st.data_seed)
    mcfg = ModelConfig(K=K, hidden=st.hidden, depth=st.depth)
    out = []
    for s in seeds:
        res = fit(ds, mcfg, st.train_config(s, LossConfig(lambda_er, lambda_eid)))
        tr = collect(res.model, ds.test, fields=("prediction", "attention", "gated"))
        match = match_experts_to_patterns(tr["attention"][:, :, 0].mean(axis=0), data.truth_masks)
        mse = evaluate(res.model, ds.test, ds.stats).mse
        run = RunSummary(s, mse, res.best_epoch, count_params(res.model), match.mean_matched, _quade_mean(tr["gated"]))
        if log:
            log(f"lambda_eid={lambda_eid} seed {s}: matched corr {run.matched_corr:.3f}  test mse {mse:.4f}")
        out.append(run)
    return out


def ablation(seeds=(0, 1, 2), preset: str = "ring16", settings: ExperimentSettings | None = None,
             loss: LossConfig = LossConfig(), K: int = 3, log=None) -> dict[str, list[RunSummary]]:
    """Train the full model and each single-gate ablation (the variant is
    active during training as well as at test time)."""
    st = settings or ExperimentSettings()
    _, ds = preset_dataset(preset, st.data_seed, weekend_shift=True)
    out: dict[str, list[RunSummary]] = {}
    for variant in ("full", "no_gs", "no_gt"):
        mcfg = ModelConfig(K=K, hidden=st.hidden, depth=st.depth, variant=variant)
        for s in seeds:
            res = fit(ds, mcfg, st.train_config(s, loss))
            mse = evaluate(res.model, ds.test, ds.stats).mse
            out.setdefault(variant, []).append(RunSummary(s, mse, res.best_epoch, count_params(res.model)))
            if log:
                log(f"{variant:6s} seed {s}: test mse {mse:.4f}")
    return out


def versus_monolith(seeds=(0, 1, 2), preset: str = "ring16", settings: ExperimentSettings | None = None,
                    loss: LossConfig = LossConfig(), K: int = 3, log=None,
                    moe_runs: list[RunSummary] | None = None) -> dict[str, list[RunSummary]]:
    """Mixture of K experts against one conv stack widened to the same
    parameter count. The monolith has no gates, so it trains on plain MSE.

    ``moe_runs`` reuses already trained mixture runs (the "full" entry of
    :func:`ablation` with the same settings is exactly this model).
    """
    st = settings or ExperimentSettings()
    data, ds = preset_dataset(preset, st.data_seed)
    moe_cfg = ModelConfig(K=K, hidden=st.hidden, depth=st.depth)
    n_ext = data.externals.shape[1]
    target = count_params(build_model(moe_cfg, data.series.grid.shape, ds.cfg.n_frames, n_ext))
    mono_cfg = matched_monolith_config(target, data.series.grid.shape, ds.cfg.n_frames, n_ext, moe_cfg)
    out: dict[str, list[RunSummary]] = {}
    if moe_runs is not None:
        out["moe"] = list(moe_runs)
    for name, mcfg, lcfg in (("moe", moe_cfg, loss), ("monolith", mono_cfg, LossConfig(0.0, 0.0))):
        if name in out:
            continue
        for s in seeds:
            res = fit(ds, mcfg, st.train_config(s, lcfg))
            mse = evaluate(res.model, ds.test, ds.stats).mse
            out.setdefault(name, []).append(RunSummary(s, mse, res.best_epoch, count_params(res.model)))
            if log:
                log(f"{name:8s} seed {s}: test mse {mse:.4f}  params {out[name][-1].n_params}")
    return out


def mean_of(runs: list[RunSummary], attr: str = "test_mse") -> float:
    return float(np.mean([getattr(r, attr) for r in runs]))
