"""End-to-end steps shared by the command line and the demo scripts:
dataset loading, checkpointing, training runs, evaluation and attention
export."""
from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import ConfigError, DataError
from .eval_stats import match_experts_to_patterns, metrics, pairwise_expert_quade
from .flow_core import FlowSeries, NormStats, minmax_apply
from .fusion import Dataset, FusionConfig, build_sample, prepare_dataset, split_anchors, stack_samples, usable_anchors
from .io import StflowDataset, load_checkpoint, read_stflow, save_checkpoint
from .model import ModelConfig, build_model, load_model_arrays, model_arrays
from .training import collect, train

HISTORY_COLUMNS = ("epoch", "mse", "l_er", "l_eid", "total", "val_mse", "best_val_mse")
STEP_COLUMNS = ("step", "mse", "l_er", "l_eid", "total")


def load_data(path, fusion: FusionConfig, target=(-1.0, 1.0), stats: NormStats | None = None):
    """Read an stflow directory and build the normalized splits."""
    raw = read_stflow(path)
    return raw, prepare_dataset(raw.series, raw.externals, fusion, tuple(target), stats)


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


# ---------------------------------------------------------------------------
# checkpoints

def model_meta(model, fusion: FusionConfig, stats: NormStats, **extra) -> dict:
    return {"model": model.cfg.to_dict(), "fusion": fusion.to_dict(), "stats": stats.to_dict(),
            "grid_shape": list(model.grid_shape), "n_frames": model.n_frames, "n_ext": model.n_ext, **extra}


def save_model(path, model, meta: dict, extra_arrays: dict | None = None) -> None:
    arrays = {f"model.{k}": v for k, v in model_arrays(model).items()}
    arrays.update(extra_arrays or {})
    save_checkpoint(path, arrays, meta)


def load_model(path):
    """Rebuild the network stored in a checkpoint. Returns (model, meta, arrays)."""
    arrays, meta = load_checkpoint(path)
    try:
        mcfg = ModelConfig(**meta["model"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed model metadata ({exc})") from None
    model = build_model(mcfg, tuple(meta["grid_shape"]), int(meta["n_frames"]), int(meta["n_ext"]))
    load_model_arrays(model, {k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
    model.eval()
    return model, meta, arrays


def _optimizer_arrays(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for name, v in st.items():
            arrays[f"opt.{idx}.{name}"] = torch.as_tensor(v).detach().numpy()
    return arrays, {"param_groups": sd["param_groups"]}


def _optimizer_state(arrays: dict, meta: dict, model) -> dict:
    state: dict = {}
    for key, v in arrays.items():
        if key.startswith("opt."):
            _, idx, name = key.split(".", 2)
            t = torch.from_numpy(v.copy())
            if name == "step":
                t = t.reshape(())
            state.setdefault(int(idx), {})[name] = t
    return {"state": state, "param_groups": meta["optimizer"]["param_groups"]}


# ---------------------------------------------------------------------------
# training runs

@dataclass
class RunOutcome:
    out: Path
    best_epoch: int
    best_val_mse: float
    history: list
    manifest_hash: str | None


def run_training(cfg: RunConfig, resume: bool = False, log=None) -> RunOutcome:
    """Train per ``cfg`` and write best.ckpt, last.ckpt, history.csv,
    steps.csv and run.json into ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    raw, ds = load_data(cfg.data, cfg.fusion, cfg.target_range)
    tcfg = cfg.train_config()
    model = build_model(cfg.model, raw.series.grid.shape, cfg.fusion.n_frames, raw.externals.shape[1], seed=cfg.seed)
    base_meta = {"run": cfg.to_dict(), "manifest_hash": raw.manifest_hash}

    resume_state = None
    last = out / "last.ckpt"
    if resume:
        if not last.exists():
            raise DataError(f"--resume given but {last} does not exist")
        _, meta, arrays = load_model(last)
        load_model_arrays(model, {k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
        best_state = {k[5:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("best.")}
        ref = model.state_dict()
        best_state = {k: v.to(ref[k].dtype) for k, v in best_state.items()}
        resume_state = {"epoch": meta["epoch"] + 1, "history": meta["history"],
                        "best_epoch": meta["best_epoch"], "best_val_mse": meta["best_val_mse"],
                        "best_state": best_state, "optimizer_state": _optimizer_state(arrays, meta, model)}

    def on_epoch(info):
        meta = model_meta(model, cfg.fusion, ds.stats, epoch=info["epoch"], **base_meta)
        if info["improved"]:
            save_model(out / "best.ckpt", model, {**meta, "val_mse": info["best_val_mse"]})
        opt_arrays, opt_meta = _optimizer_arrays(info["optimizer"])
        best = {f"best.{k}": v.detach().numpy().astype(np.float32) for k, v in info["best_state"].items()}
        save_model(last, model, {**meta, "history": info["history"], "best_epoch": info["best_epoch"],
                                 "best_val_mse": info["best_val_mse"], "optimizer": opt_meta},
                   {**opt_arrays, **best})
        if log:
            h = info["history"][-1]
            log(f"epoch {h['epoch']:3d}  loss {h['total']:.5f}  mse {h['mse']:.5f}  val_mse {h['val_mse']:.4f}")

    res = train(ds, model, tcfg, on_epoch=on_epoch, resume=resume_state)
    write_csv(out / "history.csv", res.history, HISTORY_COLUMNS)
    write_csv(out / "steps.csv", res.steps, STEP_COLUMNS)
    meta = {**base_meta, "best_epoch": res.best_epoch, "best_val_mse": res.best_val_mse,
            "epochs_run": len(res.history), "stopped_early": res.stopped_early,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return RunOutcome(out, res.best_epoch, res.best_val_mse, res.history, raw.manifest_hash)


# ---------------------------------------------------------------------------
# evaluation

def dataset_for_checkpoint(meta: dict, data_path) -> tuple[StflowDataset, Dataset]:
    fusion = FusionConfig(**meta["fusion"])
    raw = read_stflow(data_path)
    grid = tuple(meta["grid_shape"])
    if raw.series.grid.shape != grid or raw.externals.shape[1] != meta["n_ext"]:
        raise DataError(
            f"dataset grid {raw.series.grid.shape} / {raw.externals.shape[1]} external fields do not match "
            f"checkpoint grid {grid} / {meta['n_ext']} external fields")
    stats = NormStats.from_dict(meta["stats"])
    return raw, prepare_dataset(raw.series, raw.externals, fusion, stats.target, stats)


def quade_over_batches(gated: np.ndarray, n: int) -> np.ndarray:
    """Mean pairwise Quade matrix over consecutive full batches of ``n``
    samples (a shorter remainder is dropped unless it is the only batch)."""
    N = gated.shape[0]
    starts = list(range(0, max(N - n + 1, 1), n))
    mats = [pairwise_expert_quade(np.moveaxis(gated[s:s + n], 1, 0)) for s in starts]
    return np.mean(mats, axis=0)


def evaluate_checkpoint(checkpoint, data_path, variant: str | None = None, split: str = "test",
                        quade_n: int = 32) -> dict:
    model, meta, _ = load_model(checkpoint)
    raw, ds = dataset_for_checkpoint(meta, data_path)
    samples = {"train": ds.train, "val": ds.val, "test": ds.test}[split]
    fields = ("prediction", "attention", "gated")
    out = collect(model, samples, variant=variant, fields=fields)
    rep = metrics(out["prediction"], samples.Y, ds.stats)
    result = {"split": split, "variant": variant or model.cfg.variant, "metrics": rep.to_dict(),
              "checkpoint_epoch": meta.get("epoch")}
    if model.K >= 2 and len(samples) >= 3:
        result["quade"] = quade_over_batches(out["gated"], min(quade_n, len(samples))).tolist()
    if raw.truth_masks is not None:
        mean_att = out["attention"][:, :, 0].mean(axis=0)
        result["match"] = match_experts_to_patterns(mean_att, raw.truth_masks).to_dict()
    return result


# ---------------------------------------------------------------------------
# attention export

def export_attention(checkpoint, data_path, out, anchors=None, coords=(), render: bool = False) -> dict:
    """Per-expert mean inflow attention grids over ``anchors`` (default: the
    test anchors), plus per-coordinate attention time series."""
    model, meta, _ = load_model(checkpoint)
    raw, ds = dataset_for_checkpoint(meta, data_path)
    fusion = ds.cfg
    scaled = FlowSeries(minmax_apply(raw.series.flows, ds.stats), raw.series.grid, raw.series.t0)
    valid = usable_anchors(len(scaled), fusion)
    if anchors is None:
        anchors = split_anchors(np.arange(valid.start, valid.stop))[2]
    anchors = [int(a) for a in anchors]
    if not anchors:
        raise DataError("no anchors selected")
    bad = [a for a in anchors if a not in valid]
    if bad:
        raise DataError(f"anchors {bad[:5]} outside the valid range [{valid.start}, {valid.stop - 1}]")
    samples = stack_samples([build_sample(scaled, raw.externals, a, fusion) for a in anchors])
    att = collect(model, samples, fields=("attention",))["attention"][:, :, 0]  # (N, K, h, w)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mean = att.mean(axis=0)
    files = []
    for k in range(mean.shape[0]):
        p = out / f"expert_{k}.csv"
        np.savetxt(p, mean[k], delimiter=",", fmt="%.8f")
        files.append(str(p))
    for (i, j) in coords:
        h, w = mean.shape[1:]
        if not (0 <= i < h and 0 <= j < w):
            raise DataError(f"coordinate ({i}, {j}) outside the {h}x{w} grid")
        p = out / f"series_{i}_{j}.csv"
        rows = [{"t": a + 1, **{f"expert_{k}": float(att[n, k, i, j]) for k in range(att.shape[1])}}
                for n, a in enumerate(anchors)]
        write_csv(p, rows, ["t"] + [f"expert_{k}" for k in range(att.shape[1])])
        files.append(str(p))
    result = {"files": files, "n_anchors": len(anchors)}
    if raw.truth_masks is not None:
        rep = match_experts_to_patterns(mean, raw.truth_masks)
        (out / "match.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
        result["match"] = rep.to_dict()
    if render:
        result["images"] = render_heatmaps(mean, out)
    return result


def render_heatmaps(maps: np.ndarray, out: Path) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for k, m in enumerate(maps):
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(m, vmin=0, vmax=1, cmap="viridis", origin="lower")
        ax.set_title(f"expert {k} inflow attention")
        fig.colorbar(im, ax=ax, fraction=0.046)
        p = out / f"expert_{k}.png"
        fig.savefig(p, dpi=100, bbox_inches="tight")
        plt.close(fig)
        paths.append(str(p))
    return paths
