"""On-disk formats.

stflow directory::

    manifest.json   grid, interval, start timestamp, channel names,
                    external schema, array shapes, dtype tag "f32le"
    flow.bin        T x 2 x h x w little-endian float32, C order
    external.bin    T x n_ext little-endian float32
    truth_masks.bin M x h x w (synthetic datasets only)
    patterns.json   pattern descriptions (synthetic datasets only)

Checkpoint file::

    b"STMOECKP" | u32 version | u32 header length | JSON header | raw f32le arrays
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .flow_core import CHANNELS, ExternalSchema, FlowSeries, GridSpec

F32LE = np.dtype("<f4")
STFLOW_VERSION = 1
CKPT_MAGIC = b"STMOECKP"
CKPT_VERSION = 1


@dataclass
class StflowDataset:
    series: FlowSeries
    externals: np.ndarray  # (T, n_ext)
    schema: ExternalSchema
    truth_masks: np.ndarray | None = None
    patterns: list | None = None
    manifest_hash: str | None = None


def _write_array(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype=F32LE).tofile(path)


def _read_array(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing array file {path}")
    arr = np.fromfile(path, dtype=F32LE)
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{path.name}: expected {int(np.prod(shape))} values for shape {tuple(shape)}, found {arr.size}")
    return arr.reshape(shape)


def write_stflow(out, series: FlowSeries, externals: np.ndarray, schema: ExternalSchema,
                 truth_masks: np.ndarray | None = None, patterns: list | None = None) -> str:
    """Write a dataset container and return the sha256 of its manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    externals = np.asarray(externals).reshape(len(series), -1)
    if externals.shape[1] != schema.width:
        raise DataError(f"external width {externals.shape[1]} does not match schema width {schema.width}")
    manifest = {
        "format": "stflow",
        "version": STFLOW_VERSION,
        "grid": series.grid.to_dict(),
        "interval_minutes": series.grid.interval,
        "t0": series.t0,
        "start": series.start,
        "channels": list(CHANNELS),
        "external_schema": schema.to_list(),
        "dtype": "f32le",
        "arrays": {
            "flow": {"file": "flow.bin", "shape": list(series.flows.shape)},
            "external": {"file": "external.bin", "shape": list(externals.shape)},
        },
    }
    _write_array(out / "flow.bin", series.flows)
    _write_array(out / "external.bin", externals)
    if truth_masks is not None:
        manifest["arrays"]["truth_masks"] = {"file": "truth_masks.bin", "shape": list(truth_masks.shape)}
        _write_array(out / "truth_masks.bin", truth_masks)
    if patterns is not None:
        (out / "patterns.json").write_text(json.dumps(patterns, indent=2, sort_keys=True) + "\n")
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_stflow(path) -> StflowDataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DataError(f"{path} is not an stflow directory (no manifest.json)")
    text = mpath.read_text()
    m = json.loads(text)
    if m.get("format") != "stflow" or m.get("dtype") != "f32le":
        raise DataError(f"{mpath}: unsupported format/dtype")
    if m.get("version", 0) > STFLOW_VERSION:
        raise DataError(f"{mpath}: version {m['version']} is newer than supported {STFLOW_VERSION}")
    grid = GridSpec.from_dict(m["grid"])
    arrays = m["arrays"]
    flows = _read_array(path / arrays["flow"]["file"], arrays["flow"]["shape"])
    ext = _read_array(path / arrays["external"]["file"], arrays["external"]["shape"])
    schema = ExternalSchema.from_list(m.get("external_schema", []))
    masks = None
    if "truth_masks" in arrays:
        masks = _read_array(path / arrays["truth_masks"]["file"], arrays["truth_masks"]["shape"])
    patterns = None
    if (path / "patterns.json").exists():
        patterns = json.loads((path / "patterns.json").read_text())
    series = FlowSeries(flows, grid, t0=int(m.get("t0", 0)), start=m.get("start"))
    return StflowDataset(series, ext, schema, masks, patterns, hashlib.sha256(text.encode()).hexdigest())


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Named float32 arrays plus a JSON metadata block in one file."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.array(arr, dtype=F32LE, order="C")  # ascontiguousarray would promote 0-d to 1-d
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version > CKPT_VERSION:
        raise ConfigError(f"checkpoint version {version} is newer than supported {CKPT_VERSION}")
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=F32LE).reshape(e["shape"]).copy()
    return arrays, header["meta"]
