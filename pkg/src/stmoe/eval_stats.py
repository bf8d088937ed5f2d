"""Error metrics, Quade significance testing between experts, and
expert-to-pattern matching."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as st
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, DataError
from .flow_core import NormStats, minmax_invert


@dataclass
class MetricReport:
    mse: float
    rmse: float
    mae: float
    mape: float | None  # fraction, None when no entry clears the floor
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(pred, truth, stats: NormStats | None = None, mape_floor: float = 1.0,
            mape_denominator: str = "prediction") -> MetricReport:
    """Errors on denormalized flows.

    MAPE divides by the prediction by default (``mape_denominator="truth"``
    for the conventional form) and only counts entries whose denominator
    magnitude is at least ``mape_floor``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if stats is not None:
        pred, truth = minmax_invert(pred, stats), minmax_invert(truth, stats)
    diff = pred - truth
    mse = float(np.mean(diff ** 2))
    mae = float(np.mean(np.abs(diff)))
    if mape_denominator == "prediction":
        denom = pred
    elif mape_denominator == "truth":
        denom = truth
    else:
        raise ConfigError(f"unknown MAPE denominator {mape_denominator!r}")
    keep = np.abs(denom) >= mape_floor
    mape = float(np.mean(np.abs(diff[keep] / denom[keep]))) if keep.any() else None
    return MetricReport(mse, math.sqrt(mse), mae, mape, int(pred.shape[0]) if pred.ndim else 1)


# ---------------------------------------------------------------------------
# Quade test

def quade_statistic(y1, y2):
    """Quade F statistic for two treatments over the blocks on axis 0.

    Trailing axes are independent problems, evaluated in one vectorized
    pass. Returns ``(F, all_tied)``; F is +inf when every block orders the
    treatments the same way with no ties.
    """
    y = np.stack([np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)], axis=1)
    n = y.shape[0]
    r = st.rankdata(y, axis=1)                      # within-block ranks, ties averaged
    q = st.rankdata(np.abs(y[:, 0] - y[:, 1]), axis=0)  # block weights: rank of the range
    S = q[:, None] * (r - 1.5)
    A = np.sum(S ** 2, axis=(0, 1))
    B = np.sum(np.sum(S, axis=0) ** 2, axis=0) / n
    tied = A == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        F = np.where(A > B, (n - 1) * B / np.where(A > B, A - B, 1.0), np.inf)
    return np.where(tied, 0.0, F), tied


def quade_pvalue(y1, y2):
    """Quade significance level for two paired series (blocks on axis 0).

    Referred to F(1, N - 1). Fully tied inputs return 1.
    """
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape:
        raise DataError(f"series shapes differ: {y1.shape} vs {y2.shape}")
    n = y1.shape[0]
    if n < 3:
        raise DataError(f"Quade test needs at least 3 blocks, got {n}")
    if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y2))):
        raise DataError("non-finite values in Quade input")
    F, tied = quade_statistic(y1, y2)
    p = np.where(tied, 1.0, st.f.sf(F, 1, n - 1))
    return float(p) if p.ndim == 0 else p


def pairwise_expert_quade(expert_outputs) -> np.ndarray:
    """K x K matrix of Quade p-values averaged over every (channel, cell).

    ``expert_outputs`` has shape (K, N, 2, h, w); samples are the blocks.
    The diagonal is 1.
    """
    out = np.asarray(expert_outputs, dtype=np.float64)
    K = out.shape[0]
    if K < 2:
        raise ConfigError("pairwise Quade needs at least two experts")
    P = np.ones((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            P[i, j] = P[j, i] = float(np.mean(quade_pvalue(out[i], out[j])))
    return P


# ---------------------------------------------------------------------------
# expert / pattern matching

def _pearson_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    num = a @ b.T
    den = np.outer(na, nb)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


@dataclass
class MatchReport:
    correlation: np.ndarray   # (K, M)
    assignment: list          # (expert, pattern) pairs
    matched: np.ndarray       # correlation of each assigned pair

    @property
    def mean_matched(self) -> float:
        return float(np.mean(self.matched)) if len(self.matched) else 0.0

    def to_dict(self) -> dict:
        return {"correlation": self.correlation.tolist(),
                "assignment": [list(map(int, p)) for p in self.assignment],
                "matched": self.matched.tolist(), "mean_matched": self.mean_matched}


def match_experts_to_patterns(mean_attention, truth_masks) -> MatchReport:
    """Pearson correlation of expert attention maps with pattern masks and
    the one-to-one assignment of maximum total correlation.

    Constant maps correlate 0 with everything.
    """
    A = np.asarray(mean_attention, dtype=np.float64)
    M = np.asarray(truth_masks, dtype=np.float64)
    if A.ndim != 3 or M.ndim != 3 or A.shape[1:] != M.shape[1:]:
        raise DataError(f"attention maps {A.shape} and masks {M.shape} must be (n, h, w) on the same grid")
    C = _pearson_matrix(A, M)
    rows, cols = linear_sum_assignment(C, maximize=True)
    return MatchReport(C, list(zip(rows.tolist(), cols.tolist())), C[rows, cols])
