"""Training objectives for the expert mixture.

Reductions: mean over batch, channels and cells; sum over experts where the
objective sums over experts. The determinant term is evaluated per sample
and averaged over the batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, NumericalError
from .model import ForwardTrace

ER_VARIANTS = ("general", "log_mixture")


@dataclass(frozen=True)
class LossConfig:
    lambda_er: float = 1e-2
    lambda_eid: float = 0.1
    n_top: int | None = None      # None: all K experts enter V
    er_variant: str = "log_mixture"
    er_reduction: str = "cell"    # cell | global

    def __post_init__(self):
        if not (0 <= self.lambda_er < 1 and 0 <= self.lambda_eid < 1):
            raise ConfigError("lambda_er and lambda_eid must lie in [0, 1)")
        if self.lambda_er + self.lambda_eid >= 1:
            raise ConfigError(
                f"lambda_er + lambda_eid = {self.lambda_er + self.lambda_eid} leaves no weight for the MSE term")
        if self.er_variant == "logmix":
            object.__setattr__(self, "er_variant", "log_mixture")
        if self.er_variant not in ER_VARIANTS:
            raise ConfigError(f"unknown er_variant {self.er_variant!r}; choose general or log_mixture")
        if self.er_reduction not in ("cell", "global"):
            raise ConfigError(f"unknown er_reduction {self.er_reduction!r}")
        if self.n_top is not None and self.n_top < 1:
            raise ConfigError("n_top must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _check(trace: ForwardTrace, y: torch.Tensor) -> None:
    if trace.per_expert_H.shape[0] != y.shape[0] or trace.per_expert_H.shape[2:] != y.shape[1:]:
        raise ConfigError(f"target shape {tuple(y.shape)} does not match trace {tuple(trace.per_expert_H.shape)}")


def responsibility_loss_general(trace: ForwardTrace, y: torch.Tensor) -> torch.Tensor:
    """Attention-weighted squared error of each expert's own prediction."""
    _check(trace, y)
    r2 = (y.unsqueeze(1) - trace.per_expert_H) ** 2
    return (trace.attention * r2).mean(dim=(0, 2, 3, 4)).sum()


def responsibility_loss(trace: ForwardTrace, y: torch.Tensor, reduction: str = "cell") -> torch.Tensor:
    """Negative log-likelihood of a unit-variance Gaussian mixture whose
    components are the per-expert predictions, weighted by attention.

    ``reduction="cell"`` mixes per cell and averages the per-cell values;
    ``"global"`` uses each sample's whole-tensor squared residual and the
    expert's mean attention as mixing weight.
    """
    _check(trace, y)
    r2 = (y.unsqueeze(1) - trace.per_expert_H) ** 2
    if not bool(torch.isfinite(r2).all()):
        raise NumericalError("non-finite residual in responsibility loss")
    if reduction == "cell":
        nll = -torch.logsumexp(trace.log_attention - 0.5 * r2, dim=1)
        return nll.mean()
    if reduction == "global":
        g = trace.attention.flatten(2).mean(dim=2)                      # (B, K)
        sq = r2.flatten(2).sum(dim=2)                                   # (B, K)
        return (-torch.logsumexp(torch.log(g) - 0.5 * sq, dim=1)).mean()
    raise ConfigError(f"unknown reduction {reduction!r}")


def responsibility_grad_reference(trace: ForwardTrace, y: torch.Tensor, variant: str = "log_mixture") -> torch.Tensor:
    """Closed-form derivative of the responsibility loss with respect to each
    expert's raw output, holding the attention fixed (cell reduction).

    Returns a (B, K, 2, h, w) tensor scaled by the same 1/(cells) factor as
    the mean reduction, so it is directly comparable with autograd.
    """
    _check(trace, y)
    gate = trace.temporal_gate.unsqueeze(1)
    dH = gate * (1 - torch.tanh(trace.expert_raw) ** 2)
    resid = y.unsqueeze(1) - trace.per_expert_H
    a = trace.attention
    n_cells = y.numel()
    if variant == "general":
        g = -2 * a * dH * resid
    elif variant in ("log_mixture", "logmix"):
        post = torch.softmax(trace.log_attention - 0.5 * resid ** 2, dim=1)
        g = -dH * post * resid
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return g / n_cells


def build_V(trace: ForwardTrace, n_top: int | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Columns ``mean(a_i) * e_i / |e_i|`` for the ``n_top`` experts with
    the largest mean attention, in descending order, one matrix per sample.

    Returns ``(V, order, zero_cols)`` with V of shape (B, D, n_top).
    A zero ``e_i`` yields a zero column and is flagged in ``zero_cols``.
    """
    K = trace.K
    n_top = K if n_top is None else n_top
    if not 1 <= n_top <= K:
        raise ConfigError(f"n_top must lie in [1, {K}], got {n_top}")
    B = trace.gated.shape[0]
    gbar = trace.attention.reshape(B, K, -1).mean(dim=2)                 # (B, K)
    flat = trace.gated.reshape(B, K, -1)                                 # (B, K, D)
    order = torch.argsort(gbar.detach(), dim=1, descending=True, stable=True)[:, :n_top]
    gsel = torch.gather(gbar, 1, order)
    esel = torch.gather(flat, 1, order.unsqueeze(-1).expand(-1, -1, flat.shape[2]))
    norm = esel.norm(dim=2, keepdim=True)
    zero = norm.squeeze(-1) == 0
    unit = esel / torch.where(zero.unsqueeze(-1), torch.ones_like(norm), norm)
    V = (gsel.unsqueeze(-1) * unit).transpose(1, 2)
    return V, order, zero


def gram_det(V: torch.Tensor) -> torch.Tensor:
    """det(V^T V) over the last two axes via pivoted LU; log-magnitude form
    beyond six columns."""
    if not bool(torch.isfinite(V).all()):
        raise NumericalError("non-finite entries in V")
    G = V.transpose(-1, -2) @ V
    if G.shape[-1] > 6:
        sign, logabs = torch.linalg.slogdet(G)
        return sign * torch.exp(logabs)
    return torch.linalg.det(G)


def inter_discrepancy_loss(V: torch.Tensor) -> torch.Tensor:
    """Negative Gram determinant; batched inputs are averaged."""
    d = gram_det(V)
    return -(d.mean() if d.ndim else d)


@dataclass
class LossParts:
    total: torch.Tensor
    mse: torch.Tensor
    l_er: torch.Tensor
    l_eid: torch.Tensor

    def floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("mse", "l_er", "l_eid", "total")}


def total_loss(trace: ForwardTrace, y: torch.Tensor, cfg: LossConfig) -> LossParts:
    mse = ((trace.prediction - y) ** 2).mean()
    zero = mse.new_zeros(())
    if cfg.lambda_er > 0:
        if cfg.er_variant == "general":
            l_er = responsibility_loss_general(trace, y)
        else:
            l_er = responsibility_loss(trace, y, cfg.er_reduction)
    else:
        l_er = zero
    if cfg.lambda_eid > 0:
        l_eid = inter_discrepancy_loss(build_V(trace, cfg.n_top)[0])
    else:
        l_eid = zero
    total = (1 - cfg.lambda_er - cfg.lambda_eid) * mse + cfg.lambda_er * l_er + cfg.lambda_eid * l_eid
    return LossParts(total, mse, l_er, l_eid)
