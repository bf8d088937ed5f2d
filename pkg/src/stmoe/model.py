"""Mixture-of-experts forward computation over city grids.

Shapes carry a leading batch axis B. Experts and gates read the fused input
X (B, n_w + 2L, h, w); per-expert quantities are stacked on axis 1 as
(B, K, 2, h, w). Inflow and outflow channels are gated independently.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, NumericalError

VARIANTS = ("full", "no_gs", "no_gt")


@dataclass
class ForwardTrace:
    prediction: torch.Tensor      # (B, 2, h, w)
    expert_raw: torch.Tensor      # (B, K, 2, h, w)  E_i(X)
    gate_logits: torch.Tensor     # (B, K, 2, h, w)  G_s(X), ones when the spatial gate is ablated
    attention: torch.Tensor       # (B, K, 2, h, w)  a_i
    log_attention: torch.Tensor   # (B, K, 2, h, w)  log a_i, computed stably
    gated: torch.Tensor           # (B, K, 2, h, w)  e_i = a_i * E_i
    temporal_gate: torch.Tensor   # (B, 2, h, w)     sigmoid(G_t(X)), ones when ablated
    per_expert_H: torch.Tensor    # (B, K, 2, h, w)  temporal_gate * tanh(E_i)

    @property
    def K(self) -> int:
        return self.expert_raw.shape[1]

    def detach(self) -> "ForwardTrace":
        return ForwardTrace(**{f.name: getattr(self, f.name).detach() for f in fields(self)})

    def numpy(self) -> dict:
        return {f.name: getattr(self, f.name).detach().cpu().numpy() for f in fields(self)}


def spatial_attention(gs_out: torch.Tensor, expert_raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-cell softmax over the expert axis (dim 1) of ``gs_out * expert_raw``.

    Returns ``(attention, log_attention)``.
    """
    if gs_out.shape != expert_raw.shape:
        raise ConfigError(f"gate output {tuple(gs_out.shape)} and expert output {tuple(expert_raw.shape)} differ")
    z = gs_out * expert_raw
    finite = torch.isfinite(z).flatten(2).all(dim=2).all(dim=0)
    if not bool(finite.all()):
        bad = int(torch.nonzero(~finite)[0, 0])
        raise NumericalError(f"non-finite attention logits from expert {bad}")
    log_a = torch.log_softmax(z, dim=1)  # max-subtracted internally
    return log_a.exp(), log_a


def combine(expert_raw: torch.Tensor, gs_out: torch.Tensor | None,
            gt_logits: torch.Tensor | None) -> ForwardTrace:
    """Gated combination of expert fields.

    ``gs_out=None`` drops the spatial gate (attention from the expert outputs
    alone); ``gt_logits=None`` drops the temporal gate.
    """
    if gs_out is None:
        gs_out = torch.ones_like(expert_raw)
    attention, log_a = spatial_attention(gs_out, expert_raw)
    gated = attention * expert_raw
    if gt_logits is None:
        gate = torch.ones_like(expert_raw[:, 0])
    else:
        gate = torch.sigmoid(gt_logits)
    prediction = torch.tanh(gated.sum(dim=1)) * gate
    H = gate.unsqueeze(1) * torch.tanh(expert_raw)
    return ForwardTrace(prediction, expert_raw, gs_out, attention, log_a, gated, gate, H)


# ---------------------------------------------------------------------------
# building blocks

class ConvStack(nn.Module):
    """3x3 convolutions, BatchNorm + ReLU between layers, linear output."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int = 64, depth: int = 3, norm: bool = True):
        super().__init__()
        if depth < 1:
            raise ConfigError("conv stack depth must be >= 1")
        layers: list[nn.Module] = []
        ch = in_ch
        for _ in range(depth - 1):
            layers.append(nn.Conv2d(ch, hidden, 3, padding=1))
            if norm:
                layers.append(nn.BatchNorm2d(hidden))
            layers.append(nn.ReLU())
            ch = hidden
        layers.append(nn.Conv2d(ch, out_ch, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConvGRUCell(nn.Module):
    def __init__(self, in_ch: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_ch + hidden, 2 * hidden, 3, padding=1)
        self.cand = nn.Conv2d(in_ch + hidden, hidden, 3, padding=1)

    def forward(self, x, h):
        r, u = torch.sigmoid(self.gates(torch.cat([x, h], 1))).chunk(2, dim=1)
        c = torch.tanh(self.cand(torch.cat([x, r * h], 1)))
        return u * h + (1 - u) * c


class RecurrentConv(nn.Module):
    """Stacked ConvGRU run over the 2-channel frames of the fused input.

    Frames are fed in channel order (trend, period, closeness; oldest first),
    each concatenated with the external embedding channels.
    """

    def __init__(self, n_frames: int, n_w: int, out_ch: int = 2, hidden: int = 32, layers: int = 2):
        super().__init__()
        self.n_frames, self.n_w = n_frames, n_w
        self.cells = nn.ModuleList(
            ConvGRUCell((2 + n_w) if k == 0 else hidden, hidden) for k in range(layers))
        self.head = nn.Conv2d(hidden, out_ch, 3, padding=1)

    def forward(self, x):
        B, _, h, w = x.shape
        emb, flows = x[:, :self.n_w], x[:, self.n_w:]
        frames = flows.reshape(B, self.n_frames, 2, h, w)
        states = [x.new_zeros(B, c.hidden, h, w) for c in self.cells]
        for t in range(self.n_frames):
            inp = torch.cat([frames[:, t], emb], 1)
            for k, cell in enumerate(self.cells):
                states[k] = cell(inp, states[k])
                inp = states[k]
        return self.head(states[-1])


class ExternalEmbed(nn.Module):
    """Affine map + ReLU from the external vector to n_w grid channels."""

    def __init__(self, n_ext: int, n_w: int, grid_shape: tuple[int, int]):
        super().__init__()
        self.n_ext, self.n_w, self.grid_shape = n_ext, n_w, tuple(grid_shape)
        self.fc = nn.Linear(n_ext, n_w * grid_shape[0] * grid_shape[1]) if n_ext and n_w else None

    def forward(self, ext, batch: int, like: torch.Tensor):
        h, w = self.grid_shape
        if self.fc is None:
            return like.new_zeros(batch, self.n_w, h, w)
        if ext is None or ext.shape[-1] != self.n_ext:
            got = None if ext is None else ext.shape[-1]
            raise ConfigError(f"external vector length {got} does not match embedder input {self.n_ext}")
        return torch.relu(self.fc(ext)).reshape(batch, self.n_w, h, w)


def external_embed(embedder: ExternalEmbed, ext: torch.Tensor) -> torch.Tensor:
    ext = torch.as_tensor(ext)
    if ext.ndim == 1:
        ext = ext.unsqueeze(0)
    return embedder(ext, ext.shape[0], ext)


# ---------------------------------------------------------------------------
# networks

@dataclass(frozen=True)
class ModelConfig:
    arch: str = "expertnet"   # expertnet | monolith
    K: int = 3
    backbone: str = "conv"    # conv | recurrent
    hidden: int = 64
    depth: int = 3
    norm: bool = True
    n_w: int = 2
    rnn_hidden: int = 32
    rnn_layers: int = 2
    gate_hidden: int | None = None  # defaults to hidden
    variant: str = "full"

    def __post_init__(self):
        if self.arch not in ("expertnet", "monolith"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.backbone not in ("conv", "recurrent"):
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose conv or recurrent")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose one of {VARIANTS}")
        if self.hidden < 1 or self.depth < 1 or self.n_w < 0:
            raise ConfigError("hidden and depth must be >= 1, n_w >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class STExpertNet(nn.Module):
    def __init__(self, grid_shape, n_frames: int, n_ext: int = 0, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.grid_shape = tuple(grid_shape)
        self.n_frames, self.n_ext = n_frames, n_ext
        C = 2 * n_frames + cfg.n_w
        self.embed = ExternalEmbed(n_ext, cfg.n_w, grid_shape)
        if cfg.backbone == "conv":
            experts = [ConvStack(C, 2, cfg.hidden, cfg.depth, cfg.norm) for _ in range(cfg.K)]
        else:
            experts = [RecurrentConv(n_frames, cfg.n_w, 2, cfg.rnn_hidden, cfg.rnn_layers) for _ in range(cfg.K)]
        self.experts = nn.ModuleList(experts)
        gh = cfg.gate_hidden or cfg.hidden
        self.gs = ConvStack(C, 2 * cfg.K, gh, cfg.depth, cfg.norm)
        self.gt = ConvStack(C, 2, gh, cfg.depth, cfg.norm)

    @property
    def K(self) -> int:
        return self.cfg.K

    def fused_input(self, x, ext=None):
        emb = self.embed(ext, x.shape[0], x)
        return torch.cat([emb, x], dim=1)

    def forward(self, x, ext=None, variant: str | None = None) -> ForwardTrace:
        variant = variant or self.cfg.variant
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        X = self.fused_input(x, ext)
        B, _, h, w = X.shape
        E = torch.stack([e(X) for e in self.experts], dim=1)
        gs = None if variant == "no_gs" else self.gs(X).reshape(B, self.K, 2, h, w)
        gt = None if variant == "no_gt" else self.gt(X)
        return combine(E, gs, gt)


class MonolithNet(nn.Module):
    """Single conv-stack predictor, tanh output. Reports a K=1 trace."""

    def __init__(self, grid_shape, n_frames: int, n_ext: int = 0, cfg: ModelConfig = ModelConfig(arch="monolith")):
        super().__init__()
        self.cfg = cfg
        self.grid_shape = tuple(grid_shape)
        self.n_frames, self.n_ext = n_frames, n_ext
        C = 2 * n_frames + cfg.n_w
        self.embed = ExternalEmbed(n_ext, cfg.n_w, grid_shape)
        self.body = ConvStack(C, 2, cfg.hidden, cfg.depth, cfg.norm)

    K = 1

    def forward(self, x, ext=None, variant: str | None = None) -> ForwardTrace:
        X = torch.cat([self.embed(ext, x.shape[0], x), x], dim=1)
        E = self.body(X).unsqueeze(1)
        return combine(E, None, None)


def build_model(cfg: ModelConfig, grid_shape, n_frames: int, n_ext: int, seed: int | None = None) -> nn.Module:
    """Instantiate a network; ``seed`` fixes every initial parameter draw.

    Parameters use PyTorch's fan-in scaled uniform initialisation.
    """
    if seed is not None:
        torch.manual_seed(seed)
    if cfg.arch == "monolith":
        return MonolithNet(grid_shape, n_frames, n_ext, cfg)
    return STExpertNet(grid_shape, n_frames, n_ext, cfg)


def model_forward(model: STExpertNet, x, ext=None) -> ForwardTrace:
    return model(x, ext, variant="full")


def forward_no_gs(model: STExpertNet, x, ext=None) -> ForwardTrace:
    return model(x, ext, variant="no_gs")


def forward_no_gt(model: STExpertNet, x, ext=None) -> ForwardTrace:
    return model(x, ext, variant="no_gt")


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def matched_monolith_config(target_params: int, grid_shape, n_frames: int, n_ext: int,
                            base: ModelConfig) -> ModelConfig:
    """Monolith config whose hidden width brings its parameter count closest
    to ``target_params``."""
    best = None
    for hidden in range(1, 2049):
        cfg = ModelConfig(arch="monolith", hidden=hidden, depth=base.depth, norm=base.norm, n_w=base.n_w)
        n = count_params(MonolithNet(grid_shape, n_frames, n_ext, cfg))
        if best is None or abs(n - target_params) < best[0]:
            best = (abs(n - target_params), cfg)
        if n > target_params:
            break
    return best[1]


def model_arrays(model: nn.Module) -> dict:
    """Every parameter and buffer as a float32 numpy array."""
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}


def load_model_arrays(model: nn.Module, arrays: dict) -> None:
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise ConfigError(f"checkpoint lacks {sorted(missing)[:5]}")
    new = {}
    for k, ref in state.items():
        a = np.asarray(arrays[k])
        if tuple(a.shape) != tuple(ref.shape):
            raise ConfigError(f"{k}: checkpoint shape {a.shape} vs model {tuple(ref.shape)}")
        new[k] = torch.from_numpy(a.astype(np.float32)).to(ref.dtype)
    model.load_state_dict(new)
