import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from stmoe.errors import ConfigError
from stmoe.losses import (LossConfig, build_V, gram_det, inter_discrepancy_loss, responsibility_grad_reference,
                          responsibility_loss, responsibility_loss_general, total_loss)
from stmoe.model import ForwardTrace, combine

D64 = torch.float64


def make_trace(E, a, gate, pred=None):
    """Trace with attention and temporal gate supplied directly, so they act
    as constants when differentiating with respect to ``E``."""
    H = gate.unsqueeze(1) * torch.tanh(E)
    gated = a * E
    if pred is None:
        pred = torch.tanh(gated.sum(1)) * gate
    return ForwardTrace(pred, E, torch.ones_like(E), a, torch.log(a), gated, gate, H)


def scalar_trace(H, a, y):
    """1x1 single-channel-pair trace with prescribed H_i and a_i."""
    H = torch.tensor(H, dtype=D64).reshape(1, -1, 1, 1, 1).expand(1, len(H), 2, 1, 1).clone()
    a = torch.tensor(a, dtype=D64).reshape(1, -1, 1, 1, 1).expand_as(H).clone()
    E = torch.atanh(H)
    tr = make_trace(E, a, torch.ones(1, 2, 1, 1, dtype=D64))
    return tr, torch.full((1, 2, 1, 1), y, dtype=D64)


def random_instance(g, K, h, w, B=2):
    E = torch.randn(B, K, 2, h, w, generator=g, dtype=D64)
    a = torch.softmax(torch.randn(B, K, 2, h, w, generator=g, dtype=D64), dim=1)
    gate = torch.sigmoid(torch.randn(B, 2, h, w, generator=g, dtype=D64))
    y = torch.rand(B, 2, h, w, generator=g, dtype=D64) * 2 - 1
    return E, a, gate, y


# --- responsibility losses

def test_general_examples():
    tr, y = scalar_trace([0.1], [1.0], 0.5)
    assert responsibility_loss_general(tr, y).item() == pytest.approx(0.16, abs=1e-12)
    tr, y = scalar_trace([0.3, 0.3], [0.4, 0.6], 0.3)
    assert responsibility_loss_general(tr, y).item() == pytest.approx(0.0, abs=1e-12)


def test_general_homogeneity():
    g = torch.Generator().manual_seed(3)
    E, a, gate, y = random_instance(g, 3, 2, 2)
    tr = make_trace(E, a, gate)
    base = responsibility_loss_general(tr, y)
    shifted = tr.per_expert_H + 2.5 * (y.unsqueeze(1) - tr.per_expert_H)
    tr2 = ForwardTrace(tr.prediction, E, tr.gate_logits, a, tr.log_attention, tr.gated, gate, shifted)
    y2 = y + 0 * y
    # residual y - H' = -1.5 (y - H): loss scales by 2.25
    assert responsibility_loss_general(tr2, y2).item() == pytest.approx(2.25 * base.item(), rel=1e-12)


def test_log_mixture_exact_expert_gives_zero():
    tr, y = scalar_trace([0.2, -0.7], [1.0 - 1e-300, 1e-300], 0.2)
    assert responsibility_loss(tr, y).item() == pytest.approx(0.0, abs=1e-12)


def test_log_mixture_reference_value():
    # the documented instance: a = (0.5, 0.5), residuals^2 = (0, 2)
    E = torch.zeros(1, 2, 2, 1, 1, dtype=D64)
    a = torch.full_like(E, 0.5)
    tr = make_trace(E, a, torch.ones(1, 2, 1, 1, dtype=D64))
    H = torch.zeros_like(E)
    H[:, 1] = -math.sqrt(2.0)
    tr = ForwardTrace(tr.prediction, E, tr.gate_logits, a, tr.log_attention, tr.gated, tr.temporal_gate, H)
    y = torch.zeros(1, 2, 1, 1, dtype=D64)
    assert responsibility_loss(tr, y).item() == pytest.approx(0.37989, abs=5e-6)
    assert responsibility_loss(tr, y).item() == pytest.approx(-math.log(0.5 + 0.5 * math.exp(-1)), abs=1e-12)


@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.integers(1, 4))
def test_log_mixture_constant_residual(h, y, K):
    tr, yy = scalar_trace([h] * K, [1.0 / K] * K, y)
    assert responsibility_loss(tr, yy).item() == pytest.approx((y - h) ** 2 / 2, abs=1e-12)


def test_log_mixture_global_reduction_runs():
    g = torch.Generator().manual_seed(0)
    E, a, gate, y = random_instance(g, 3, 3, 3)
    v = responsibility_loss(make_trace(E, a, gate), y, reduction="global")
    assert torch.isfinite(v)
    with pytest.raises(ConfigError):
        responsibility_loss(make_trace(E, a, gate), y, reduction="sum")


# --- gradients

def rel_err(a, b):
    return float((a - b).norm() / max(b.norm(), 1e-300))


@pytest.mark.parametrize("variant", ["general", "log_mixture"])
def test_reference_gradient_matches_autograd_and_finite_differences(variant):
    fn = responsibility_loss_general if variant == "general" else responsibility_loss
    g = torch.Generator().manual_seed(11)
    for n in range(20):
        K = 1 + n % 3
        h, w = 1 + n % 3, 3 - n % 3 if n % 3 else 3
        E, a, gate, y = random_instance(g, K, h, w)
        E.requires_grad_(True)
        loss = fn(make_trace(E, a, gate), y)
        (auto,) = torch.autograd.grad(loss, E)
        ref = responsibility_grad_reference(make_trace(E.detach(), a, gate), y, variant)
        assert rel_err(auto, ref) < 1e-4
        fd = torch.zeros_like(ref)
        eps = 1e-4
        flat = E.detach().clone().reshape(-1)
        for k in range(flat.numel()):
            for sgn in (1, -1):
                p = flat.clone()
                p[k] += sgn * eps
                fd.view(-1)[k] += sgn * fn(make_trace(p.view_as(E), a, gate), y).item() / (2 * eps)
        assert rel_err(ref, fd) < 1e-4


def test_reference_gradient_examples():
    E = torch.randn(1, 2, 2, 2, 2, dtype=D64)
    a = torch.softmax(torch.randn_like(E), dim=1)
    gate = torch.full((1, 2, 2, 2), 0.7, dtype=D64)
    tr = make_trace(E, a, gate)
    y = tr.per_expert_H[:, 0].clone()
    g = responsibility_grad_reference(tr, y, "general")
    assert torch.all(g[:, 0] == 0)
    Es = torch.full_like(E, 40.0)
    gs = responsibility_grad_reference(make_trace(Es, a, gate), torch.zeros(1, 2, 2, 2, dtype=D64), "general")
    assert gs.abs().max() < 1e-12


# --- inter-discrepancy

def test_build_V_examples():
    E = torch.randn(2, 1, 2, 3, 3, dtype=D64)
    tr = combine(E, torch.randn_like(E), None)
    V, order, zero = build_V(tr, 1)
    assert V.shape == (2, 18, 1)
    torch.testing.assert_close(V.norm(dim=1).squeeze(-1), torch.ones(2, dtype=D64))
    same = torch.randn(1, 1, 2, 3, 3, dtype=D64).expand(1, 2, 2, 3, 3).clone()
    V, _, _ = build_V(combine(same, None, None), 2)
    assert abs(gram_det(V).item()) < 1e-12
    cos = torch.nn.functional.cosine_similarity(V[0, :, 0], V[0, :, 1], dim=0)
    assert cos.item() == pytest.approx(1.0, abs=1e-12)


def test_build_V_gram_by_hand():
    g = torch.Generator().manual_seed(5)
    E = torch.randn(1, 3, 2, 2, 3, generator=g, dtype=D64)
    tr = combine(E, torch.randn(1, 3, 2, 2, 3, generator=g, dtype=D64), None)
    V, order, _ = build_V(tr, 3)
    a = tr.attention[0].reshape(3, -1).numpy()
    e = tr.gated[0].reshape(3, -1).numpy()
    gbar = a.mean(axis=1)
    rank = np.argsort(-gbar, kind="stable")
    assert order[0].tolist() == rank.tolist()
    u = e / np.linalg.norm(e, axis=1, keepdims=True)
    want = np.array([[gbar[i] * gbar[j] * u[i] @ u[j] for j in rank] for i in rank])
    np.testing.assert_allclose((V[0].T @ V[0]).numpy(), want, atol=1e-12)


def test_build_V_zero_column_flagged():
    E = torch.randn(1, 2, 2, 2, 2, dtype=D64)
    E[:, 1] = 0
    V, order, zero = build_V(combine(E, None, None), 2)
    col = (order[0] == 1).nonzero().item()
    assert zero[0, col] and torch.all(V[0, :, col] == 0)
    with pytest.raises(ConfigError):
        build_V(combine(E, None, None), 3)


def test_determinant_identities():
    Q, _ = torch.linalg.qr(torch.randn(10, 4, dtype=D64))
    assert inter_discrepancy_loss(Q).item() == pytest.approx(-1.0, abs=1e-12)
    dup = torch.cat([Q[:, :2], Q[:, :1]], dim=1)
    assert inter_discrepancy_loss(dup).item() == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(100):
        g1, g2 = rng.uniform(0, 1, size=2)
        th = rng.uniform(0, math.pi)
        V = torch.tensor([[g1, g2 * math.cos(th)], [0.0, g2 * math.sin(th)], [0.0, 0.0]], dtype=D64)
        assert abs(inter_discrepancy_loss(V).item() + (g1 * g2 * math.sin(th)) ** 2) < 1e-9


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_determinant_permutation_and_scaling(seed, n):
    g = torch.Generator().manual_seed(seed)
    V = torch.randn(12, n, generator=g, dtype=D64)
    perm = torch.randperm(n, generator=g)
    d = gram_det(V)
    assert gram_det(V[:, perm]).item() == pytest.approx(d.item(), rel=1e-9, abs=1e-12)
    c = 0.5 + torch.rand(1, generator=g, dtype=D64).item() * 2
    W = V.clone()
    W[:, 0] *= c
    assert gram_det(W).item() == pytest.approx(c * c * d.item(), rel=1e-9, abs=1e-12)


def test_zero_iff_dependent():
    V = torch.randn(6, 3, dtype=D64)
    assert gram_det(V).item() > 1e-6
    V[:, 2] = 0.3 * V[:, 0] - 2 * V[:, 1]
    assert abs(gram_det(V).item()) < 1e-10


def test_log_form_beyond_six_columns():
    Q, _ = torch.linalg.qr(torch.randn(30, 9, dtype=D64))
    V = Q * 0.01
    assert gram_det(V).item() == pytest.approx(1e-36, rel=1e-9)


# --- total

def test_total_loss_examples():
    g = torch.Generator().manual_seed(2)
    E, a, gate, y = random_instance(g, 2, 2, 2)
    tr = make_trace(E, a, gate)
    parts = total_loss(tr, y, LossConfig(0.0, 0.0))
    assert parts.total.item() == pytest.approx(((tr.prediction - y) ** 2).mean().item(), rel=1e-12)
    with pytest.raises(ConfigError):
        LossConfig(0.5, 0.5)
    with pytest.raises(ConfigError):
        LossConfig(0.2, -0.1)


def test_total_loss_perfect_prediction_unit_attention():
    # K=1: attention is 1 everywhere, so the single column has unit length
    lam = 0.1
    E = torch.randn(2, 1, 2, 2, 2, dtype=D64)
    tr = combine(E, None, torch.randn(2, 2, 2, 2, dtype=D64))
    parts = total_loss(tr, tr.prediction.detach().clone(), LossConfig(0.0, lam))
    assert parts.mse.item() == 0
    assert parts.total.item() == pytest.approx(-lam, abs=1e-12)
