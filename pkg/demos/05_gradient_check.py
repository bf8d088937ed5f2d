"""
Checking the gradients
======================

Autograd is compared against central differences, first for the
responsibility loss against its closed-form gradient, then for the
complete training loss with respect to every weight of a small model.
"""
import torch

from stmoe.experiments import preset_dataset
from stmoe.losses import LossConfig, responsibility_grad_reference, responsibility_loss
from stmoe.model import ForwardTrace, ModelConfig, build_model
from stmoe.training import finite_diff_check, params_loss_fn

g = torch.Generator().manual_seed(0)
E = torch.randn(2, 3, 2, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
a = torch.softmax(torch.randn(E.shape, generator=g, dtype=torch.float64), dim=1)
y = torch.rand(2, 2, 3, 3, generator=g, dtype=torch.float64) * 2 - 1
# attention and temporal gate held fixed, experts free
gate = torch.sigmoid(torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64))
tr = ForwardTrace(torch.tanh((a * E).sum(1)) * gate, E, torch.ones_like(E), a, torch.log(a), a * E, gate,
                  gate.unsqueeze(1) * torch.tanh(E))
(auto,) = torch.autograd.grad(responsibility_loss(tr, y), E)
ref = responsibility_grad_reference(tr, y).detach()
print("closed form vs autograd, relative gap %.1e" % float((auto - ref).norm() / ref.norm()))

# now the whole loss through a real (small) model on real samples
_, ds = preset_dataset("tiny8")
net = build_model(ModelConfig(K=3, hidden=4, depth=2, norm=False), (8, 8), ds.cfg.n_frames,
                  ds.train.E.shape[1], seed=0)
f, theta = params_loss_fn(net, ds.train.X[:2], ds.train.E[:2], ds.train.Y[:2], LossConfig())
# too large a step crosses ReLU kinks, too small a step drowns in roundoff
for eps in (1e-4, 1e-5, 1e-6):
    gap = finite_diff_check(f, theta, eps=eps, threshold=1e-6)
    print(f"{theta.numel()} parameters, eps {eps:.0e}: worst relative gap {gap:.1e}")
