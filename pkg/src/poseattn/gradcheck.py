"""Central-difference gradient checks on tiny double-precision instances."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import nn

from poseattn.discriminators import AppearanceDiscriminator, PoseDiscriminator, gan_loss_appearance, gan_loss_pose
from poseattn.losses import LossWeights, Margins, id_loss, quartet_loss, recon_l1, semantic_consistency, total_loss
from poseattn.models import PoseTransferGenerator
from poseattn.paan import PAAN, PAANBlock
from poseattn.pagn import PAGNBlock, PagnState, adain
from poseattn.reid import EmbeddingHead, IdentityClassifier

DEFAULT_EPS = 1e-5
TOLERANCE = 1e-4
MAX_ENTRIES = 24  # probed entries per tensor
SCALE_FLOOR = 1e-6  # tensors with (near) zero true gradient, e.g. biases ahead of a normalization
GLOBAL_FLOOR = 1e-5  # relative to the largest gradient entry across all checked tensors
MAX_ATTEMPTS = 50


class NearKink(Exception):
    """A finite-difference step crossed a rectifier kink, so the instance is resampled."""


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = SCALE_FLOOR) -> float:
    """max |a - n| over max(|a|, |n|), with ``floor`` guarding tensors whose true gradient is ~0."""
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), floor)
    return float((analytic - numeric).abs().max()) / scale


class _SignRecorder:
    """Records which rectifier inputs were positive during the latest forward pass."""

    def __init__(self, module: nn.Module | None):
        self.signs: list[torch.Tensor] = []
        self.handles = []
        if module is not None:
            for m in module.modules():
                if isinstance(m, (nn.ReLU, nn.LeakyReLU)):
                    self.handles.append(m.register_forward_hook(self._hook))

    def _hook(self, _, inp, __):
        self.signs.append(inp[0].detach() > 0)

    def reset(self):
        self.signs = []

    def close(self):
        for h in self.handles:
            h.remove()


def check_function(fn: Callable[[], torch.Tensor], tensors: list[torch.Tensor], eps: float = DEFAULT_EPS,
                   rng: np.random.Generator | None = None, max_entries: int = MAX_ENTRIES,
                   pattern: Callable[[], list] | None = None) -> float:
    """Largest per-tensor relative error between autograd and central differences of scalar ``fn()``.

    ``pattern`` returns the rectifier sign pattern of the latest ``fn()`` call;
    when the two sides of a difference disagree the step straddles a kink and
    ``NearKink`` is raised.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad for t in tensors if t.grad is not None]
    floor = max([SCALE_FLOOR] + [GLOBAL_FLOOR * float(g.abs().max()) for g in grads])
    worst = 0.0
    for t in tensors:
        grad = t.grad.detach().reshape(-1) if t.grad is not None else torch.zeros(t.numel(), dtype=t.dtype)
        n = t.numel()
        idx = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        flat = t.data.view(-1)
        numeric = torch.empty(len(idx), dtype=t.dtype)
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(fn())
                up_pattern = pattern() if pattern else None
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                if pattern and any(not torch.equal(a, b) for a, b in zip(up_pattern, pattern())):
                    raise NearKink
                numeric[k] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(grad[torch.as_tensor(idx)], numeric, floor))
    return worst


def check_module(module: nn.Module, inputs: list[torch.Tensor], forward: Callable, eps: float = DEFAULT_EPS,
                 seed: int = 0) -> float:
    """Check a scalar random projection of ``forward(*inputs)`` w.r.t. inputs and parameters."""
    gen = torch.Generator().manual_seed(seed + 1)
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    probe = {}

    recorder = _SignRecorder(module)

    def scalar():
        recorder.reset()
        out = forward(*inputs)
        outs = out if isinstance(out, (tuple, list)) else (out,)
        total = 0.0
        for j, o in enumerate(outs):
            if j not in probe:
                probe[j] = torch.randn(o.shape, generator=gen, dtype=o.dtype)
            total = total + (o * probe[j]).sum()
        return total

    params = [p for p in module.parameters() if p.requires_grad] if module is not None else []
    try:
        return check_function(scalar, inputs + params, eps, np.random.default_rng(seed),
                              pattern=(lambda: recorder.signs) if recorder.handles else None)
    finally:
        recorder.close()


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _double(module: nn.Module, train: bool = True) -> nn.Module:
    module = module.double()
    module.train(train)
    return module


# --------------------------------------------------------------------------- components
# Tiny instances: 4 channels at 8x8 for the feature blocks, 16x16 for the discriminators.


def _paan_block(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    block = _double(PAANBlock(4))
    return check_module(block, [_rand(gen, 2, 4, 8, 8), _rand(gen, 2, 4, 8, 8)],
                        lambda fi, fp: block(fi, fp), eps, seed)


def _paan(depth):
    def run(eps, seed):
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        net = _double(PAAN(4, depth))
        return check_module(net, [_rand(gen, 2, 4, 8, 8), _rand(gen, 2, 4, 8, 8)],
                            lambda fi, fp: net(fi, fp)[:2], eps, seed)
    return run


def _pagn_block(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    block = _double(PAGNBlock(4))
    xs = [_rand(gen, 2, 4, 8, 8) for _ in range(4)]

    def fwd(f_g, i_g, p_t, f_app):
        s = block(PagnState(f_g, i_g, []), p_t, f_app)
        return s.f_g, s.i_g
    return check_module(block, xs, fwd, eps, seed)


def _adain(eps, seed):
    gen = torch.Generator().manual_seed(seed)
    return check_module(None, [_rand(gen, 2, 4, 8, 8), _rand(gen, 2, 4, 8, 8)], adain, eps, seed)


def _generator(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = _double(PoseTransferGenerator(4, 2))
    xs = [_rand(gen, 2, 3, 8, 8), torch.rand(2, 18, 8, 8, generator=gen, dtype=torch.float64),
          torch.rand(2, 18, 8, 8, generator=gen, dtype=torch.float64)]
    return check_module(net, xs, lambda a, b, c: net(a, b, c).image, eps, seed)


_DISC_WIDTHS = (4, 8, 8, 8)


def _d_appearance(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    d = _double(AppearanceDiscriminator(_DISC_WIDTHS))
    return check_module(d, [_rand(gen, 3, 3, 16, 16), _rand(gen, 3, 3, 16, 16)], d, eps, seed)


def _d_pose(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    d = _double(PoseDiscriminator(_DISC_WIDTHS))
    pose = torch.rand(3, 18, 16, 16, generator=gen, dtype=torch.float64)
    return check_module(d, [pose, _rand(gen, 3, 3, 16, 16)], d, eps, seed)


def _gan_appearance(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    d = _double(AppearanceDiscriminator(_DISC_WIDTHS))
    xs = [_rand(gen, 3, 3, 16, 16) for _ in range(3)]
    return check_module(d, xs, lambda c, r, f: gan_loss_appearance(d, c, r, f), eps, seed)


def _gan_pose(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    d = _double(PoseDiscriminator(_DISC_WIDTHS))
    xs = [torch.rand(3, 18, 16, 16, generator=gen, dtype=torch.float64), _rand(gen, 3, 3, 16, 16), _rand(gen, 3, 3, 16, 16)]
    return check_module(d, xs, lambda p, r, f: gan_loss_pose(d, p, r, f), eps, seed)


def _recon_l1(eps, seed):
    gen = torch.Generator().manual_seed(seed)
    return check_module(None, [_rand(gen, 2, 3, 8, 8), _rand(gen, 2, 3, 8, 8)], recon_l1, eps, seed)


def _semantic(eps, seed):
    gen = torch.Generator().manual_seed(seed)
    return check_module(None, [_rand(gen, 4, 16), _rand(gen, 4, 16)], semantic_consistency, eps, seed)


def quartet_point(seed: int = 0, batch: int = 4, dim: int = 8):
    """Embeddings where both max terms of the printed form sit strictly above their margins."""
    gen = torch.Generator().manual_seed(seed)
    a = _rand(gen, batch, dim)
    p = a + 2.0 * _rand(gen, batch, dim)  # d(a,p) large
    n1 = a + 0.1 * _rand(gen, batch, dim)
    n2 = n1 + 0.1 * _rand(gen, batch, dim)
    return a, p, n1, n2


def _quartet(eps, seed):
    return check_module(None, list(quartet_point(seed)), lambda a, p, n1, n2: quartet_loss(a, p, n1, n2, Margins()),
                        eps, seed)


def _id_loss(eps, seed):
    gen = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, 5, (4,), generator=gen)
    return check_module(None, [_rand(gen, 4, 5)], lambda z: id_loss(z, labels), eps, seed)


def _total_loss(eps, seed):
    gen = torch.Generator().manual_seed(seed)
    names = ("L_gan_I", "L_gan_P", "L_R", "L_S", "L_quartet", "L_id")
    xs = [_rand(gen, ()) for _ in names]
    return check_module(None, xs, lambda *v: total_loss(dict(zip(names, v)), LossWeights()), eps, seed)


def _embed(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    head = _double(EmbeddingHead(16, 8))
    return check_module(head, [_rand(gen, 4, 16)], head, eps, seed)


def _classify(eps, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    head = _double(IdentityClassifier(5, 16, hidden=8))
    head.hidden[2].p = 0.0  # dropout would make the function stochastic; batch statistics stay active
    return check_module(head, [_rand(gen, 6, 16)], head, eps, seed)


COMPONENTS: dict[str, Callable[[float, int], float]] = {
    "paan_block": _paan_block,
    "pagn_block": _pagn_block,
    "adain": _adain,
    "d_appearance": _d_appearance,
    "d_pose": _d_pose,
    "gan_loss_appearance": _gan_appearance,
    "gan_loss_pose": _gan_pose,
    "recon_l1": _recon_l1,
    "semantic_consistency": _semantic,
    "quartet_loss": _quartet,
    "id_loss": _id_loss,
    "total_loss": _total_loss,
    "embed": _embed,
    "classify": _classify,
    "paan_depth2": _paan(2),
    "paan_depth4": _paan(4),
    "generator": _generator,
}


def grad_check(component: str, eps: float = DEFAULT_EPS, seed: int = 0) -> float:
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)} or all")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    for attempt in range(MAX_ATTEMPTS):
        try:
            return COMPONENTS[component](eps, seed * MAX_ATTEMPTS + attempt)
        except NearKink:
            continue
    raise RuntimeError(f"{component}: no kink-free instance in {MAX_ATTEMPTS} draws")


def grad_check_all(eps: float = DEFAULT_EPS, seed: int = 0) -> dict[str, float]:
    return {name: grad_check(name, eps, seed) for name in COMPONENTS}
