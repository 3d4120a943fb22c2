"""Finite-difference checks of every hand-written differentiable path.

Each ``check_*`` function returns a :class:`CheckResult`; :func:`run_all` runs them
in order and is what ``vlcl gradcheck`` executes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
import torch

from .autoview import AugmentConfig, ViewConfig, ViewModule, affine_grid, bilinear_sample
from .contrast import ContrastConfig
from .datasets import Dataset, sample_episode
from .encoder import EncoderConfig, Encoder, l2_normalize
from .trainer import Trainer, TrainConfig

D = torch.float64


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    seconds: float

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: rel. error {self.error:.2e} (tol {self.tolerance:g}, {self.seconds:.1f}s)"


def batched_central_difference(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                               step: float) -> torch.Tensor:
    """Like :func:`central_difference` for ``f`` returning one value per leading index of
    ``x`` that depends only on that slice; all slices are perturbed together."""
    x = x.detach().clone()
    b = x.shape[0]
    flat = x.view(b, -1)
    grad = torch.zeros_like(flat)
    for i in range(flat.shape[1]):
        orig = flat[:, i].clone()
        flat[:, i] = orig + step
        hi = f(x).detach()
        flat[:, i] = orig - step
        lo = f(x).detach()
        flat[:, i] = orig
        grad[:, i] = (hi - lo) / (2 * step)
    return grad.view_as(x)


def central_difference(f: Callable[[torch.Tensor], float], x: torch.Tensor, step: float) -> torch.Tensor:
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(f(x))
        flat[i] = orig - step
        lo = float(f(x))
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad.view_as(x)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(float(numeric.norm()), float(analytic.norm()), 1e-12)
    return float((analytic - numeric).norm()) / denom


def _timed(name, tol, fn) -> CheckResult:
    start = time.perf_counter()
    err = fn()
    return CheckResult(name, err <= tol, err, tol, time.perf_counter() - start)


def off_knot_grid(gen: torch.Generator, shape: Tuple[int, int, int], size: int, margin: float = 0.05,
                  spread: float = 1.15) -> torch.Tensor:
    """Random normalised coordinates whose pixel positions stay ``margin`` away from integers."""
    g = (torch.rand(*shape, 2, generator=gen, dtype=D) * 2 - 1) * spread
    px = (g + 1) * 0.5 * (size - 1)
    frac = px - torch.floor(px)
    frac = margin + frac * (1 - 2 * margin)
    px = torch.floor(px) + frac
    return px / (0.5 * (size - 1)) - 1


def check_bilinear(n_images: int = 20, size: int = 8, step: float = 1e-3, tol: float = 1e-3,
                   seed: int = 0) -> List[CheckResult]:
    """Sampler gradients w.r.t. grid coordinates and image values on random images."""
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand(n_images, 3, size, size, generator=gen, dtype=D)
    grid = off_knot_grid(gen, (n_images, 5, 5), size)
    weights = torch.randn(n_images, 3, 5, 5, generator=gen, dtype=D)

    def per_image(img, g):
        return (bilinear_sample(img, g) * weights).sum(dim=(1, 2, 3))

    def grid_error():
        g = grid.clone().requires_grad_()
        analytic, = torch.autograd.grad(per_image(images, g).sum(), g)
        numeric = batched_central_difference(lambda gg: per_image(images, gg), grid, step)
        return relative_error(analytic, numeric)

    def image_error():
        img = images.clone().requires_grad_()
        analytic, = torch.autograd.grad(per_image(img, grid).sum(), img)
        numeric = batched_central_difference(lambda ii: per_image(ii, grid), images, step)
        return relative_error(analytic, numeric)

    return [_timed("bilinear_sample d/dgrid", tol, grid_error),
            _timed("bilinear_sample d/dimage", tol, image_error)]


def tiny_encoder_config(**kw) -> EncoderConfig:
    base = dict(conv_channels=(4,), feature_dim=8, proj_dim=8, proj_hidden=8, image_size=8,
                activation="softplus", pool="avg", norm_groups=2)
    base.update(kw)
    return EncoderConfig(**base)


def tiny_view_config(**kw) -> ViewConfig:
    base = dict(conv_channels=(1,), image_size=8, activation="tanh", pool="avg", norm_groups=1)
    base.update(kw)
    return ViewConfig(**base)


def _flat(params):
    names = list(params)
    return names, torch.cat([params[n].reshape(-1) for n in names])


def _unflat(names, like, vec):
    out, i = {}, 0
    for n in names:
        k = like[n].numel()
        out[n] = vec[i:i + k].view_as(like[n])
        i += k
    return out


def check_encoder(step: float = 1e-3, tol: float = 1e-3, seed: int = 0) -> List[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    enc = Encoder(tiny_encoder_config())
    params = enc.init_params(gen, D)
    names, vec = _flat(params)
    images = torch.rand(3, 3, 8, 8, generator=gen, dtype=D)
    w = torch.randn(3, 8, generator=gen, dtype=D)

    def enc_loss(v):
        return enc.encode(_unflat(names, params, v), images).sum()

    def proj_loss(v):
        return (enc.embed(_unflat(names, params, v), images) * w).sum()

    def make(fn):
        def run():
            v = vec.clone().requires_grad_()
            analytic, = torch.autograd.grad(fn(v), v)
            return relative_error(analytic, central_difference(fn, vec, step))
        return run

    return [_timed("encode d/dparams", tol, make(enc_loss)),
            _timed("project d/dparams", tol, make(proj_loss))]


def random_view_params(vm: ViewModule, gen: torch.Generator, head_std: float = 0.3):
    """Localisation params with a non-zero head, so every weight receives gradient."""
    params = vm.init_params(gen, D)
    params["head.weight"] = torch.randn(params["head.weight"].shape, generator=gen, dtype=D) * head_std
    params["head.bias"] = params["head.bias"] + torch.randn(4, generator=gen, dtype=D) * 0.5
    return params


def check_views(step: float = 1e-3, seed: int = 0) -> List[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    vm = ViewModule(tiny_view_config())
    params = random_view_params(vm, gen)
    names, vec = _flat(params)
    images = torch.rand(4, 3, 8, 8, generator=gen, dtype=D)

    def localise_loss(v):
        return vm.localise(_unflat(names, params, v), images).mean()

    def view_loss(v):
        return (vm(_unflat(names, params, v), images) ** 2).sum()

    def make(fn):
        def run():
            v = vec.clone().requires_grad_()
            analytic, = torch.autograd.grad(fn(v), v)
            return relative_error(analytic, central_difference(fn, vec, step))
        return run

    return [_timed("localise d/dgamma", 1e-3, make(localise_loss)),
            _timed("view ||.||^2 d/dgamma", 1e-2, make(view_loss))]


def tiny_pipeline(seed: int, beta: float = 2.0, lr: float = 0.5):
    """A float64 trainer on random 8x8 images with one fixed 3-way episode.

    Plain SGD (no momentum, decay or clipping), augmentation disabled, a pre-filled
    queue and randomised localisation heads.
    """
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    n_classes, per_class = 3, 3
    images = rng.uniform(size=(n_classes * per_class, 8, 8, 3))
    labels = np.repeat(np.arange(n_classes), per_class)
    data = Dataset(images, labels, tuple(f"c{i}" for i in range(n_classes)))
    train_cfg = TrainConfig(beta=beta, lr=lr, lr_milestones=(), lr_values=(), eta=0.0, epsilon=0.9,
                            momentum=0.0, nesterov=False, weight_decay=0.0, grad_clip=None,
                            n_way=3, k_shot=1, m_query_train=2, dtype="float64", seed=seed)
    trainer = Trainer(tiny_encoder_config(), tiny_view_config(), ContrastConfig(queue_capacity=16),
                      AugmentConfig.disabled(), train_cfg, data)
    trainer.state.gamma1 = random_view_params(trainer.view_module, gen)
    trainer.state.gamma2 = random_view_params(trainer.view_module, gen)
    trainer.state.queue.enqueue(l2_normalize(torch.randn(12, 8, generator=gen, dtype=D)))
    episode = sample_episode(data, 3, 1, 2, trainer.episode_rng)
    return trainer, [episode]


def two_stage_objective(trainer: Trainer, episodes, gamma1, gamma2) -> float:
    """Meta loss after one stage-one update, as a plain function of the view params."""
    rng_state = trainer.augment_rng.bit_generator.state
    inner = trainer.stage_one(episodes, gammas=(gamma1, gamma2), create_graph=False)
    trainer.augment_rng.bit_generator.state = rng_state
    with torch.no_grad():
        return float(trainer.meta_loss_at(inner.theta_value, episodes))


def second_order_error(seed: int, step: float = 1e-4) -> float:
    trainer, episodes = tiny_pipeline(seed)
    inner = trainer.clone().stage_one(episodes)
    _, g1, g2 = trainer.view_gradients(inner, episodes)
    names1, v1 = _flat(trainer.state.gamma1)
    names2, v2 = _flat(trainer.state.gamma2)
    n1 = v1.numel()
    analytic = torch.cat([_flat(g1)[1], _flat(g2)[1]])

    def f(v):
        return two_stage_objective(trainer, episodes, _unflat(names1, trainer.state.gamma1, v[:n1]),
                                   _unflat(names2, trainer.state.gamma2, v[n1:]))

    numeric = central_difference(f, torch.cat([v1, v2]), step)
    return relative_error(analytic, numeric)


def check_second_order(seeds=range(10), tol: float = 0.05) -> List[CheckResult]:
    return [_timed(f"two-stage d(meta after update)/dgamma, seed {s}", tol,
                   lambda s=s: second_order_error(s)) for s in seeds]


def run_all(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for group in (check_bilinear, check_encoder, check_views, check_second_order):
        for result in group():
            echo(str(result))
            ok &= result.passed
    return ok
