"""Perturbation generators.

Per-instance: FGSM, R-FGSM, PGD (l-infinity) and multiclass l2 DeepFool.
Universal: the iterative DeepFool accumulation solver (``ideepfool_universal``)
and minibatch stochastic gradient ascent on the clipped loss
(``universal_attack``).

All perturbed images are clamped to the model's pixel domain before the
forward pass unless a config turns ``clamp_inputs`` off.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import BatchPlan, Dataset, batches, epoch_order

TINY = 1e-9


@dataclass(frozen=True)
class NormBall:
    p: object = "inf"  # "inf" or 2
    eps: float = 10 / 255

    def __post_init__(self):
        if self.p in (np.inf, math.inf, "inf", "linf"):
            object.__setattr__(self, "p", "inf")
        elif self.p in (2, "2", "l2"):
            object.__setattr__(self, "p", 2)
        else:
            raise ValueError(f"unsupported norm p={self.p!r}; use 'inf' or 2")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    def norm(self, delta):
        d = np.asarray(delta, dtype=np.float64).ravel()
        if d.size == 0:
            return 0.0
        return float(np.abs(d).max()) if self.p == "inf" else float(np.sqrt(d @ d))

    def contains(self, delta, tol=TINY):
        return self.norm(delta) <= self.eps + tol


def project(delta, ball: NormBall):
    """Euclidean projection onto the l-infinity ball; radial rescale for l2."""
    delta = np.asarray(delta)
    if ball.p == "inf":
        return np.clip(delta, -ball.eps, ball.eps).astype(delta.dtype, copy=False)
    n = ball.norm(delta)
    if n > ball.eps:
        return (delta * (ball.eps / n)).astype(delta.dtype, copy=False)
    return delta.copy()


def _clamp(model, x, on=True):
    return model.clamp(x) if on else x


def _input_grad(model, x, labels, beta=math.inf):
    return nn.value_and_grad(model, x, labels, beta, need_params=False, need_input=True)


# ---------------------------------------------------------------------------
# per-instance attacks
# ---------------------------------------------------------------------------


def fgsm(model, x, labels, eps):
    """x + eps*sign(grad), clamped to the pixel domain."""
    if eps == 0:
        return np.array(x, dtype=model.dtype, copy=True)
    g = _input_grad(model, x, labels).grad_input
    return model.clamp(x + model.dtype.type(eps) * np.sign(g))


def rfgsm(model, x, labels, eps, alpha, rng=None):
    """Random sign step of size alpha, then an FGSM step of size eps - alpha."""
    if eps == 0 and alpha == 0:
        return np.array(x, dtype=model.dtype, copy=True)
    if alpha < 0 or alpha >= eps:
        raise ValueError(f"R-FGSM needs 0 <= alpha < eps (alpha={alpha}, eps={eps})")
    rng = np.random.default_rng(rng)
    dt = model.dtype.type
    x1 = model.clamp(x + dt(alpha) * np.sign(rng.standard_normal(np.shape(x))).astype(model.dtype))
    g = _input_grad(model, x1, labels).grad_input
    return model.clamp(x1 + dt(eps - alpha) * np.sign(g))


def pgd(model, x, labels, eps, steps, step_size, random_start=True, rng=None):
    """Iterated sign-gradient ascent, projected to the eps-box around x and the pixel domain."""
    if steps < 1:
        raise ValueError("pgd needs steps >= 1")
    dt = model.dtype.type
    x = np.asarray(x, dtype=model.dtype)
    lo, hi = x - dt(eps), x + dt(eps)
    if random_start and eps > 0:
        rng = np.random.default_rng(rng)
        x_adv = model.clamp(x + rng.uniform(-eps, eps, x.shape).astype(model.dtype))
    else:
        x_adv = x.copy()
    for _ in range(steps):
        g = _input_grad(model, x_adv, labels).grad_input
        x_adv = model.clamp(np.clip(x_adv + dt(step_size) * np.sign(g), lo, hi))
    return x_adv


@dataclass
class DeepFoolResult:
    r: np.ndarray
    fooled: bool
    iterations: int
    label: int  # original label
    adv_label: int


def deepfool(model, x, max_iter=50, overshoot=0.02, clamp=False, boundary_eps=1e-4, label=None):
    """Multiclass l2 DeepFool on a single example ``x`` of shape input_shape.

    Each iteration linearizes the logit differences f_k - f_k0 around the
    current point and steps onto the nearest linearized boundary (plus
    ``boundary_eps`` in norm). The accumulated step is scaled by
    ``1 + overshoot``. A result with ``fooled=False`` is the last iterate
    after ``max_iter`` iterations.
    """
    x = np.asarray(x, dtype=model.dtype)
    x64 = x.astype(np.float64)
    k0 = None if label is None else int(label)
    r_tot = np.zeros_like(x64)
    scale = 1.0 + overshoot
    for it in range(max_iter + 1):
        point = _clamp(model, (x64 + scale * r_tot).astype(model.dtype), clamp)
        logits, jac = nn.logit_jacobian(model, point)
        k = int(np.argmax(logits))
        if k0 is None:
            k0 = k
        if k != k0:
            return DeepFoolResult((scale * r_tot).astype(model.dtype), True, it, k0, k)
        if it == max_iter:
            break
        logits = logits.astype(np.float64)
        jac = jac.reshape(len(logits), -1).astype(np.float64)
        w = jac - jac[k0]
        f = logits - logits[k0]
        norms = np.sqrt((w * w).sum(axis=1))
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f) / norms
        dist[k0] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        lbest = int(np.argmin(dist))
        if not np.isfinite(dist[lbest]):
            break
        step = (dist[lbest] + boundary_eps) * w[lbest] / norms[lbest]
        r_tot += step.reshape(x.shape)
    return DeepFoolResult((scale * r_tot).astype(model.dtype), False, it, k0, k0)


# ---------------------------------------------------------------------------
# universal perturbations
# ---------------------------------------------------------------------------


@dataclass
class PerturbationState:
    delta: np.ndarray
    ball: NormBall
    opt: nn.OptimizerState | None = None
    trace: list = field(default_factory=list)
    wall_clock_s: float = 0.0


@dataclass
class UniversalAttackConfig:
    ball: NormBall = field(default_factory=lambda: NormBall("inf", 76.5 / 255))
    rule: str = "sign"
    lr: float = 1 / 255
    beta: float = 9.0
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    clamp_inputs: bool = True
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.rule not in nn.RULES:
            raise ValueError(f"unknown rule {self.rule!r}")


@dataclass
class IDeepFoolConfig:
    ball: NormBall = field(default_factory=lambda: NormBall("inf", 76.5 / 255))
    xi: float = 0.2
    max_outer_passes: int = 10
    deepfool_max_iter: int = 50
    overshoot: float = 0.02
    seed: int = 0
    shuffle: bool = True
    clamp_inputs: bool = True

    def __post_init__(self):
        if not 0 < self.xi < 1:
            raise ValueError("xi must lie in (0, 1)")


def perturbed_predictions(model, images, delta, clamp_inputs=True, chunk=1000):
    out = []
    for i in range(0, len(images), chunk):
        x = images[i : i + chunk]
        if delta is not None:
            x = _clamp(model, x + delta, clamp_inputs)
        out.append(nn.forward(model, x).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def fooling_ratio(model, ds: Dataset, delta, clamp_inputs=True, clean_pred=None):
    """Fraction of examples whose predicted label changes when delta is added."""
    if len(ds) == 0:
        return 0.0
    if clean_pred is None:
        clean_pred = perturbed_predictions(model, ds.images, None)
    adv = perturbed_predictions(model, ds.images, delta, clamp_inputs)
    return float(np.mean(adv != clean_pred))


def delta_gradient(model, x, labels, delta, beta=math.inf, clamp_inputs=True):
    """Gradient of the clipped mean loss w.r.t. a delta shared by the batch.

    Returns the ``nn.Gradients`` of the pass at clamp(x + delta) and the delta
    gradient (sum over the batch of input gradients of the mean loss, with the
    clamp's zero derivative outside the pixel domain).
    """
    z = x + delta
    zc = _clamp(model, z, clamp_inputs)
    g = nn.value_and_grad(model, zc, labels, beta, need_params=False, need_input=True)
    gi = g.grad_input
    if clamp_inputs:
        lo, hi = model.pixel_domain
        gi = gi * ((z >= lo) & (z <= hi))
    return g, gi.sum(axis=0)


def universal_attack(model, ds: Dataset, cfg: UniversalAttackConfig) -> PerturbationState:
    """Minibatch stochastic gradient ascent on the clipped loss, projected after each step.

    ``trace`` holds one record per iteration with the minibatch accuracy at the
    delta used for that iteration's gradient.
    """
    t0 = time.perf_counter()
    delta = np.zeros(model.input_shape, dtype=model.dtype)
    opt = nn.OptimizerState(cfg.rule, cfg.lr, delta.shape, cfg.momentum, model.dtype)
    state = PerturbationState(delta, cfg.ball, opt)
    plan = BatchPlan(cfg.batch_size, cfg.seed, True, cfg.epochs)
    for it, (x, y) in enumerate(batches(ds, plan)):
        g, gd = delta_gradient(model, x, y, state.delta, cfg.beta, cfg.clamp_inputs)
        acc = float(np.mean(g.logits.argmax(axis=1) == y))
        state.delta = project(nn.apply_update(state.delta, gd, opt, ascent=True), cfg.ball)
        state.trace.append({"iteration": it, "batch_accuracy": acc, "loss": g.mean_loss})
    state.wall_clock_s = time.perf_counter() - t0
    return state


def ideepfool_universal(model, ds: Dataset, cfg: IDeepFoolConfig) -> PerturbationState:
    """Accumulate per-example DeepFool steps into one projected universal delta.

    Passes over the data continue while the fooling ratio on ``ds`` is below
    ``1 - xi`` and fewer than ``max_outer_passes`` passes were made; the ratio
    is recomputed between passes. The DeepFool step is added even when
    DeepFool ran out of iterations without a label change.
    """
    t0 = time.perf_counter()
    delta = np.zeros(model.input_shape, dtype=model.dtype)
    state = PerturbationState(delta, cfg.ball)
    clean = perturbed_predictions(model, ds.images, None)
    ratio = 0.0
    passes = 0
    while ratio < 1 - cfg.xi and passes < cfg.max_outer_passes:
        order = epoch_order(len(ds), cfg.seed, passes, cfg.shuffle)
        n_df = 0
        for i in order:
            xi = ds.images[i]
            z = _clamp(model, xi + state.delta, cfg.clamp_inputs)
            if int(nn.forward(model, z[None]).argmax()) != clean[i]:
                continue
            res = deepfool(
                model, z, cfg.deepfool_max_iter, cfg.overshoot,
                clamp=cfg.clamp_inputs, label=clean[i],
            )
            n_df += 1
            state.delta = project(state.delta + res.r, cfg.ball)
        passes += 1
        ratio = fooling_ratio(model, ds, state.delta, cfg.clamp_inputs, clean)
        state.trace.append({"pass": passes, "fooling_ratio": ratio, "deepfool_calls": n_df})
    state.wall_clock_s = time.perf_counter() - t0
    return state
