"""Training loops for natural and adversarial training, per-instance or universal.

Weights always use the momentum rule ``g <- mu*g - grad; w <- w + lr*g`` with
a piecewise-constant learning-rate schedule. The universal modes keep one
perturbation ``delta`` for the whole run.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks, nn
from .attacks import NormBall, PerturbationState
from .data import Dataset, step_batches

MODES = ("natural", "adv_fgsm", "adv_rfgsm", "adv_pgd", "universal_alt", "universal_sim")
DELTA_RULES = ("sign", "sgd", "adam")


@dataclass
class TrainConfig:
    total_steps: int = 6000
    batch_size: int = 128
    lr_schedule: list = field(default_factory=lambda: [(0, 0.05), (4000, 0.005)])
    momentum: float = 0.9
    seed: int = 0
    mode: str = "natural"
    delta_rule: str = "sign"
    delta_lr: float = 1 / 255
    ball: NormBall = field(default_factory=lambda: NormBall("inf", 76.5 / 255))
    pgd_steps: int = 7
    pgd_step_size: float | None = None  # default 2.5 * eps / pgd_steps
    rfgsm_alpha: float | None = None  # default eps / 2
    delta_init: str = "zero"  # or "uniform"
    # records accuracy at the updated delta on the current batch (one extra forward)
    track_ascent: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.delta_rule not in DELTA_RULES:
            raise ValueError(f"unknown delta rule {self.delta_rule!r}")
        self.lr_schedule = [(int(s), float(lr)) for s, lr in self.lr_schedule]
        steps = [s for s, _ in self.lr_schedule]
        if not steps or steps[0] != 0 or any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("lr_schedule steps must start at 0 and strictly increase")

    def lr_at(self, step):
        lr = self.lr_schedule[0][1]
        for s, value in self.lr_schedule:
            if s <= step:
                lr = value
        return lr


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    COLUMNS = ("step", "lr", "loss", "acc_before", "acc_after")

    def add(self, step, lr, loss, acc_before, acc_after):
        self.records.append(
            {"step": step, "lr": lr, "loss": loss, "acc_before": acc_before, "acc_after": acc_after}
        )

    def column(self, name):
        return np.array([r[name] for r in self.records], dtype=float)

    def ascent_gap(self):
        """Mean over steps of acc_before - acc_after (NaN when not tracked)."""
        if not self.records:
            return math.nan
        return float(np.mean(self.column("acc_before") - self.column("acc_after")))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _acc(logits, y):
    return float(np.mean(logits.argmax(axis=1) == y))


def _check_finite(g, step):
    if not math.isfinite(g.mean_loss):
        raise nn.NumericError(f"non-finite loss at step {step}")


def _setup(model, cfg):
    model = model.copy()
    states = nn.model_optimizer(model, cfg.lr_at(0), cfg.momentum)
    return model, states, TrainTrace()


def train_natural(model, ds: Dataset, cfg: TrainConfig, on_step=None):
    """Momentum SGD on clean minibatches. Returns (trained copy, trace)."""
    t0 = time.perf_counter()
    model, states, trace = _setup(model, cfg)
    for step, (x, y) in enumerate(step_batches(ds, cfg.batch_size, cfg.seed, cfg.total_steps)):
        lr = cfg.lr_at(step)
        g = nn.value_and_grad(model, x, y, need_input=False)
        _check_finite(g, step)
        nn.step_model(model, g.grad_params, states, lr)
        acc = _acc(g.logits, y)
        trace.add(step, lr, g.mean_loss, acc, acc)
        if on_step:
            on_step(step, model)
    trace.wall_clock_s = time.perf_counter() - t0
    return model, trace


def _instance_attack(model, x, y, cfg, rng):
    eps = cfg.ball.eps
    if cfg.mode == "adv_fgsm":
        return attacks.fgsm(model, x, y, eps)
    if cfg.mode == "adv_rfgsm":
        alpha = eps / 2 if cfg.rfgsm_alpha is None else cfg.rfgsm_alpha
        return attacks.rfgsm(model, x, y, eps, alpha, rng)
    step = 2.5 * eps / cfg.pgd_steps if cfg.pgd_step_size is None else cfg.pgd_step_size
    return attacks.pgd(model, x, y, eps, cfg.pgd_steps, step, random_start=True, rng=rng)


def train_adv_instance(model, ds: Dataset, cfg: TrainConfig, on_step=None):
    """Per-instance adversarial training: attack the batch, then one descent step on it.

    Both trace accuracy columns hold the accuracy on the adversarial batch.
    """
    if cfg.mode not in ("adv_fgsm", "adv_rfgsm", "adv_pgd"):
        raise ValueError(f"train_adv_instance does not handle mode {cfg.mode!r}")
    t0 = time.perf_counter()
    model, states, trace = _setup(model, cfg)
    # attack noise has its own stream so batch order matches natural training
    rng = np.random.default_rng([cfg.seed, 1])
    for step, (x, y) in enumerate(step_batches(ds, cfg.batch_size, cfg.seed, cfg.total_steps)):
        lr = cfg.lr_at(step)
        x_adv = _instance_attack(model, x, y, cfg, rng)
        g = nn.value_and_grad(model, x_adv, y, need_input=False)
        _check_finite(g, step)
        nn.step_model(model, g.grad_params, states, lr)
        acc = _acc(g.logits, y)
        trace.add(step, lr, g.mean_loss, acc, acc)
        if on_step:
            on_step(step, model)
    trace.wall_clock_s = time.perf_counter() - t0
    return model, trace


def _init_delta(model, cfg):
    if cfg.delta_init == "uniform" and cfg.ball.eps > 0:
        rng = np.random.default_rng([cfg.seed, 2])
        d = rng.uniform(-cfg.ball.eps, cfg.ball.eps, model.input_shape).astype(model.dtype)
        return attacks.project(d, cfg.ball)
    return np.zeros(model.input_shape, dtype=model.dtype)


def _delta_step(delta, gd, cfg, opt):
    """Ascent step on delta. The sign rule steps by exactly eps."""
    if cfg.delta_rule == "sign":
        new = delta + delta.dtype.type(cfg.ball.eps) * np.sign(gd)
    else:
        new = nn.apply_update(delta, gd, opt, ascent=True)
    return attacks.project(new, cfg.ball)


def _universal_setup(model, cfg, expected):
    if cfg.mode != expected:
        raise ValueError(f"expected mode {expected!r}, got {cfg.mode!r}")
    model, states, trace = _setup(model, cfg)
    delta = _init_delta(model, cfg)
    rule = "sgd" if cfg.delta_rule == "sign" else cfg.delta_rule
    opt = nn.OptimizerState(rule, cfg.delta_lr, delta.shape, 0.0, model.dtype)
    return model, states, trace, PerturbationState(delta, cfg.ball, opt)


def train_universal_alternating(model, ds: Dataset, cfg: TrainConfig, on_step=None):
    """Alternating min-max: weight step at (w, delta), then a fresh delta gradient at (w_new, delta).

    ``acc_before`` comes from the delta-gradient pass (new weights, old delta);
    ``acc_after`` is one extra forward at the updated delta when
    ``cfg.track_ascent`` is set, otherwise NaN.
    """
    t0 = time.perf_counter()
    model, states, trace, pert = _universal_setup(model, cfg, "universal_alt")
    clamp = model.clamp
    for step, (x, y) in enumerate(step_batches(ds, cfg.batch_size, cfg.seed, cfg.total_steps)):
        lr = cfg.lr_at(step)
        g = nn.value_and_grad(model, clamp(x + pert.delta), y, need_input=False)
        _check_finite(g, step)
        nn.step_model(model, g.grad_params, states, lr)
        gdelta, gd = attacks.delta_gradient(model, x, y, pert.delta)
        pert.delta = _delta_step(pert.delta, gd, cfg, pert.opt)
        before = _acc(gdelta.logits, y)
        after = _acc(nn.forward(model, clamp(x + pert.delta)), y) if cfg.track_ascent else math.nan
        trace.add(step, lr, g.mean_loss, before, after)
        if on_step:
            on_step(step, model)
    trace.wall_clock_s = time.perf_counter() - t0
    return model, pert, trace


def train_universal_simultaneous(model, ds: Dataset, cfg: TrainConfig, on_step=None):
    """Low-cost min-max: one backward pass gives both the weight and the delta gradient."""
    t0 = time.perf_counter()
    model, states, trace, pert = _universal_setup(model, cfg, "universal_sim")
    clamp = model.clamp
    lo, hi = model.pixel_domain
    for step, (x, y) in enumerate(step_batches(ds, cfg.batch_size, cfg.seed, cfg.total_steps)):
        lr = cfg.lr_at(step)
        z = x + pert.delta
        g = nn.value_and_grad(model, clamp(z), y, need_params=True, need_input=True)
        _check_finite(g, step)
        gd = (g.grad_input * ((z >= lo) & (z <= hi))).sum(axis=0)
        nn.step_model(model, g.grad_params, states, lr)
        pert.delta = _delta_step(pert.delta, gd, cfg, pert.opt)
        before = _acc(g.logits, y)
        after = _acc(nn.forward(model, clamp(x + pert.delta)), y) if cfg.track_ascent else math.nan
        trace.add(step, lr, g.mean_loss, before, after)
        if on_step:
            on_step(step, model)
    trace.wall_clock_s = time.perf_counter() - t0
    return model, pert, trace


def train(model, ds: Dataset, cfg: TrainConfig, on_step=None):
    """Dispatch on ``cfg.mode``; returns (model, perturbation state or None, trace)."""
    if cfg.mode == "natural":
        m, tr = train_natural(model, ds, cfg, on_step)
        return m, None, tr
    if cfg.mode in ("adv_fgsm", "adv_rfgsm", "adv_pgd"):
        m, tr = train_adv_instance(model, ds, cfg, on_step)
        return m, None, tr
    if cfg.mode == "universal_alt":
        return train_universal_alternating(model, ds, cfg, on_step)
    return train_universal_simultaneous(model, ds, cfg, on_step)
