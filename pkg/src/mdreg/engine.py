"""Training, instance-wise optimization, inference and lambda selection."""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff
from .autodiff import Tape, value
from .evalsynth import dice, warp_labels
from .fields import ConfigurationError, warp
from .objective import mdreg_loss
from .regnet import SubnetSpec, cascade_forward, init_params
from .transform import DeformationField, count_nonpositive_jacobian, integrate_svf

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.1, 0.2, 0.35, 0.5, 0.75, 1.0)


class NumericalAbort(FloatingPointError):
    pass


@dataclass
class RegistrationConfig:
    levels: int = 3
    lam: float = 0.35
    steps: int = 7
    sigma: float = 1.732
    ksize: int = 3
    smoothing_enabled: bool = True
    lr: float = 1e-4
    direct_lr: float = 0.05
    backtrack: bool = True
    batch: int = 1
    iterations: int = 150000
    seed: int = 0
    mode: str = "network"
    width: float = 1.0
    slope: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.lr <= 0 or self.direct_lr <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.mode not in ("network", "direct"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.batch != 1:
            raise ConfigurationError("only batch size 1 is supported")

    @property
    def smoothing(self):
        return (self.sigma, self.ksize) if self.smoothing_enabled else None

    def spec(self, ndim):
        return SubnetSpec(levels=self.levels, ndim=ndim, width=self.width, slope=self.slope)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return RegistrationConfig(**d)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def snapshot(self):
        return ([p.value.copy() for p in self.params], [p.grad.copy() for p in self.params],
                [m.copy() for m in self.m], [v.copy() for v in self.v], self.t)

    def restore(self, snap):
        values, grads, ms, vs, t = snap
        for p, x, g in zip(self.params, values, grads):
            p.value = x.copy()
            p.grad = g.copy()
        self.m = [m.copy() for m in ms]
        self.v = [v.copy() for v in vs]
        self.t = t


@dataclass
class RegistrationResult:
    svf: np.ndarray
    forward: DeformationField
    inverse: DeformationField
    warped: np.ndarray
    increments: list
    accumulated: list
    loss: object
    seconds: float
    folds: int
    history: list = field(default_factory=list)


def _loss_step(params, fixed, moving, cfg):
    with Tape() as tape:
        out = cascade_forward(params, fixed, moving, cfg.steps, cfg.smoothing)
        lb = mdreg_loss(out.fixed_pyr, out.moving_pyr, out.increments, cfg.lam, cfg.steps, cfg.smoothing)
        bad = lb.check_finite()
        if bad is not None:
            raise NumericalAbort(f"non-finite loss term {bad}")
        tape.backward(lb.total)
    return lb


def train(images, cfg, callback=None):
    """Adam over ordered pairs drawn uniformly from all n**2 (fixed, moving) pairs."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ConfigurationError("need at least one training image")
    dims = images[0].shape
    if any(im.shape != dims for im in images):
        raise ConfigurationError("training images must share dims")
    params = init_params(cfg.spec(len(dims)), dims, cfg.seed, "network")
    opt = Adam(params.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(images)
    history = []
    for it in range(cfg.iterations):
        i, j = rng.integers(n), rng.integers(n)
        opt.zero_grad()
        lb = _loss_step(params, images[i], images[j], cfg)
        opt.step()
        history.append(lb.value)
        if callback is not None:
            callback(it, lb)
    return params, history


def register(params, fixed, moving, cfg):
    """Network mode: one gradient-free forward pass. Direct mode: Adam on the velocities."""
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    t0 = time.perf_counter()
    history = []
    if cfg.mode == "direct":
        params = init_params(cfg.spec(fixed.ndim), fixed.shape, cfg.seed, "direct")
        history = _optimize_direct(params, fixed, moving, cfg)
    elif params is None:
        raise ConfigurationError("network mode needs trained parameters")
    return _finish(params, fixed, moving, cfg, t0, history)


def _optimize_direct(params, fixed, moving, cfg):
    """Adam on the velocities; with ``cfg.backtrack`` an uphill step is undone and retried at half the rate.

    The history holds the objective of the accepted iterate, so it never increases
    when backtracking is on.
    """
    opt = Adam(params.parameters(), cfg.direct_lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    best = None
    for _ in range(cfg.iterations):
        opt.zero_grad()
        lb = _loss_step(params, fixed, moving, cfg)
        if cfg.backtrack and best is not None and lb.value > best[0]:
            opt.restore(best[1])
            opt.lr *= 0.5
            history.append(best[0])
        else:
            if cfg.backtrack:
                best = (lb.value, opt.snapshot())
            history.append(lb.value)
        opt.step()
    if cfg.backtrack and best is not None:
        # the last step was never evaluated; return to the best evaluated point
        opt.restore(best[1])
    return history


def _finish(params, fixed, moving, cfg, t0, history):
    out = cascade_forward(params, fixed, moving, cfg.steps, cfg.smoothing)
    lb = mdreg_loss(out.fixed_pyr, out.moving_pyr, out.increments, cfg.lam, cfg.steps, cfg.smoothing)
    svf = value(out.final_svf)
    fwd = integrate_svf(svf, cfg.steps)
    inv = integrate_svf(-svf, cfg.steps)
    warped = warp(moving, fwd.disp)
    return RegistrationResult(
        svf=svf, forward=fwd, inverse=inv, warped=warped,
        increments=[value(v) for v in out.increments],
        accumulated=[value(v) for v in out.accumulated],
        loss=lb, seconds=time.perf_counter() - t0,
        folds=count_nonpositive_jacobian(fwd), history=history,
    )


@dataclass
class SweepRow:
    lam: float
    dice: float
    folds: float
    total_folds: int


@dataclass
class SweepResult:
    rows: list
    selected: float
    flagged: bool


def lambda_sweep(train_images, val_images, val_labels, template, template_labels, cfg,
                 lambdas=DEFAULT_LAMBDAS):
    """Pick the lambda with the best validation Dice among fold-free settings.

    Each validation image is registered to ``template`` (as moving -> fixed);
    ties go to the smallest lambda. If no lambda is fold-free the one with the
    fewest folds is chosen and the result is flagged.
    """
    if not val_images:
        raise ConfigurationError("empty validation set")
    if not lambdas:
        raise ConfigurationError("empty lambda list")
    rows = []
    for lam in lambdas:
        c = cfg.replace(lam=float(lam))
        params = train(train_images, c)[0] if c.mode == "network" else None
        dices, folds = [], []
        for img, lab in zip(val_images, val_labels):
            res = register(params, template, img, c)
            dices.append(dice(warp_labels(lab, res.forward), template_labels)[1])
            folds.append(res.folds)
        rows.append(SweepRow(float(lam), float(np.mean(dices)), float(np.mean(folds)), int(np.sum(folds))))
        logger.info("lambda %.3g: dice %.4f folds %d", lam, rows[-1].dice, rows[-1].total_folds)
    clean = [r for r in rows if r.total_folds == 0]
    if clean:
        best = max(r.dice for r in clean)
        selected = min(r.lam for r in clean if r.dice == best)
        return SweepResult(rows, selected, False)
    fewest = min(r.total_folds for r in rows)
    return SweepResult(rows, min(r.lam for r in rows if r.total_folds == fewest), True)


def gradient_free(fn, *args, **kw):
    """Run ``fn`` and assert it recorded no tape nodes."""
    before = autodiff.recorded_nodes
    out = fn(*args, **kw)
    if autodiff.recorded_nodes != before:
        raise AssertionError("gradient computation during inference")
    return out

