"""Certified-fairness training: plain, FTU, F-IBP, L-DIF and U-DIF.

Every fairness regulariser is a registered loss whose gradient is hand
derived. Inner maximisers (extra radii for U-DIF, perturbations and attack
witnesses for L-DIF) are solved approximately per batch and then held fixed
while differentiating with respect to the weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from faircert.data import Dataset, accuracy
from faircert.dif import project_perturbations, project_radii
from faircert.errors import DivergenceError, ValidationError
from faircert.local import prob_diff_backward, prob_diff_forward, upper_backward, upper_terms
from faircert.metric import FairMetric, project_to_ball, sample_ball
from faircert.nn import (
    Loss, ModelParams, TrainState, adam_step, backward, cross_entropy_terms, register_loss, tree_map,
)

Array = np.ndarray

MODES = ("plain", "ftu", "f-ibp", "l-dif", "u-dif")


# --------------------------------------------------------------------------
# Registered fairness terms
# --------------------------------------------------------------------------

@register_loss("f-ibp")
class LocalUpperTerm(Loss):
    """Mean certified local gap at radius ``delta``."""

    def __init__(self, metric: FairMetric, delta: float):
        self.metric, self.delta = metric, float(delta)

    def value_and_grad(self, params, X, Y=None):
        gaps, cache = upper_terms(params, self.metric, X, np.full(X.shape[0], self.delta))
        g, _, _ = upper_backward(params, self.metric, cache, np.full(X.shape[0], 1.0 / X.shape[0]))
        return float(np.mean(gaps)), g


@register_loss("u-dif-inner")
class DifUpperTerm(Loss):
    """Mean certified gap at per-row radii ``delta + radii`` with the radii held fixed."""

    def __init__(self, metric: FairMetric, delta: float, radii):
        self.metric, self.delta, self.radii = metric, float(delta), np.asarray(radii, dtype=np.float64)

    def value_and_grad(self, params, X, Y=None):
        gaps, cache = upper_terms(params, self.metric, X, self.delta + self.radii)
        g, _, _ = upper_backward(params, self.metric, cache, np.full(X.shape[0], 1.0 / X.shape[0]))
        return float(np.mean(gaps)), g


@register_loss("l-dif-inner")
class DifLowerTerm(Loss):
    """Mean probability change between ``x + phi`` and ``x + phi + w`` with ``phi, w`` fixed."""

    def __init__(self, phi, offsets):
        self.phi = np.asarray(phi, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)

    def value_and_grad(self, params, X, Y=None):
        A = X + self.phi
        vals, cache = prob_diff_forward(params, A, A + self.offsets)
        g, _, _ = prob_diff_backward(params, cache, np.full(X.shape[0], 1.0 / X.shape[0]))
        return float(np.mean(vals)), g


# --------------------------------------------------------------------------
# Truncated inner solves
# --------------------------------------------------------------------------

def solve_upper_radii(params: ModelParams, metric: FairMetric, X: Array, delta: float, gamma: float,
                      p: int = 2, iters: int = 10) -> Array:
    """A few normalised subgradient steps on the extra radii, best iterate kept."""
    n = X.shape[0]
    if gamma == 0:
        return np.zeros(n)
    r = np.full(n, float(gamma))
    best_v, best_r = -np.inf, r
    w = np.full(n, 1.0 / n)
    for k in range(1, iters + 1):
        gaps, cache = upper_terms(params, metric, X, delta + r)
        v = float(np.mean(gaps))
        if v > best_v:
            best_v, best_r = v, r.copy()
        _, _, g = upper_backward(params, metric, cache, w, need_params=False)
        gn = np.linalg.norm(g)
        if gn == 0 or not np.isfinite(gn):
            break
        r = project_radii(r + (gamma / math.sqrt(k)) * g / gn, gamma, p)
    return best_r


def solve_lower_pair(params: ModelParams, metric: FairMetric, X: Array, delta: float, gamma: float,
                     p: int = 2, iters: int = 10, rng: np.random.Generator | None = None):
    """Joint truncated ascent on perturbations ``phi`` and witness offsets ``w``.

    Each iteration shares one forward/backward pass: ``w`` takes a whitened
    ``delta/4`` step inside the fair ball, ``phi`` a globally normalised
    ``gamma/sqrt(k)`` step inside the budget. Returns the best ``(phi, w)``.
    """
    rng = rng or np.random.default_rng(0)
    n, m = X.shape
    zero = np.zeros(m)
    W = sample_ball(metric, zero, delta, n, rng)
    if gamma > 0:
        phi = rng.standard_normal((n, m)) @ metric.sqrt_S.T
        phi *= (gamma / 2) / max(np.mean(metric.norm(phi) ** p), 1e-300) ** (1.0 / p)
        phi = project_perturbations(phi, metric, gamma, p)
    else:
        phi = np.zeros((n, m))
    S = metric.S
    best_v, best = -np.inf, (phi, W)
    wts = np.full(n, 1.0 / n)
    for k in range(1, iters + 1):
        A = X + phi
        vals, cache = prob_diff_forward(params, A, A + W)
        v = float(np.mean(vals))
        if v > best_v:
            best_v, best = v, (phi.copy(), W.copy())
        _, dA, dB = prob_diff_backward(params, cache, wts, need_params=False)
        dW = dB @ S
        nw = np.sqrt(np.maximum(np.sum(dB * dW, axis=1, keepdims=True), 0.0))
        W = W + (delta / 4) * np.where(nw > 0, dW / np.where(nw > 0, nw, 1.0), 0.0)
        W = project_to_ball(metric, np.zeros((n, m)), delta, W)
        if gamma > 0:
            gphi = dA + dB
            d = gphi @ S
            scale = math.sqrt(max(float(np.max(np.sum(gphi * d, axis=1))), 0.0))
            if scale > 0:
                phi = project_perturbations(phi + (gamma / math.sqrt(k)) * d / scale, metric, gamma, p)
    A = X + phi
    vals, _ = prob_diff_forward(params, A, A + W)
    if float(np.mean(vals)) > best_v:
        best = (phi, W)
    return best


# --------------------------------------------------------------------------
# Configuration and losses
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "plain"
    alpha: float = 1.0
    delta: float = 0.02
    gamma: float = 0.025
    p: int = 2
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    solver_iters: int = 10
    hidden: tuple = (64, 64)
    val_frac: float = 0.1
    warmup: float = 0.1
    radius_warmup: float = 0.3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative")
        if not self.delta > 0:
            raise ValidationError("delta must be positive")
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.solver_iters < 1:
            raise ValidationError("epochs, batch_size and solver_iters must be >= 1")
        if not (0 <= self.warmup <= 1 and 0 <= self.radius_warmup <= 1):
            raise ValidationError("warm-up fractions must lie in [0, 1]")
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossValue:
    total: float
    ce: float
    fair: float
    grad: ModelParams | None = None


def fairness_term(params: ModelParams, X: Array, metric: FairMetric, cfg: TrainConfig,
                  rng: np.random.Generator | None = None) -> Loss | None:
    """The mode's fairness loss with its inner maximiser solved for this batch."""
    if cfg.mode in ("plain", "ftu"):
        return None
    if cfg.mode == "f-ibp":
        return LocalUpperTerm(metric, cfg.delta)
    if cfg.mode == "u-dif":
        radii = solve_upper_radii(params, metric, X, cfg.delta, cfg.gamma, cfg.p, cfg.solver_iters)
        return DifUpperTerm(metric, cfg.delta, radii)
    phi, W = solve_lower_pair(params, metric, X, cfg.delta, cfg.gamma, cfg.p, cfg.solver_iters, rng)
    return DifLowerTerm(phi, W)


def loss_terms(params: ModelParams, batch, metric: FairMetric | None, cfg: TrainConfig, alpha: float | None = None,
               rng: np.random.Generator | None = None, need_grad: bool = True) -> LossValue:
    """Cross-entropy plus ``alpha`` times the mode's fairness term."""
    X, Y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValidationError("empty batch")
    alpha = cfg.alpha if alpha is None else alpha
    ce, dz, cache = cross_entropy_terms(params, X, Y)
    g = backward(params, cache, dz)[0] if need_grad else None
    if cfg.mode not in ("plain", "ftu") and metric is None:
        raise ValidationError(f"mode {cfg.mode} needs a fair metric")
    term = fairness_term(params, X, metric, cfg, rng) if alpha > 0 else None
    if term is None:
        return LossValue(float(ce), float(ce), 0.0, g)
    fv, fg = term.value_and_grad(params, X)
    if need_grad:
        g = tree_map(lambda a, b: a + alpha * b, g, fg)
    return LossValue(float(ce + alpha * fv), float(ce), float(fv), g)


def loss(params: ModelParams, batch, metric: FairMetric | None, cfg: TrainConfig, seed=0) -> float:
    """Scalar training objective for one batch (no warm-up)."""
    return loss_terms(params, batch, metric, cfg, rng=np.random.default_rng(seed), need_grad=False).total


# --------------------------------------------------------------------------
# Preprocessing and the training loop
# --------------------------------------------------------------------------

def ftu_preprocess(data: Dataset) -> Dataset:
    """Remove the protected column from the features; the attribute stays as metadata."""
    j = data.protected_feature
    if j is None:
        return data
    keep = [i for i in range(data.m) if i != j]
    return replace(data, features=data.features[:, keep], feature_names=[data.feature_names[i] for i in keep],
                   protected_feature=None, mean=data.mean[keep], std=data.std[keep])


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    config: TrainConfig
    metric: FairMetric | None = None
    drops_protected: bool = False

    def inputs(self, data: Dataset) -> Dataset:
        """Bring a dataset into the model's feature layout."""
        return ftu_preprocess(data) if self.drops_protected else data


def _metric_for(data: Dataset, metric: FairMetric | None, ftu: bool) -> FairMetric:
    if metric is None:
        return FairMetric.identity(data.m - (1 if ftu and data.protected_feature is not None else 0))
    if ftu and data.protected_feature is not None and metric.dim == data.m:
        return metric.drop(data.protected_feature)
    return metric


def fit(data: Dataset, cfg: TrainConfig, metric: FairMetric | None = None, val: Dataset | None = None,
        log_path=None) -> TrainResult:
    """Minibatch Adam on the configured loss.

    Without ``val`` a seeded ``val_frac`` share of ``data`` is held out. The
    fairness weight ramps linearly up to ``alpha`` over the first ``warmup``
    share of steps, and the radii ``delta``, ``gamma`` over the first
    ``radius_warmup`` share: a saturated interval bound has almost no
    gradient, so starting from full-size boxes can stall. Everything random
    derives from ``cfg.seed``.
    """
    ftu = cfg.mode == "ftu"
    metric = _metric_for(data, metric, ftu)
    if val is None:
        data, val = data.split(cfg.val_frac, seed=cfg.seed)
    if ftu:
        data, val = ftu_preprocess(data), ftu_preprocess(val)
    if metric.dim != data.m:
        raise ValidationError(f"metric has dimension {metric.dim} but data has {data.m} features")

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss, inner_ss = ss.spawn(3)
    sizes = [data.m, *cfg.hidden, 2]
    params = ModelParams.init(sizes, seed=int(init_ss.generate_state(1)[0]))
    state = TrainState(params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    inner_rng = np.random.default_rng(inner_ss)

    n = data.n
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * per_epoch
    warm_steps = max(1, int(round(cfg.warmup * total)))
    radius_steps = max(1, int(round(cfg.radius_warmup * total)))
    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        ce_sum = fair_sum = 0.0
        for b in range(per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            a = cfg.alpha * min(1.0, (step + 1) / warm_steps) if cfg.warmup > 0 else cfg.alpha
            ramp = min(1.0, (step + 1) / radius_steps) if cfg.radius_warmup > 0 else 1.0
            step_cfg = cfg if ramp == 1.0 else replace(cfg, delta=cfg.delta * ramp, gamma=cfg.gamma * ramp)
            try:  # inputs were validated above, so a failure here means values blew up
                with np.errstate(over="ignore", invalid="ignore"):
                    lv = loss_terms(state.params, (data.features[idx], data.labels[idx]), metric, step_cfg,
                                    alpha=a, rng=inner_rng)
                    if not (np.isfinite(lv.total) and np.all(np.isfinite(lv.grad.flat()))):
                        raise ValidationError("non-finite loss")
                    state = adam_step(state, lv.grad)
            except ValidationError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {b}: {exc}", log) from exc
            ce_sum += lv.ce * len(idx)
            fair_sum += lv.fair * len(idx)
            step += 1
        log.append({"epoch": epoch, "ce": ce_sum / n, "fair_term": fair_sum / n,
                    "val_acc": accuracy(state.params, val)})
    if log_path is not None:
        write_log(log, log_path)
    return TrainResult(state.params, log, cfg, metric, ftu)


def write_log(log: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "ce", "fair_term", "val_acc"])
        w.writeheader()
        for row in log:
            w.writerow(row)
