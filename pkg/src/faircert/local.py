"""Local individual-fairness bounds around single individuals.

The violation at ``x`` is the largest change in any class probability over
the fair ball of radius ``delta``. ``upper_local`` bounds it from above via
orthotope + IBP; ``lower_local`` bounds it from below with a feasible
witness found by projected gradient ascent inside the exact ball.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from faircert.errors import ValidationError
from faircert.interval import gap_backward, gap_forward
from faircert.metric import FairMetric, project_to_ball, sample_ball
from faircert.nn import AttackConfig, ModelParams, backward, forward_cache, pgd_maximize, softmax, softmax_backward

Array = np.ndarray


@dataclass
class LocalCertificate:
    x: Array
    delta: float
    upper: float
    lower: float
    witness: Array


def _rows(x) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 1 else (x, False)


def _deltas(delta, n: int) -> Array:
    d = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,)).copy()
    if np.any(d < 0):
        raise ValidationError("delta must be non-negative")
    return d


def upper_terms(params: ModelParams, metric: FairMetric, X: Array, deltas: Array):
    """Certified gaps for rows of ``X`` at per-row radii, plus a backward cache."""
    radius = deltas[:, None] * metric.half_widths
    gaps, cache = gap_forward(params, X, radius)
    return gaps, cache


def upper_backward(params: ModelParams, metric: FairMetric, cache, dgap: Array, need_params: bool = True):
    """Returns ``(param_grads, d_center, d_delta)`` for the gaps of :func:`upper_terms`."""
    pg, dc, dr = gap_backward(params, cache, dgap, need_params=need_params)
    return pg, dc, dr @ metric.half_widths


def upper_local(params: ModelParams, metric: FairMetric, x, delta):
    """Sound upper bound on the local violation; scalar for one point, array for rows."""
    X, single = _rows(x)
    gaps, _ = upper_terms(params, metric, X, _deltas(delta, X.shape[0]))
    return float(gaps[0]) if single else gaps


def lfc(params: ModelParams, metric: FairMetric, X, delta) -> float:
    """Mean local certificate over the rows of ``X``."""
    X, _ = _rows(X)
    gaps, _ = upper_terms(params, metric, X, _deltas(delta, X.shape[0]))
    return float(np.mean(gaps))


def prob_diff_forward(params: ModelParams, A: Array, B: Array):
    """``max_c |softmax(f(A))_c - softmax(f(B))_c|`` per row."""
    za, ca = forward_cache(params, A)
    zb, cb = forward_cache(params, B)
    pa, pb = softmax(za), softmax(zb)
    D = pa - pb
    arg = np.argmax(np.abs(D), axis=1)
    rows = np.arange(D.shape[0])
    return np.abs(D[rows, arg]), (ca, cb, pa, pb, D, arg)


def prob_diff_backward(params: ModelParams, cache, dval: Array, need_params: bool = True):
    """Returns ``(param_grads, dA, dB)``; ``|.|`` has subgradient 0 at 0."""
    ca, cb, pa, pb, D, arg = cache
    rows = np.arange(D.shape[0])
    dp = np.zeros_like(D)
    dp[rows, arg] = np.sign(D[rows, arg]) * dval
    ga, dA = backward(params, ca, softmax_backward(pa, dp), need_params)
    gb, dB = backward(params, cb, softmax_backward(pb, -dp), need_params)
    if need_params:
        ga = ModelParams([(wa + wb, ba + bb) for (wa, ba), (wb, bb) in zip(ga.layers, gb.layers)])
    return ga, dA, dB


def default_attack(metric: FairMetric, centers: Array, delta: float, steps: int = 20,
                   restarts: int = 3, step_size: float | None = None) -> AttackConfig:
    """PGD inside the exact fair ball: ``delta/4`` whitened steps, uniform restarts."""
    n = centers.shape[0]
    return AttackConfig(
        steps=steps,
        step_size=step_size if step_size is not None else delta / 4,
        restarts=restarts,
        projection=lambda P: project_to_ball(metric, centers, delta, P),
        sampler=lambda rng: centers + sample_ball(metric, np.zeros(metric.dim), delta, n, rng),
        geometry=metric.S,
    )


def lower_local(params: ModelParams, metric: FairMetric, x, delta: float, cfg: AttackConfig | None = None,
                seed=None, steps: int = 20, restarts: int = 3):
    """Attack-based lower bound on the local violation.

    Returns ``(values, witnesses)``; scalars/vectors for a single point.
    ``cfg`` overrides the default attack built from ``steps``/``restarts``.
    """
    X, single = _rows(x)
    if not delta > 0:
        raise ValidationError("delta must be positive")
    if cfg is None:
        cfg = default_attack(metric, X, delta, steps=steps, restarts=restarts)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    start_seed, pgd_seed = ss.spawn(2)
    start = X + sample_ball(metric, np.zeros(metric.dim), delta, X.shape[0], np.random.default_rng(start_seed))

    def objective(W):
        vals, cache = prob_diff_forward(params, X, W)
        _, _, dW = prob_diff_backward(params, cache, np.ones(X.shape[0]), need_params=False)
        return vals, dW

    wit, vals = pgd_maximize(objective, start, cfg, seed=pgd_seed)
    if single:
        return float(vals[0]), wit[0]
    return vals, wit


def certify_local(params: ModelParams, metric: FairMetric, X, delta: float, seed=None, **attack) -> list[LocalCertificate]:
    """Upper and lower local bounds for each row of ``X``."""
    X, _ = _rows(X)
    up = upper_local(params, metric, X, delta)
    lo, wit = lower_local(params, metric, X, delta, seed=seed, **attack)
    return [LocalCertificate(X[i], float(delta), float(up[i]), float(lo[i]), wit[i]) for i in range(X.shape[0])]
