"""Interval bound propagation through a dense ReLU network.

Boxes are propagated in center/radius form::

    mu' = W mu + b,    r' = |W| r

followed on hidden layers by ReLU applied to ``mu' - r'`` and ``mu' + r'``.
The last layer stays affine so its output bounds the logits, which are then
turned into bounds on each softmax probability. Every step has a matching
backward function so the certified gap can be trained against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from faircert.errors import DimensionError, ValidationError
from faircert.nn import ModelParams

Array = np.ndarray


@dataclass
class IntervalTensor:
    lower: Array
    upper: Array

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape:
            raise DimensionError(f"bounds of shape {self.lower.shape} and {self.upper.shape}")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValidationError("interval bounds must be finite")
        if np.any(self.lower > self.upper):
            raise ValidationError("interval lower bound exceeds upper bound")

    @classmethod
    def from_center_radius(cls, center, radius) -> "IntervalTensor":
        center = np.asarray(center, dtype=np.float64)
        radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), center.shape)
        return cls(center - radius, center + radius)

    @property
    def center(self) -> Array:
        return (self.lower + self.upper) / 2

    @property
    def radius(self) -> Array:
        return (self.upper - self.lower) / 2

    def contains(self, x, atol: float = 0.0) -> Array:
        x = np.asarray(x)
        return np.all((x >= self.lower - atol) & (x <= self.upper + atol), axis=-1)


@dataclass
class OutputBounds:
    probs_lower: Array
    probs_upper: Array


def ibp_forward(params: ModelParams, center: Array, radius: Array):
    """Batched IBP. Returns ``(logit_lower, logit_upper, cache)``."""
    mu, r = center, radius
    cache = []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        zm = mu @ w.T + b
        zr = r @ np.abs(w).T
        cache.append((mu, r, zm, zr))
        if i < last:
            lo = np.maximum(zm - zr, 0.0)
            hi = np.maximum(zm + zr, 0.0)
            mu = (lo + hi) / 2
            r = (hi - lo) / 2
    return zm - zr, zm + zr, cache


def ibp_backward(params: ModelParams, cache, dL: Array, dU: Array, need_params: bool = True):
    """Reverse pass of :func:`ibp_forward`.

    Returns ``(param_grads or None, d_center, d_radius)``. ``|W|`` is
    differentiated with ``sign(W)``, ``sign(0) = 0``.
    """
    dzm = dL + dU
    dzr = dU - dL
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        mu, r, _, _ = cache[i]
        if need_params:
            gw = dzm.T @ mu + np.sign(w) * (dzr.T @ r)
            grads.append((gw, dzm.sum(axis=0)))
        dmu = dzm @ w
        dr = dzr @ np.abs(w)
        if i > 0:
            _, _, zm, zr = cache[i - 1]
            dlo = (dmu - dr) / 2
            dhi = (dmu + dr) / 2
            da = dlo * (zm - zr > 0)
            dc = dhi * (zm + zr > 0)
            dzm = da + dc
            dzr = dc - da
    pg = ModelParams(grads[::-1]) if need_params else None
    return pg, dmu, dr


def ibp_propagate(params: ModelParams, input_box: IntervalTensor) -> IntervalTensor:
    """Sound bounds on the logits for every input in ``input_box``."""
    lower = input_box.lower
    single = lower.ndim == 1
    if lower.shape[-1] != params.n_inputs:
        raise DimensionError(f"box width {lower.shape[-1]} does not match {params.n_inputs} inputs")
    c = input_box.center
    r = input_box.radius
    if single:
        c, r = c[None], r[None]
    L, U, _ = ibp_forward(params, c, r)
    if single:
        L, U = L[0], U[0]
    return IntervalTensor(L, np.maximum(U, L))


def _mixed_logits(own: Array, other: Array) -> Array:
    # row i: other logits everywhere except own logit at position i
    k = own.shape[-1]
    V = np.repeat(other[:, None, :], k, axis=1)
    idx = np.arange(k)
    V[:, idx, idx] = own
    return V


def _diag_softmax(V: Array):
    Vs = V - V.max(axis=-1, keepdims=True)
    E = np.exp(Vs)
    Q = E / E.sum(axis=-1, keepdims=True)
    idx = np.arange(V.shape[-1])
    return Q[:, idx, idx], Q


def softmax_bounds_arrays(L: Array, U: Array):
    """Probability bounds for logit box rows ``[L, U]``; returns ``(lo, hi, aux)``."""
    lo, Qlo = _diag_softmax(_mixed_logits(L, U))
    hi, Qhi = _diag_softmax(_mixed_logits(U, L))
    return lo, hi, (lo, Qlo, hi, Qhi)


def softmax_bounds_backward(aux, dlo: Array, dhi: Array):
    """Map gradients on probability bounds back to ``(dL, dU)``."""
    lo, Qlo, hi, Qhi = aux
    k = lo.shape[-1]
    idx = np.arange(k)
    eye = np.eye(k)

    # d q_ii / d v_ij = q_ii (delta_ij - q_ij)
    Glo = (dlo * lo)[:, :, None] * (eye[None] - Qlo)
    Ghi = (dhi * hi)[:, :, None] * (eye[None] - Qhi)
    dL = Glo[:, idx, idx] + Ghi.sum(axis=1) - Ghi[:, idx, idx]
    dU = Ghi[:, idx, idx] + Glo.sum(axis=1) - Glo[:, idx, idx]
    return dL, dU


def softmax_bounds(logits_box: IntervalTensor) -> OutputBounds:
    """Bounds on every class probability over a box of logits.

    The lower bound for class ``i`` pairs its lowest logit with the highest
    logits of all other classes, and symmetrically for the upper bound.
    """
    L, U = logits_box.lower, logits_box.upper
    single = L.ndim == 1
    if single:
        L, U = L[None], U[None]
    lo, hi, _ = softmax_bounds_arrays(L, U)
    lo = np.clip(lo, 0.0, 1.0)
    hi = np.clip(np.maximum(hi, lo), 0.0, 1.0)
    if single:
        lo, hi = lo[0], hi[0]
    return OutputBounds(lo, hi)


def fairness_gap(bounds: OutputBounds):
    """Largest width of a class-probability interval; a scalar per box."""
    gap = np.max(bounds.probs_upper - bounds.probs_lower, axis=-1)
    return float(gap) if np.ndim(gap) == 0 else gap


def gap_forward(params: ModelParams, center: Array, radius: Array):
    """Certified gap for each box row ``center +- radius``."""
    L, U, ibp_cache = ibp_forward(params, center, radius)
    lo, hi, aux = softmax_bounds_arrays(L, U)
    width = hi - lo
    arg = np.argmax(width, axis=1)
    gaps = width[np.arange(width.shape[0]), arg]
    return gaps, (ibp_cache, aux, arg)


def gap_backward(params: ModelParams, cache, dgap: Array, need_params: bool = True):
    """Gradients of ``sum(dgap * gaps)``: ``(param_grads, d_center, d_radius)``."""
    ibp_cache, aux, arg = cache
    n, k = aux[0].shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), arg] = dgap
    dL, dU = softmax_bounds_backward(aux, -onehot, onehot)
    return ibp_backward(params, ibp_cache, dL, dU, need_params=need_params)
