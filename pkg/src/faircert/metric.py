"""Fair distance metrics and their axis-aligned over-approximation.

A metric is stored as a symmetric positive-definite matrix ``S`` with

    d(x, y) = sqrt((x - y)' S^-1 (x - y)),

so large eigenvalues of ``S`` mark directions along which individuals are
considered similar even when far apart. The ball ``{y : d(x, y) <= delta}``
is contained in the box ``x +- delta * sqrt(diag(S))``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from faircert.errors import ConvergenceError, DimensionError, ValidationError
from faircert.interval import IntervalTensor

log = logging.getLogger(__name__)

Array = np.ndarray

KINDS = ("mahalanobis", "weighted", "identity")
RHO_CLAMP = 1e-3


@dataclass
class FairMetric:
    kind: str
    S: Array
    mu: float = 0.01
    provenance: str = ""
    _eig: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown metric kind {self.kind!r}")
        S = np.asarray(self.S, dtype=np.float64)
        if S.ndim == 1:
            S = np.diag(S)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise DimensionError(f"metric matrix must be square, got {S.shape}")
        if not np.all(np.isfinite(S)):
            raise ValidationError("metric matrix has non-finite entries")
        if np.max(np.abs(S - S.T), initial=0.0) > 1e-10:
            raise ValidationError("metric matrix is not symmetric")
        S = (S + S.T) / 2
        evals, evecs = np.linalg.eigh(S)
        if evals[0] <= 0:
            raise ValidationError(f"metric matrix is not positive definite (min eigenvalue {evals[0]:.3g})")
        self.S = S
        self._eig = (evals, evecs)

    @property
    def dim(self) -> int:
        return self.S.shape[0]

    @property
    def min_eigenvalue(self) -> float:
        return float(self._eig[0][0])

    @property
    def S_inv(self) -> Array:
        evals, evecs = self._eig
        return (evecs / evals) @ evecs.T

    @property
    def sqrt_S(self) -> Array:
        evals, evecs = self._eig
        return (evecs * np.sqrt(evals)) @ evecs.T

    @property
    def half_widths(self) -> Array:
        return np.sqrt(np.diag(self.S))

    @property
    def is_diagonal(self) -> bool:
        return not np.any(self.S - np.diag(np.diag(self.S)))

    def norm(self, v) -> Array:
        """Metric length of vectors ``v`` (last axis)."""
        v = np.asarray(v, dtype=np.float64)
        if self.is_diagonal:
            q = np.sum(v * v / np.diag(self.S), axis=-1)
        else:
            q = np.sum((v @ self.S_inv) * v, axis=-1)
        return np.sqrt(np.maximum(q, 0.0))

    def distance(self, x, y) -> Array:
        return self.norm(np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64))

    def drop(self, index: int) -> "FairMetric":
        """Marginal metric on the remaining coordinates after removing one feature."""
        keep = [i for i in range(self.dim) if i != index]
        return FairMetric(self.kind, self.S[np.ix_(keep, keep)], self.mu, self.provenance + f"; dropped {index}")

    @classmethod
    def identity(cls, m: int) -> "FairMetric":
        return cls("identity", np.eye(m), mu=1.0, provenance="identity")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "S": self.S.tolist(), "mu": self.mu, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "FairMetric":
        return cls(d["kind"], np.array(d["S"], dtype=np.float64), float(d.get("mu", 0.01)), d.get("provenance", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FairMetric":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Orthotope(IntervalTensor):
    """Axis-aligned box containing a fair-metric ball."""


def orthotope(metric: FairMetric, x, delta) -> Orthotope:
    """Box ``x +- delta * sqrt(diag(S))``; ``delta`` may be one value per row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != metric.dim:
        raise DimensionError(f"point of width {x.shape[-1]} for a {metric.dim}-dimensional metric")
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValidationError("delta must be non-negative")
    half = (delta[..., None] if delta.ndim else delta) * metric.half_widths
    return Orthotope(x - half, x + half)


def project_to_ball(metric: FairMetric, center, delta, point) -> Array:
    """Radial projection onto ``{p : d(center, p) <= delta}`` in whitened coordinates.

    Points already inside are returned unchanged. Rows are handled
    independently and ``delta`` may vary per row.
    """
    center = np.asarray(center, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    v = point - center
    d = metric.norm(v)
    delta = np.asarray(delta, dtype=np.float64)
    outside = d > delta
    scale = np.where(outside, delta / np.where(outside, d, 1.0), 1.0)
    return np.where(np.expand_dims(outside, -1), center + v * np.expand_dims(scale, -1), point)


def sample_ball(metric: FairMetric, center, delta, n: int, rng: np.random.Generator) -> Array:
    """``n`` points uniform in the fair ball of radius ``delta`` about ``center``."""
    m = metric.dim
    u = rng.standard_normal((n, m))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= rng.uniform(size=(n, 1)) ** (1.0 / m)
    return np.asarray(center, dtype=np.float64) + delta * (u @ metric.sqrt_S.T)


def orthotope_volume_ratio(metric: FairMetric, n_samples: int = 20000, seed=None) -> float:
    """Monte-Carlo estimate of vol(ball) / vol(orthotope); always <= 1."""
    rng = np.random.default_rng(seed)
    half = metric.half_widths
    pts = rng.uniform(-1.0, 1.0, size=(n_samples, metric.dim)) * half
    return float(np.mean(metric.norm(pts) <= 1.0))


def random_spd(m: int, rng: np.random.Generator, floor: float = 0.01, spread: float = 10.0) -> Array:
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    evals = floor + rng.uniform(0.0, spread, size=m)
    return (q * evals) @ q.T


def tightness_curve(dims=(2, 3, 4, 6, 8), n_matrices: int = 20, n_samples: int = 20000, seed=0) -> dict:
    """Mean ball/box volume ratio per dimension over random metrics."""
    rng = np.random.default_rng(seed)
    out = {}
    for m in dims:
        ratios = [
            orthotope_volume_ratio(FairMetric("mahalanobis", random_spd(m, rng)), n_samples, rng)
            for _ in range(n_matrices)
        ]
        out[m] = float(np.mean(ratios))
    return out


# --------------------------------------------------------------------------
# Metric construction from data
# --------------------------------------------------------------------------

def _fit_logistic(X: Array, y: Array, l2: float, max_iter: int, tol: float):
    """L2-regularised logistic regression by damped Newton steps.

    Minimises mean log-loss + l2/2 |w|^2 (intercept unpenalised). Returns
    ``(w, b, iterations)``.
    """
    n, m = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(m + 1)
    reg = np.full(m + 1, l2)
    reg[-1] = 0.0

    def objective(t):
        z = Xb @ t
        return np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(reg * t * t)

    gnorm = np.inf
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(Xb @ theta)))
        g = Xb.T @ (p - y) / n + reg * theta
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return theta[:-1], theta[-1], it
        H = (Xb * (p * (1 - p))[:, None]).T @ Xb / n + np.diag(reg) + 1e-12 * np.eye(m + 1)
        step = np.linalg.solve(H, g)
        f0 = objective(theta)
        t = 1.0
        while objective(theta - t * step) > f0 - 1e-4 * t * (g @ step) and t > 1e-10:
            t *= 0.5
        theta = theta - t * step
    raise ConvergenceError(
        f"logistic regression did not converge in {max_iter} iterations (gradient norm {gnorm:.3g}, tol {tol:g})"
    )


def _loglik(X: Array, y: Array, w: Array, b: float) -> float:
    z = X @ w + b
    return float(-np.sum(np.logaddexp(0.0, z) - y * z))


def learn_sensr_metric(data, mu: float = 0.01, l2: float = 1e-4, max_iter: int = 10_000,
                       tol: float = 1e-6, significance: float = 0.01) -> FairMetric:
    """Sensitive-subspace metric in the style of SenSR.

    A logistic regression predicts the protected attribute from the
    non-protected features; its weight vector (and the protected feature's
    own axis, when present) span the sensitive subspace ``A``. With
    ``Sigma = I - P_A`` the stored matrix is ``S = (Sigma + mu I)^-1``, so
    sensitive directions get eigenvalue ``1/mu`` and the rest ``1/(1+mu)``.
    A direction that does not predict the protected attribute better than
    chance (likelihood-ratio test at ``significance``) is discarded.
    """
    if not 0 < mu <= 1:
        raise ValidationError(f"eigen floor mu must lie in (0, 1], got {mu}")
    X = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.protected, dtype=np.float64)
    n, m = X.shape
    pf = data.protected_feature
    ns = [j for j in range(m) if j != pf]

    directions = []
    if ns:
        w, b, iters = _fit_logistic(X[:, ns], y, l2, max_iter, tol)
        p0 = np.clip(y.mean(), 1e-12, 1 - 1e-12)
        ll_null = _loglik(X[:, ns], y, np.zeros(len(ns)), np.log(p0 / (1 - p0)))
        lr_stat = 2.0 * (_loglik(X[:, ns], y, w, b) - ll_null)
        pval = float(stats.chi2.sf(max(lr_stat, 0.0), df=len(ns)))
        log.debug("sensr logistic fit: %d iterations, LR p-value %.3g", iters, pval)
        if pval <= significance:
            a = np.zeros(m)
            a[ns] = w
            directions.append(a / np.linalg.norm(a))
        else:
            log.info("protected attribute not predictable from features (p=%.3g); no learned direction", pval)
    if pf is not None:
        e = np.zeros(m)
        e[pf] = 1.0
        directions.append(e)

    sigma = np.eye(m)
    if directions:
        A = np.stack(directions, axis=1)
        if np.linalg.matrix_rank(A, tol=1e-8) < A.shape[1]:
            raise ValidationError("sensitive directions are linearly dependent")
        P = A @ np.linalg.solve(A.T @ A, A.T)
        sigma = sigma - P
    S = np.linalg.inv(sigma + mu * np.eye(m))
    S = (S + S.T) / 2
    return FairMetric("mahalanobis", S, mu, provenance=f"sensr: {len(directions)} sensitive direction(s)")


def correlation_weighted_metric(data, mu: float = 0.01, clamp: float = RHO_CLAMP) -> FairMetric:
    """Diagonal metric with ``S_ii = |corr(feature_i, protected)|`` (clamped below).

    The protected feature itself, when present, gets ``1/mu``.
    """
    X = np.asarray(data.features, dtype=np.float64)
    a = np.asarray(data.protected, dtype=np.float64)
    m = X.shape[1]
    Xc = X - X.mean(axis=0)
    ac = a - a.mean()
    denom = np.sqrt((Xc ** 2).sum(axis=0) * (ac ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0, (Xc * ac[:, None]).sum(axis=0) / np.where(denom > 0, denom, 1.0), 0.0)
    diag = np.maximum(np.abs(rho), clamp)
    if data.protected_feature is not None:
        diag[data.protected_feature] = 1.0 / mu
    return FairMetric("weighted", np.diag(diag), mu, provenance="pearson-correlation weights")
