"""Bounds on distributional individual fairness over an empirical sample.

For individuals ``x_1..x_n`` the worst-case mean local violation over all
perturbations with ``(1/n) sum |phi_i|^p <= gamma^p`` is sandwiched:

* ``dif_lower`` ascends over explicit perturbations ``phi_i`` with attack
  witnesses, so every iterate is a feasible (hence valid) lower bound;
* ``dif_upper`` ascends over per-individual extra radii ``r_i >= 0`` of the
  certified local bound ``Ibar(x_i, delta + r_i)``; its global maximum is a
  certificate;
* ``dif_oracle`` maximises the same objective over a radius grid exactly
  with a multiple-choice knapsack DP, as a cross-check of the solver.

Perturbation lengths are measured in the fair metric, so that a shifted
point's fair ball sits inside the enlarged ball around the original point.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from faircert.errors import BudgetError, ValidationError
from faircert.local import lower_local, prob_diff_backward, prob_diff_forward, upper_backward, upper_terms
from faircert.metric import FairMetric
from faircert.nn import ModelParams

Array = np.ndarray

ORACLE_MAX_N = 50


@dataclass
class DifProblem:
    X: Array
    delta: float
    gamma: float
    metric: FairMetric
    p: int = 2

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if not self.delta > 0:
            raise ValidationError("delta must be positive")
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")
        if int(self.p) != self.p or self.p < 1:
            raise ValidationError("Wasserstein order p must be an integer >= 1")
        if self.X.shape[0] < 1:
            raise ValidationError("need at least one individual")
        self.p = int(self.p)

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class PerturbationSet:
    phi: Array


@dataclass
class RadiusSet:
    radii: Array


@dataclass
class DifReport:
    delta: float
    gamma: float
    p: int
    n: int
    eps_lower: float
    eps_upper: float
    eps_upper_solver: float
    certificate: str
    local_upper: list
    upper_trace: list
    lower_trace: list
    iterations: int
    eps_oracle: float | None = None
    hoeffding: dict | None = None
    metric_kind: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extra"] = {k: v for k, v in self.extra.items() if not k.startswith("_")}
        return d


def project_radii(r: Array, gamma: float, p: int) -> Array:
    """Clamp negatives then shrink radially onto ``(1/n) sum r^p <= gamma^p``."""
    r = np.maximum(np.asarray(r, dtype=np.float64), 0.0)
    if gamma == 0:
        return np.zeros_like(r)
    mass = np.mean(r ** p)
    if mass > gamma ** p:
        r = r * (gamma ** p / mass) ** (1.0 / p)
    return r


def project_perturbations(phi: Array, metric: FairMetric, gamma: float, p: int) -> Array:
    """Scale all perturbations by one factor so their fair-length budget holds."""
    if gamma == 0:
        return np.zeros_like(phi)
    mass = np.mean(metric.norm(phi) ** p)
    if mass > gamma ** p:
        phi = phi * (gamma ** p / mass) ** (1.0 / p)
    return phi


def budget_mass(lengths: Array, p: int) -> float:
    return float(np.mean(np.asarray(lengths) ** p))


def _iter_seed(seed: int, j: int):
    return seed if j == 0 else np.random.SeedSequence([seed, j])


def dif_lower(params: ModelParams, problem: DifProblem, steps: int = 50, step_size: float | None = None,
              attack_steps: int = 20, attack_restarts: int = 3, seed: int = 0, init: Array | None = None):
    """Projected gradient ascent over perturbations; returns ``(eps_lower, PerturbationSet, trace)``.

    Iterate 0 is ``init`` (default: no perturbation, which reproduces the
    mean attack bound of :func:`faircert.local.lower_local` for the same
    seed). The ascent then starts from a random feasible assignment and
    differentiates the attack objective with the witness offsets held fixed.
    """
    X, n, m = problem.X, problem.n, problem.metric.dim
    metric, delta, gamma, p = problem.metric, problem.delta, problem.gamma, problem.p
    step_size = gamma if step_size is None else step_size

    def attack(phi, j):
        return lower_local(params, metric, X + phi, delta, seed=_iter_seed(seed, j),
                           steps=attack_steps, restarts=attack_restarts)

    phi = np.zeros((n, m)) if init is None else project_perturbations(np.asarray(init, float), metric, gamma, p)
    vals, _ = attack(phi, 0)
    best_v, best_phi = float(np.mean(vals)), phi.copy()
    trace = [best_v]
    if gamma == 0:
        return best_v, PerturbationSet(best_phi), trace

    rng = np.random.default_rng(np.random.SeedSequence([seed, 2**31]))
    phi = rng.standard_normal((n, m)) @ metric.sqrt_S.T
    phi *= (gamma / 2) / max(np.mean(metric.norm(phi) ** p), 1e-300) ** (1.0 / p)
    phi = project_perturbations(phi, metric, gamma, p)

    for j in range(1, steps + 1):
        vals, wit = attack(phi, j)
        v = float(np.mean(vals))
        if not np.isfinite(v):
            break
        if v > best_v:
            best_v, best_phi = v, phi.copy()
        trace.append(best_v)
        A = X + phi
        _, cache = prob_diff_forward(params, A, wit)
        _, dA, dB = prob_diff_backward(params, cache, np.full(n, 1.0 / n), need_params=False)
        g = dA + dB
        if not np.all(np.isfinite(g)):
            break
        d = g @ metric.S
        scale = np.sqrt(np.max(np.sum(g * d, axis=1)))
        if scale == 0:
            break
        phi = project_perturbations(phi + (step_size / math.sqrt(j)) * d / scale, metric, gamma, p)
    return best_v, PerturbationSet(best_phi), trace


def _upper_value_grad(params, problem: DifProblem, radii: Array, need_grad: bool = True):
    deltas = problem.delta + radii
    gaps, cache = upper_terms(params, problem.metric, problem.X, deltas)
    value = float(np.mean(gaps))
    if not need_grad:
        return value, None, gaps
    _, _, dd = upper_backward(params, problem.metric, cache, np.full(problem.n, 1.0 / problem.n), need_params=False)
    return value, dd, gaps


def _random_boundary_radii(rng, n: int, gamma: float, p: int) -> Array:
    r = rng.uniform(size=n)
    return r * (gamma ** p / np.mean(r ** p)) ** (1.0 / p)


def dif_upper(params: ModelParams, problem: DifProblem, iters: int = 300, starts: int = 5,
              step_scale: float | None = None, seed: int = 0, init: Array | None = None):
    """Normalised projected subgradient ascent over extra radii.

    Steps are ``c / sqrt(k)`` along the normalised subgradient (``c`` defaults
    to ``gamma``). Starts: ``init`` if given, the equal split ``r_i = gamma``,
    then uniform random points on the budget boundary. The best iterate over
    all starts is returned as ``(eps_upper, RadiusSet, trace)``.
    """
    n, gamma, p = problem.n, problem.gamma, problem.p
    c = gamma if step_scale is None else step_scale
    zero = np.zeros(n)
    if gamma == 0:
        value, _, _ = _upper_value_grad(params, problem, zero, need_grad=False)
        return value, RadiusSet(zero), [value]

    rng = np.random.default_rng(seed)
    inits = []
    if init is not None:
        inits.append(project_radii(init, gamma, p))
    inits.append(np.full(n, float(gamma)))
    inits.extend(_random_boundary_radii(rng, n, gamma, p) for _ in range(max(starts - 1, 0)))

    best_v, best_r = -np.inf, zero
    trace = []
    for r in inits:
        for k in range(1, iters + 1):
            v, g, _ = _upper_value_grad(params, problem, r)
            if np.isfinite(v) and v > best_v:
                best_v, best_r = v, r.copy()
            trace.append(best_v)
            gn = np.linalg.norm(g)
            if not np.isfinite(gn) or gn == 0:
                break
            r = project_radii(r + (c / math.sqrt(k)) * g / gn, gamma, p)
    return best_v, RadiusSet(best_r), trace


def dif_oracle(params: ModelParams, problem: DifProblem, K: int = 500, Q: int | None = None,
               max_work: float = 2e9):
    """Grid-exact maximum of the radius problem by multiple-choice knapsack DP.

    Each radius takes one of ``K`` evenly spaced values in
    ``[0, (n gamma^p)^(1/p)]``. Costs ``r^p`` are rounded up to multiples of
    ``n gamma^p / Q`` (``Q = 10 K`` by default), so every returned assignment
    is feasible. Returns ``(value, RadiusSet)``.
    """
    n, gamma, p = problem.n, problem.gamma, problem.p
    if K < 1:
        raise ValidationError("grid resolution K must be >= 1")
    Q = 10 * K if Q is None else int(Q)
    if n * K * (Q + 1) > max_work:
        raise BudgetError(f"oracle work n*K*Q = {n * K * (Q + 1):.3g} exceeds {max_work:.3g}; use smaller n or K")
    budget = n * gamma ** p
    grid = np.linspace(0.0, budget ** (1.0 / p), K)
    vals = np.empty((n, K))
    for k in range(K):
        gaps, _ = upper_terms(params, problem.metric, problem.X, problem.delta + np.full(n, grid[k]))
        vals[:, k] = gaps

    if budget > 0:
        cost = np.ceil(grid ** p / (budget / Q) - 1e-9).astype(np.int64)
    else:
        cost = np.zeros(K, dtype=np.int64)
    choice = _mck_dp(vals, cost, Q)
    radii = grid[choice]
    value = float(np.mean(vals[np.arange(n), choice]))
    return value, RadiusSet(radii)


def _mck_dp(vals: Array, cost: Array, Q: int) -> Array:
    """Pick one option per row maximising total value with total cost <= Q."""
    n, K = vals.shape
    best = np.zeros(Q + 1)
    picks = np.zeros((n, Q + 1), dtype=np.int64)
    for i in range(n):
        new = np.full(Q + 1, -np.inf)
        pick = np.zeros(Q + 1, dtype=np.int64)
        for k in range(K):
            c = int(cost[k])
            if c > Q:
                continue
            cand = best[: Q + 1 - c] + vals[i, k]
            upd = cand > new[c:]
            new[c:] = np.where(upd, cand, new[c:])
            pick[c:] = np.where(upd, k, pick[c:])
        best = new
        picks[i] = pick
    choice = np.zeros(n, dtype=np.int64)
    b = Q
    for i in range(n - 1, -1, -1):
        choice[i] = picks[i, b]
        b -= int(cost[choice[i]])
    return choice


def hoeffding_n(tau: float, lam: float) -> int:
    """Individuals needed for the empirical estimate to be within ``tau`` w.p. ``1 - lam``."""
    if not tau > 0:
        raise ValidationError("tau must be positive")
    if not 0 < lam < 1:
        raise ValidationError("lambda must lie in (0, 1)")
    return max(1, math.ceil(math.log(2.0 / lam) / (2.0 * tau * tau)))


def certify_dif(params: ModelParams, problem: DifProblem, seed: int = 0, lower_steps: int = 50,
                upper_iters: int = 300, upper_starts: int = 5, oracle: str = "auto", K: int = 500,
                hoeffding: tuple[float, float] | None = None, warm: tuple | None = None) -> DifReport:
    """Lower and upper DIF bounds with solver traces.

    With ``oracle="auto"`` the grid oracle runs when ``n <= 50`` and the
    reported certificate is ``max(solver, oracle)``. ``warm`` carries
    ``(eps_lower, phi, eps_upper, radii)`` from a smaller ``gamma``; those
    assignments stay feasible and keep both bounds monotone in ``gamma``.
    """
    lo, pert, lo_trace = dif_lower(params, problem, steps=lower_steps, seed=seed)
    lo_phi = pert.phi
    if warm is not None and warm[0] > lo:
        lo, lo_phi = warm[0], project_perturbations(warm[1], problem.metric, problem.gamma, problem.p)

    init = project_radii(problem.metric.norm(lo_phi), problem.gamma, problem.p)
    if warm is not None:
        init = project_radii(warm[3], problem.gamma, problem.p)
    up, radii, up_trace = dif_upper(params, problem, iters=upper_iters, starts=upper_starts, seed=seed, init=init)
    r = radii.radii
    if warm is not None and warm[2] > up:
        up, r = warm[2], project_radii(warm[3], problem.gamma, problem.p)
    solver = up

    eps_oracle = None
    label = "solver-converged"
    if oracle == "always" or (oracle == "auto" and problem.n <= ORACLE_MAX_N):
        eps_oracle, o_radii = dif_oracle(params, problem, K=K)
        if eps_oracle > up:
            up, r = eps_oracle, o_radii.radii
        label = "oracle-checked"

    local, _ = upper_terms(params, problem.metric, problem.X, np.full(problem.n, float(problem.delta)))
    hd = None
    if hoeffding is not None:
        tau, lam = hoeffding
        hd = {"tau": tau, "lambda": lam, "n_required": hoeffding_n(tau, lam), "n_used": problem.n}
    return DifReport(
        delta=float(problem.delta), gamma=float(problem.gamma), p=problem.p, n=problem.n,
        eps_lower=float(lo), eps_upper=float(up), eps_upper_solver=float(solver), certificate=label,
        local_upper=local.tolist(), upper_trace=[float(v) for v in up_trace],
        lower_trace=[float(v) for v in lo_trace], iterations=len(up_trace), eps_oracle=eps_oracle,
        hoeffding=hd, metric_kind=problem.metric.kind, seed=seed,
        extra={"lower_phi_mass": budget_mass(problem.metric.norm(lo_phi), problem.p),
               "upper_radii_mass": budget_mass(r, problem.p), "_phi": lo_phi, "_radii": r},
    )


def sweep_gamma(params: ModelParams, metric: FairMetric, X, delta: float, gammas, p: int = 2, seed: int = 0,
                **kw) -> list[DifReport]:
    """Certify at increasing ``gamma`` values, warm-starting each from the last."""
    reports = []
    warm = None
    for g in sorted(gammas):
        rep = certify_dif(params, DifProblem(X, delta, g, metric, p), seed=seed, warm=warm, **kw)
        warm = (rep.eps_lower, rep.extra["_phi"], rep.eps_upper, rep.extra["_radii"])
        reports.append(rep)
    return reports
