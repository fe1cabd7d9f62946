"""Dense ReLU network engine.

Forward passes, hand-written reverse-mode gradients for a small set of
registered losses, Adam updates, and a projected gradient ascent routine
used by every lower-bound computation in the package.

All arithmetic is float64. Inputs may be a single feature vector of shape
``(m,)`` or a batch of shape ``(n, m)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from faircert.errors import DimensionError, UnsupportedOpError, ValidationError

Array = np.ndarray


@dataclass
class ModelParams:
    """Weights and biases of a dense ReLU network with a softmax head.

    ``layers[l] = (W, b)`` with ``W`` of shape ``(out, in)``. ReLU follows
    every layer except the last, whose outputs are the logits.
    """

    layers: list[tuple[Array, Array]]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        fixed = []
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if prev_out is not None and w.shape[1] != prev_out:
                raise DimensionError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {prev_out}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i} has non-finite entries")
            prev_out = w.shape[0]
            fixed.append((w, b))
        self.layers = fixed

    @property
    def n_inputs(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.n_inputs] + [w.shape[0] for w, _ in self.layers]

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int = 0) -> "ModelParams":
        """He-normal initialisation for layer widths ``sizes`` (inputs first)."""
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            layers.append((w, np.zeros(fan_out)))
        return cls(layers)

    def zeros_like(self) -> "ModelParams":
        return ModelParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def arrays(self) -> list[Array]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[Array]) -> "ModelParams":
        return cls([(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)])

    def flat(self) -> Array:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: Array) -> "ModelParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        if pos != len(vec):
            raise DimensionError(f"flat vector has {len(vec)} entries, model has {pos}")
        return ModelParams.from_arrays(out)

    def to_dict(self) -> dict:
        return {
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in self.layers],
            "activation": "relu",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        if d.get("activation", "relu") != "relu":
            raise ValidationError(f"unsupported activation {d.get('activation')!r}")
        try:
            layers = [(np.array(layer["w"], dtype=np.float64), np.array(layer["b"], dtype=np.float64))
                      for layer in d["layers"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed model: {exc}") from exc
        return cls(layers)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text(), parse_constant=_reject_constant))


def _reject_constant(token):
    raise ValidationError(f"non-finite value {token} in model file")


def tree_map(fn: Callable, *trees: ModelParams) -> ModelParams:
    """Apply ``fn`` leafwise across parameter trees of identical shape."""
    return ModelParams.from_arrays([fn(*leaves) for leaves in zip(*(t.arrays() for t in trees))])


def _as_batch(params: ModelParams, x) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.n_inputs:
        raise DimensionError(f"input of shape {x.shape} does not match {params.n_inputs} network inputs")
    return X, single


def softmax(z: Array) -> Array:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(p: Array, dp: Array) -> Array:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def forward_cache(params: ModelParams, X: Array) -> tuple[Array, list[tuple[Array, Array]]]:
    """Return logits and the per-layer ``(input, pre_activation)`` cache."""
    cache = []
    a = X
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = a @ w.T + b
        cache.append((a, z))
        a = np.maximum(z, 0.0) if i < last else z
    return a, cache


def backward(params: ModelParams, cache, dlogits: Array, need_params: bool = True):
    """Backpropagate ``dlogits`` through the cached forward pass.

    Returns ``(param_grads or None, d_input)``. ReLU'(0) is taken as 0.
    """
    g = dlogits
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        a, _ = cache[i]
        if need_params:
            grads.append((g.T @ a, g.sum(axis=0)))
        g = g @ w
        if i > 0:
            g = g * (cache[i - 1][1] > 0)
    pg = ModelParams(grads[::-1]) if need_params else None
    return pg, g


def logits(params: ModelParams, x) -> Array:
    X, single = _as_batch(params, x)
    z, _ = forward_cache(params, X)
    return z[0] if single else z


def forward(params: ModelParams, x) -> Array:
    """Class probabilities for one input ``(m,)`` or a batch ``(n, m)``."""
    return softmax(logits(params, x))


def predict(params: ModelParams, X) -> Array:
    return np.argmax(logits(params, X), axis=-1)


# --------------------------------------------------------------------------
# Loss registry
# --------------------------------------------------------------------------

LOSSES: dict[str, type] = {}


def register_loss(name: str):
    def deco(cls):
        cls.name = name
        LOSSES[name] = cls
        return cls
    return deco


class Loss:
    """A scalar objective with a hand-derived gradient.

    Subclasses implement ``value_and_grad(params, X, Y) -> (float, ModelParams)``.
    """

    name = "abstract"

    def value_and_grad(self, params: ModelParams, X: Array, Y: Array):
        raise NotImplementedError

    def value(self, params: ModelParams, X: Array, Y: Array) -> float:
        return self.value_and_grad(params, X, Y)[0]

    def __call__(self, params, X, Y) -> float:
        return self.value(params, X, Y)


def make_loss(name: str, **kwargs) -> Loss:
    try:
        cls = LOSSES[name]
    except KeyError:
        raise UnsupportedOpError(f"no loss registered as {name!r}; known: {sorted(LOSSES)}") from None
    return cls(**kwargs)


@register_loss("constant")
class ConstantLoss(Loss):
    def __init__(self, value: float = 0.0):
        self.c = float(value)

    def value_and_grad(self, params, X, Y):
        return self.c, params.zeros_like()


def cross_entropy_terms(params: ModelParams, X: Array, Y: Array):
    """Mean cross-entropy, its gradient w.r.t. logits, and the forward cache."""
    z, cache = forward_cache(params, X)
    Y = np.asarray(Y, dtype=np.int64)
    n = X.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    value = -logp[np.arange(n), Y].mean()
    dz = np.exp(logp)
    dz[np.arange(n), Y] -= 1.0
    return value, dz / n, cache


@register_loss("ce")
class CrossEntropy(Loss):
    def value_and_grad(self, params, X, Y):
        value, dz, cache = cross_entropy_terms(params, X, Y)
        g, _ = backward(params, cache, dz)
        return float(value), g


def grad(params: ModelParams, batch, loss) -> ModelParams:
    """Gradient of a registered ``loss`` at ``params`` on ``batch = (X, Y)``."""
    if isinstance(loss, str):
        loss = make_loss(loss)
    if not isinstance(loss, Loss) or type(loss).name not in LOSSES:
        raise UnsupportedOpError(f"{loss!r} is not a registered loss; compose from {sorted(LOSSES)}")
    X, Y = batch
    X, _ = _as_batch(params, X)
    _, g = loss.value_and_grad(params, X, np.asarray(Y))
    return g


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: ModelParams | None = None
    v: ModelParams | None = None

    def __post_init__(self):
        if self.m is None:
            self.m = self.params.zeros_like()
        if self.v is None:
            self.v = self.params.zeros_like()
        if self.step < 0:
            raise ValidationError("step counter must be non-negative")


def adam_step(state: TrainState, gradient: ModelParams) -> TrainState:
    """One bias-corrected Adam update; returns a new state."""
    if [a.shape for a in gradient.arrays()] != [a.shape for a in state.params.arrays()]:
        raise DimensionError("gradient is not shaped like the parameters")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = tree_map(lambda m_, g: b1 * m_ + (1 - b1) * g, state.m, gradient)
    v = tree_map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, state.v, gradient)
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    params = tree_map(
        lambda p, m_, v_: p - state.lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps),
        state.params, m, v,
    )
    return TrainState(params, state.lr, b1, b2, state.eps, t, m, v)


# --------------------------------------------------------------------------
# Projected gradient ascent
# --------------------------------------------------------------------------

@dataclass
class AttackConfig:
    """Settings for :func:`pgd_maximize`.

    ``geometry`` is an optional shape matrix (or its diagonal) ``G``; steps
    then follow ``G g / sqrt(g' G g)``, which has unit length in the metric
    ``sqrt(v' G^-1 v)``. ``sampler(rng)`` draws a feasible start for the
    second and later restarts.
    """

    steps: int = 20
    step_size: float = 0.1
    restarts: int = 3
    projection: Callable[[Array], Array] | None = None
    sampler: Callable[[np.random.Generator], Array] | None = None
    geometry: Array | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1 or not self.step_size > 0:
            raise ValidationError("AttackConfig needs steps >= 1, restarts >= 1, step_size > 0")


def _unit_direction(g: Array, geometry) -> Array:
    if geometry is None:
        d = g
    else:
        G = np.asarray(geometry)
        d = g * G if G.ndim == 1 else g @ G
    norm = np.sqrt(np.maximum(np.sum(g * d, axis=1, keepdims=True), 0.0))
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, d / safe, 0.0)


def pgd_maximize(objective, start, cfg: AttackConfig, seed=None):
    """Maximise ``objective`` by projected normalised gradient ascent.

    ``objective(points) -> (values, grads)``. For a 2-D ``start`` each row is
    an independent problem and ``values`` has one entry per row. The best
    finite iterate over all restarts is returned as ``(points, values)``;
    the start itself counts as an iterate. A row whose objective turns
    non-finite stops for the rest of that restart.
    """
    rng = np.random.default_rng(seed)
    x0 = np.asarray(start, dtype=np.float64)
    single = x0.ndim == 1
    proj = cfg.projection or (lambda p: p)

    if single:
        def obj(P):
            v, g = objective(P[0])
            return np.atleast_1d(np.asarray(v, dtype=np.float64)), np.asarray(g, dtype=np.float64)[None]

        def project(P):
            return np.asarray(proj(P[0]), dtype=np.float64)[None]

        def sample():
            return np.asarray(cfg.sampler(rng), dtype=np.float64)[None]
    else:
        def obj(P):
            v, g = objective(P)
            return np.asarray(v, dtype=np.float64).reshape(-1), np.asarray(g, dtype=np.float64)

        def project(P):
            return np.asarray(proj(P), dtype=np.float64)

        def sample():
            return np.asarray(cfg.sampler(rng), dtype=np.float64)

    X0 = x0[None] if single else x0
    best_x = X0.copy()
    best_v = np.full(X0.shape[0], -np.inf)

    for r in range(cfg.restarts):
        if r == 0:
            x = X0.copy()
        elif cfg.sampler is not None:
            x = sample()
        else:
            x = project(X0 + cfg.step_size * rng.standard_normal(X0.shape))
        alive = np.ones(X0.shape[0], dtype=bool)
        for t in range(cfg.steps + 1):
            v, g = obj(x)
            ok = np.isfinite(v) & np.all(np.isfinite(g), axis=1)
            alive &= ok
            better = alive & (v > best_v)
            best_v = np.where(better, v, best_v)
            best_x[better] = x[better]
            if t == cfg.steps or not alive.any():
                break
            g = np.where(alive[:, None], g, 0.0)
            x_new = project(x + cfg.step_size * _unit_direction(g, cfg.geometry))
            x = np.where(alive[:, None], x_new, x)

    if single:
        return best_x[0], float(best_v[0])
    return best_x, best_v
