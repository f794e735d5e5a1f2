"""Dense tanh networks with exact reverse-mode gradients and Adam.

Everything is float64. Parameters are treated as immutable values: the
optimizer returns fresh arrays instead of writing in place, which keeps the
stale-cache check in :func:`backward` meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels

ACTIVATIONS = ("tanh", "identity")
MLP_FORMAT = "merl-mlp"
MLP_FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class UsageError(RuntimeError):
    """API called out of order, e.g. backward with a foreign cache."""


class NumericalError(ArithmeticError):
    """A NaN or inf showed up where a finite number is required."""

    def __init__(self, message: str, location: str | None = None, stats: dict | None = None):
        super().__init__(message if location is None else f"{message} at {location}")
        self.location = location
        self.stats = stats or {}


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Ordered ``(weight[out, in], bias[out])`` pairs.

    ``output_activation`` may also be ``"tanh"`` so a trunk can end on its
    embedding layer. The same class doubles as the gradient container.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("an MLP needs at least one layer")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ConfigurationError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} gives {prev_out}"
                )
            prev_out = w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        if len(arrays) != 2 * len(self.layers):
            raise ConfigurationError("array count does not match layer count")
        layers = tuple((arrays[2 * i], arrays[2 * i + 1]) for i in range(len(self.layers)))
        return MlpParams(layers, self.hidden_activation, self.output_activation)

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


ParamGrads = MlpParams


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    output_activation: str = "identity",
    output_scale: float = 1.0,
) -> MlpParams:
    """Fan-in scaled uniform weights, zero biases.

    ``output_scale`` shrinks the last layer; policy heads conventionally
    start near zero so the initial policy is close to uniform.
    """
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ConfigurationError(f"bad layer sizes {list(sizes)}")
    layers = []
    n = len(sizes) - 1
    for i in range(n):
        fan_in, fan_out = int(sizes[i]), int(sizes[i + 1])
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if i == n - 1:
            w = w * output_scale
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(tuple(layers), "tanh", output_activation)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    params: MlpParams
    inputs: tuple[np.ndarray, ...]   # input to each layer
    outputs: tuple[np.ndarray, ...]  # post-activation output of each layer
    squeeze: bool


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else z


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a vector or on a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ConfigurationError(f"input shape {x.shape} does not fit in_dim={params.in_dim}")
    inputs, outputs = [], []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        inputs.append(h)
        h = h @ w.T
        h += b
        if (params.output_activation if i == last else params.hidden_activation) == "tanh":
            np.tanh(h, out=h)
        outputs.append(h)
    out = h[0] if squeeze else h
    return out, ForwardCache(params, tuple(inputs), tuple(outputs), squeeze)


def backward(
    params: MlpParams, cache: ForwardCache, output_grad: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. params and input.

    For a batch the parameter gradient is summed over rows.
    """
    if cache.params is not params:
        raise UsageError("cache was produced by a different parameter set")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise UsageError(f"output_grad shape {g.shape} != output shape {cache.outputs[-1].shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        w = params.layers[i][0]
        if (params.output_activation if i == last else params.hidden_activation) == "tanh":
            y = cache.outputs[i]
            g = g * (1.0 - y * y)
        grads.append((g.T @ cache.inputs[i], np.add.reduce(g, axis=0)))
        g = g @ w
    grads.reverse()
    input_grad = g[0] if cache.squeeze else g
    return MlpParams(tuple(grads), params.hidden_activation, params.output_activation), input_grad


# -- optimizer ----------------------------------------------------------------


def _leaves(tree) -> list[np.ndarray]:
    if isinstance(tree, np.ndarray):
        return [tree]
    if isinstance(tree, (list, tuple)):
        return list(tree)
    return tree.arrays()


def _rebuild(tree, arrays: list[np.ndarray]):
    if isinstance(tree, np.ndarray):
        return arrays[0]
    if isinstance(tree, tuple):
        return tuple(arrays)
    if isinstance(tree, list):
        return list(arrays)
    return tree.with_arrays(arrays)


@dataclass(eq=False)
class AdamState:
    """Moment accumulators kept as flat buffers in leaf order.

    :meth:`moments` gives per-leaf views shaped like the parameters.
    """

    m: np.ndarray
    v: np.ndarray
    shapes: tuple[tuple[int, ...], ...]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        shapes = tuple(a.shape for a in _leaves(params))
        size = sum(math.prod(s) for s in shapes)
        return cls(np.zeros(size), np.zeros(size), shapes, 0, beta1, beta2, eps)

    def moments(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return _split(self.m, self.shapes), _split(self.v, self.shapes)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.shapes, self.step,
                         self.beta1, self.beta2, self.eps)


def _split(flat: np.ndarray, shapes) -> list[np.ndarray]:
    out, k = [], 0
    for s in shapes:
        n = math.prod(s)
        out.append(flat[k:k + n].reshape(s))
        k += n
    return out


def _flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays], dtype=np.float64)


def _raise_non_finite(arrays: list[np.ndarray], what: str) -> None:
    for k, a in enumerate(arrays):
        if not np.isfinite(a).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(a))[0])
            raise NumericalError(f"non-finite {what}", location=f"leaf {k} index {bad}")


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``.

    Works on an :class:`MlpParams`, a list of arrays, or anything exposing
    ``arrays()`` / ``with_arrays()``. A non-finite gradient raises
    :class:`NumericalError` naming the leaf and index.
    """
    p_leaves, g_leaves = _leaves(params), _leaves(grads)
    if len(p_leaves) != len(g_leaves) or len(p_leaves) != len(state.shapes):
        raise ConfigurationError("params, grads and optimizer state have different structure")
    for p, g, s in zip(p_leaves, g_leaves, state.shapes):
        if p.shape != g.shape or p.shape != s:
            raise ConfigurationError(f"shape mismatch {p.shape} / {g.shape} / {s}")
    g_flat = _flatten(g_leaves)
    if not np.isfinite(g_flat).all():
        _raise_non_finite(g_leaves, "gradient")
    t = state.step + 1
    p_new, m, v = kernels.adam(_flatten(p_leaves), g_flat, state.m, state.v, lr,
                               state.beta1, state.beta2, state.eps, t)
    new_state = AdamState(m, v, state.shapes, t, state.beta1, state.beta2, state.eps)
    return _rebuild(params, _split(p_new, state.shapes)), new_state


def global_norm(grads) -> float:
    # Per leaf, so appending all-zero leaves leaves the result bit-for-bit unchanged.
    return math.sqrt(sum(float(np.vdot(g, g)) for g in _leaves(grads)))


def clip_by_global_norm(grads, max_norm: float):
    """Scale gradients down so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return _rebuild(grads, [g * scale for g in _leaves(grads)]), norm


# -- testing oracle -----------------------------------------------------------


def finite_difference_gradient(loss_fn: Callable[..., float], params, h: float = 1e-6):
    """Central differences ``(f(p+h) - f(p-h)) / 2h`` for every scalar parameter."""
    if not h > 0:
        raise ConfigurationError("step h must be positive")
    leaves = [np.array(a, dtype=np.float64, copy=True) for a in _leaves(params)]
    out = [np.zeros_like(a) for a in leaves]

    def evaluate() -> float:
        val = float(loss_fn(_rebuild(params, [a.copy() for a in leaves])))
        if not np.isfinite(val):
            raise NumericalError("loss is not finite during finite differencing")
        return val

    for k, a in enumerate(leaves):
        flat = a.reshape(-1)
        gflat = out[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return _rebuild(params, out)


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    worst = 0.0
    for a, n in zip(_leaves(analytic), _leaves(numeric)):
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# -- serialization ------------------------------------------------------------


def mlp_to_dict(params: MlpParams) -> dict:
    """JSON-ready snapshot: row-major weights, float64 values via repr."""
    return {
        "format": MLP_FORMAT,
        "version": MLP_FORMAT_VERSION,
        "hidden_activation": params.hidden_activation,
        "output_activation": params.output_activation,
        "layers": [
            {
                "in": int(w.shape[1]),
                "out": int(w.shape[0]),
                "weight": [float(x) for x in w.reshape(-1)],
                "bias": [float(x) for x in b],
            }
            for w, b in params.layers
        ],
    }


def mlp_from_dict(data: dict) -> MlpParams:
    if data.get("format") != MLP_FORMAT:
        raise ConfigurationError(f"not an MLP snapshot: format={data.get('format')!r}")
    if data.get("version") != MLP_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported MLP snapshot version {data.get('version')}")
    layers = []
    for layer in data["layers"]:
        w = np.asarray(layer["weight"], dtype=np.float64).reshape(layer["out"], layer["in"])
        b = np.asarray(layer["bias"], dtype=np.float64)
        layers.append((w, b))
    return MlpParams(tuple(layers), data["hidden_activation"], data["output_activation"])


def save_mlp(params: MlpParams, path) -> None:
    with open(path, "w") as f:
        json.dump(mlp_to_dict(params), f)


def load_mlp(path) -> MlpParams:
    with open(path) as f:
        return mlp_from_dict(json.load(f))
