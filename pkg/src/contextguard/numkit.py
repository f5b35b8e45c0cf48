"""Dense numeric kernels: activations, a gated fusion cell, scaled
dot-product attention weights, SmoothL1, momentum/Adam optimizers, and a
central-difference gradient checker.

Everything operates on float64 numpy arrays. Kernels accept a single
vector or a stack of vectors; the feature axis is always last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeMismatchError

Array = np.ndarray


# ---------------------------------------------------------------------------
# Activations and small helpers
# ---------------------------------------------------------------------------


def sigmoid(x: Array) -> Array:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: Array, axis: int = -1) -> Array:
    """Stable softmax along `axis`."""
    x = np.asarray(x, dtype=float)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Array, axis: int = -1) -> Array:
    x = np.asarray(x, dtype=float)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def ensure_finite(arr: Array, context: str) -> None:
    """NaN/Inf is an error state for every tensor in this package."""
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {context}")


def init_weight(rng: np.random.Generator, rows: int, cols: int) -> Array:
    """Uniform in +/- 1/sqrt(fan_in); fan_in is the input width `cols`."""
    bound = 1.0 / math.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


# ---------------------------------------------------------------------------
# Gated fusion cell
# ---------------------------------------------------------------------------


@dataclass
class GruCellParams:
    """Weights of one gated cell over a memory vector and an incoming message.

    Gate inputs are the concatenation [message, memory] (width 2D); the
    candidate state mixes the message and the reset-gated memory.
    """

    w_reset: Array  # (D, 2D)
    w_update: Array  # (D, 2D)
    b_reset: Array  # (D,)
    b_update: Array  # (D,)
    w_cand_message: Array  # (D, D)
    w_cand_memory: Array  # (D, D)

    @property
    def dim(self) -> int:
        return self.w_reset.shape[0]

    def validate(self) -> None:
        d = self.dim
        expected = {
            "w_reset": (d, 2 * d),
            "w_update": (d, 2 * d),
            "b_reset": (d,),
            "b_update": (d,),
            "w_cand_message": (d, d),
            "w_cand_memory": (d, d),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeMismatchError(f"{name}: expected {shape}, got {got}")

    @classmethod
    def initialize(cls, dim: int, rng: np.random.Generator) -> "GruCellParams":
        return cls(
            w_reset=init_weight(rng, dim, 2 * dim),
            w_update=init_weight(rng, dim, 2 * dim),
            b_reset=np.zeros(dim),
            b_update=np.zeros(dim),
            w_cand_message=init_weight(rng, dim, dim),
            w_cand_memory=init_weight(rng, dim, dim),
        )

    def param_dict(self, prefix: str = "") -> dict[str, Array]:
        """Live references, suitable for in-place optimizer updates."""
        return {
            f"{prefix}w_reset": self.w_reset,
            f"{prefix}w_update": self.w_update,
            f"{prefix}b_reset": self.b_reset,
            f"{prefix}b_update": self.b_update,
            f"{prefix}w_cand_message": self.w_cand_message,
            f"{prefix}w_cand_memory": self.w_cand_memory,
        }


def gru_step(
    memory: Array, message: Array, params: GruCellParams
) -> tuple[Array, Array, Array]:
    """One gated fusion step.

    memory, message: (..., D). Returns (next_memory, reset_gate, update_gate),
    all (..., D). The reset gate drops or enhances parts of the memory before
    it enters the candidate state; the update gate controls how much of the
    memory is carried over unchanged. Both gates are elementwise in (0, 1).
    """
    memory = np.asarray(memory, dtype=float)
    message = np.asarray(message, dtype=float)
    if memory.shape != message.shape:
        raise ShapeMismatchError(
            f"memory {memory.shape} vs message {message.shape}"
        )
    if memory.shape[-1] != params.dim:
        raise ShapeMismatchError(
            f"feature dim {memory.shape[-1]} does not match cell dim {params.dim}"
        )
    joint = np.concatenate([message, memory], axis=-1)
    reset = sigmoid(joint @ params.w_reset.T + params.b_reset)
    update = sigmoid(joint @ params.w_update.T + params.b_update)
    candidate = np.tanh(
        message @ params.w_cand_message.T + (reset * memory) @ params.w_cand_memory.T
    )
    next_memory = update * memory + (1.0 - update) * candidate
    return next_memory, reset, update


def gru_forward(
    memory: Array, message: Array, params: GruCellParams
) -> tuple[Array, dict]:
    """gru_step plus the cache needed by gru_backward."""
    next_memory, reset, update = gru_step(memory, message, params)
    candidate_pre = np.asarray(message, float) @ params.w_cand_message.T + (
        reset * memory
    ) @ params.w_cand_memory.T
    cache = {
        "memory": np.asarray(memory, float),
        "message": np.asarray(message, float),
        "reset": reset,
        "update": update,
        "candidate": np.tanh(candidate_pre),
    }
    return next_memory, cache


def _flat2(x: Array) -> Array:
    # (..., D) -> (batch, D) view for grad accumulation
    return x.reshape(-1, x.shape[-1])


def gru_backward(
    d_next: Array, cache: dict, params: GruCellParams
) -> tuple[Array, Array, dict[str, Array]]:
    """Backprop one gated fusion step.

    d_next: gradient w.r.t. next_memory, shape (..., D). Returns
    (d_message, d_memory, param_grads) where param_grads keys match
    GruCellParams.param_dict("").
    """
    memory, message = cache["memory"], cache["message"]
    reset, update, candidate = cache["reset"], cache["update"], cache["candidate"]

    d_update = d_next * (memory - candidate)
    d_memory = d_next * update
    d_candidate = d_next * (1.0 - update)

    d_zc = d_candidate * (1.0 - candidate**2)
    d_message = d_zc @ params.w_cand_message
    d_gated = d_zc @ params.w_cand_memory  # grad w.r.t. reset * memory
    d_reset = d_gated * memory
    d_memory = d_memory + d_gated * reset

    d_zu = d_update * update * (1.0 - update)
    d_zr = d_reset * reset * (1.0 - reset)
    joint = np.concatenate([message, memory], axis=-1)

    jf, zcf, zuf, zrf = _flat2(joint), _flat2(d_zc), _flat2(d_zu), _flat2(d_zr)
    grads = {
        "w_cand_message": zcf.T @ _flat2(message),
        "w_cand_memory": zcf.T @ _flat2(reset * memory),
        "w_update": zuf.T @ jf,
        "w_reset": zrf.T @ jf,
        "b_update": zuf.sum(axis=0),
        "b_reset": zrf.sum(axis=0),
    }
    d_joint = d_zu @ params.w_update + d_zr @ params.w_reset
    dim = params.dim
    d_message = d_message + d_joint[..., :dim]
    d_memory = d_memory + d_joint[..., dim:]
    return d_message, d_memory, grads


# ---------------------------------------------------------------------------
# Attention weighting
# ---------------------------------------------------------------------------


def attention_weights(query: Array, keys: list[Array]) -> list[float]:
    """Normalized exponential weights of scaled dot products.

    query: (Da,); keys: non-empty sequence of (Da,). The dot products are
    scaled by 1/sqrt(Da) before normalization. The weights sum to 1 and each
    lies in (0, 1].
    """
    if len(keys) == 0:
        raise ValueError("attention_weights requires at least one key")
    q = np.asarray(query, dtype=float)
    ks = [np.asarray(k, dtype=float) for k in keys]
    for k in ks:
        if k.shape != q.shape:
            raise ShapeMismatchError(f"key shape {k.shape} vs query {q.shape}")
    scores = np.array([float(q @ k) for k in ks]) / math.sqrt(q.size)
    return [float(w) for w in softmax(scores)]


# ---------------------------------------------------------------------------
# SmoothL1
# ---------------------------------------------------------------------------


def smooth_l1(x: Array, y: Array, alpha: float = 1.0) -> float:
    """Mean SmoothL1 between two same-shaped arrays.

    Per element: 0.5*d^2 for |d| <= alpha, else alpha*(|d| - 0.5*alpha).
    The two branches meet with matching value and slope at |d| = alpha.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"{x.shape} vs {y.shape}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    d = x - y
    a = np.abs(d)
    per = np.where(a <= alpha, 0.5 * d * d, alpha * (a - 0.5 * alpha))
    return float(per.mean())


def smooth_l1_grad(x: Array, y: Array, alpha: float = 1.0) -> Array:
    """d smooth_l1(x, y) / dx, same shape as x (mean reduction included)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"{x.shape} vs {y.shape}")
    d = x - y
    g = np.clip(d, -alpha, alpha)
    return g / d.size


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """State of a first-order optimizer over a named parameter set.

    kind is "momentum" (velocity accumulation) or "adam" (bias-corrected
    first/second moments). The learning rate is multiplied by decay_factor
    once per decay_interval steps when an interval is configured.
    """

    kind: str
    learning_rate: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.1
    decay_interval: int | None = None
    step: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def effective_lr(self) -> float:
        if self.decay_interval:
            return self.learning_rate * self.decay_factor ** (
                self.step // self.decay_interval
            )
        return self.learning_rate


def optimizer_step(
    params: dict[str, Array], grads: dict[str, Array], state: OptimizerState
) -> None:
    """Apply one update in place; advances state.step by one."""
    lr = state.effective_lr()
    for name in sorted(params):
        p = params[name]
        g = np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{name}: grad {g.shape} vs param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient for {name!r} at step {state.step}"
            )
        slot = state.slots.setdefault(name, {})
        if state.kind == "momentum":
            v = slot.setdefault("velocity", np.zeros_like(p))
            v *= state.momentum
            v += g
            p -= lr * v
        else:
            m = slot.setdefault("m", np.zeros_like(p))
            v = slot.setdefault("v", np.zeros_like(p))
            t = state.step + 1
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step += 1


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f,
    params: dict[str, Array],
    analytic: dict[str, Array],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    f(params) must return a scalar and must not cache values across calls;
    the arrays in `params` are perturbed in place and restored. The error
    for each scalar parameter is |analytic - numeric| / max(1, |analytic|).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    worst = 0.0
    for name in sorted(params):
        arr = params[name]
        ana = np.asarray(analytic[name], dtype=float)
        if ana.shape != arr.shape:
            raise ShapeMismatchError(f"{name}: {ana.shape} vs {arr.shape}")
        flat = arr.reshape(-1)
        aflat = ana.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            f_plus = f(params)
            flat[idx] = orig - epsilon
            f_minus = f(params)
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DivergenceError(
                    f"non-finite objective while checking {name!r}[{idx}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(aflat[idx] - numeric) / max(1.0, abs(aflat[idx]))
            if err > worst:
                worst = err
    return worst
