"""Self-attention scores under the supported positional-encoding schemes.

Euler variants rotate the polar form of queries and keys:

    theta_q' = delta * theta_q + bias + j * g
    theta_k' = delta * theta_k + j * g

and score with the real dot product of the inverse-transformed vectors, so
score[m, n] = sum_t lq lk cos(delta (theta_q - theta_k) + bias + (m - n) g).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .euler import ConfigurationError, PolarPair, euler_transform, inverse_transform, rotate
from .tensor import Tensor

MASK_VALUE = -1e30


class EncodingKind(str, enum.Enum):
    NONE = "none"
    LEARNED_ABS = "learned_abs"
    SINUSOIDAL = "sinusoidal"
    ROPE = "rope"
    ALIBI = "alibi"
    EULER_VANILLA = "euler_vanilla"
    EULER_ADAPTIVE = "euler_adaptive"


BASELINE_KINDS = frozenset(
    {
        EncodingKind.NONE,
        EncodingKind.LEARNED_ABS,
        EncodingKind.SINUSOIDAL,
        EncodingKind.ROPE,
        EncodingKind.ALIBI,
    }
)


@dataclass(frozen=True)
class EncodingSpec:
    """Positional scheme of the attention stack.

    ``learnable_frequencies`` and ``differential_rotation`` exist for the
    ablation variants; they only apply to the Euler kinds.
    """

    kind: EncodingKind = EncodingKind.EULER_ADAPTIVE
    use_rotary_input_embedding: bool = True
    angle_base: float = 10000.0
    learnable_frequencies: bool = False
    differential_rotation: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", EncodingKind(self.kind))
        if self.angle_base <= 0:
            raise ConfigurationError("angle_base must be positive")

    @property
    def is_euler(self) -> bool:
        return self.kind in (EncodingKind.EULER_VANILLA, EncodingKind.EULER_ADAPTIVE)

    @property
    def additive_position(self) -> str | None:
        """Which additive input embedding is used: 'learned', 'sinusoidal' or None."""
        if self.kind in (EncodingKind.LEARNED_ABS,) or self.is_euler:
            return "learned"
        if self.kind is EncodingKind.SINUSOIDAL:
            return "sinusoidal"
        return None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "use_rotary_input_embedding": self.use_rotary_input_embedding,
            "angle_base": self.angle_base,
            "learnable_frequencies": self.learnable_frequencies,
            "differential_rotation": self.differential_rotation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingSpec":
        return cls(**d)


@dataclass(frozen=True)
class FrequencySchedule:
    g: np.ndarray

    @classmethod
    def build(cls, d_head: int, angle_base: float = 10000.0) -> "FrequencySchedule":
        if d_head % 2:
            raise ConfigurationError(f"head dimension must be even, got {d_head}")
        t = np.arange(d_head // 2, dtype=np.float64)
        return cls(angle_base ** (-2.0 * t / d_head))

    @classmethod
    def zeros(cls, d_head: int) -> "FrequencySchedule":
        return cls(np.zeros(d_head // 2))

    def angles(self, positions) -> np.ndarray:
        return np.asarray(positions, dtype=np.float64)[:, None] * self.g[None, :]


@dataclass
class AdaptiveParams:
    """Per-head phase scale ``delta`` and bias, shape (h, d_head/2)."""

    delta: Tensor
    bias: Tensor
    frozen: bool = False

    @classmethod
    def init(cls, heads: int, half: int, frozen: bool = False, delta_init: float = 1.0):
        trainable = not frozen
        return cls(
            Tensor(np.full((heads, half), delta_init), requires_grad=trainable),
            Tensor(np.zeros((heads, half)), requires_grad=trainable),
            frozen,
        )


@dataclass
class RotaryInputEmbedding:
    psi: Tensor

    @classmethod
    def init(cls, max_len: int, d: int) -> "RotaryInputEmbedding":
        return cls(Tensor(np.zeros((max_len, d // 2)), requires_grad=True))

    @property
    def max_len(self) -> int:
        return self.psi.shape[0]


# ----------------------------------------------------------------------
# input-level encodings


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    div = np.exp(-math.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: d // 2])
    return table


def encode_input(E, P, psi: RotaryInputEmbedding | None) -> Tensor:
    """Additive position embedding followed by an absolute polar rotation.

    ``E`` and ``P`` have shape (..., N, d); ``psi`` holds one rotation angle
    per position and complex dimension.
    """
    x = T.as_tensor(E) + P if P is not None else T.as_tensor(E)
    if psi is None:
        return x
    n = x.shape[-2]
    if n > psi.max_len:
        raise ConfigurationError(f"sequence length {n} exceeds max_len {psi.max_len}")
    return inverse_transform(rotate(euler_transform(x), psi.psi[:n]))


# ----------------------------------------------------------------------
# score functions


def _phase_angles(freqs, positions) -> Tensor:
    positions = np.asarray(positions, dtype=np.float64)
    if isinstance(freqs, FrequencySchedule):
        return Tensor(freqs.angles(positions))
    freqs = T.as_tensor(freqs)
    if freqs.ndim == 1:
        return Tensor(positions[:, None]) * freqs
    # per-head learnable frequencies (h, P) -> (h, N, P)
    return T.reshape(freqs, (freqs.shape[0], 1, freqs.shape[1])) * Tensor(positions[:, None])


def euler_rotate(Q, K, adapt: AdaptiveParams | None, freqs, positions=None):
    """Adaptive + differential rotation of queries and keys.

    ``Q``/``K`` have shape (..., h, N, d_head).  Returns the rotated real
    vectors and the adapted phases (before the positional term) used by the
    phase-contrastive objective.
    """
    Q, K = T.as_tensor(Q), T.as_tensor(K)
    n = Q.shape[-2]
    positions = np.arange(n) if positions is None else np.asarray(positions)
    pq, pk = euler_transform(Q), euler_transform(K)
    theta_q, theta_k = pq.phase, pk.phase
    if adapt is not None:
        h, half = adapt.delta.shape
        delta = T.reshape(adapt.delta, (h, 1, half))
        bias = T.reshape(adapt.bias, (h, 1, half))
        theta_q = delta * theta_q + bias
        theta_k = delta * theta_k
    if freqs is None:
        q_rot, k_rot = PolarPair(pq.modulus, theta_q), PolarPair(pk.modulus, theta_k)
    else:
        alpha = _phase_angles(freqs, positions)
        q_rot = rotate(PolarPair(pq.modulus, theta_q), alpha)
        k_rot = rotate(PolarPair(pk.modulus, theta_k), alpha)
    return inverse_transform(q_rot), inverse_transform(k_rot), theta_q, theta_k


def euler_scores(Q, K, adapt: AdaptiveParams | None, sched, positions=None, k_positions=None) -> Tensor:
    """Scaled (h, N, N) scores of the Euler attention kernel.

    ``k_positions`` lets keys sit at different absolute positions than queries
    (used for shift-invariance checks); it defaults to ``positions``.
    """
    d_head = T.as_tensor(Q).shape[-1]
    if k_positions is None:
        q_vec, k_vec, _, _ = euler_rotate(Q, K, adapt, sched, positions)
    else:
        q_vec, _, _, _ = euler_rotate(Q, Q, adapt, sched, positions)
        _, k_vec, _, _ = euler_rotate(K, K, adapt, sched, k_positions)
    return (q_vec @ k_vec.T) * (1.0 / math.sqrt(d_head))


def rope_rotate(x, sched: FrequencySchedule, positions=None) -> Tensor:
    """Rotate dimension pairs (t, t + d/2) by position * g_t."""
    x = T.as_tensor(x)
    n = x.shape[-2]
    positions = np.arange(n) if positions is None else np.asarray(positions)
    ang = sched.angles(positions)
    c, s = np.cos(ang), np.sin(ang)
    a, b = T.split(x, 2, axis=-1)
    return T.concat([a * c - b * s, a * s + b * c], axis=-1)


def alibi_slopes(heads: int) -> np.ndarray:
    return 2.0 ** (-8.0 * np.arange(1, heads + 1) / heads)


def alibi_bias(heads: int, n: int) -> np.ndarray:
    pos = np.arange(n)
    dist = np.abs(pos[:, None] - pos[None, :]).astype(np.float64)
    return -alibi_slopes(heads)[:, None, None] * dist[None]


def baseline_scores(Q, K, spec: EncodingSpec, positions=None) -> Tensor:
    Q, K = T.as_tensor(Q), T.as_tensor(K)
    if spec.kind not in BASELINE_KINDS:
        raise ValueError(f"not a baseline encoding: {spec.kind}")
    d_head = Q.shape[-1]
    if spec.kind is EncodingKind.ROPE:
        sched = FrequencySchedule.build(d_head, spec.angle_base)
        Q, K = rope_rotate(Q, sched, positions), rope_rotate(K, sched, positions)
    scores = (Q @ K.T) * (1.0 / math.sqrt(d_head))
    if spec.kind is EncodingKind.ALIBI:
        heads, n = Q.shape[-3], Q.shape[-2]
        scores = scores + alibi_bias(heads, n)
    return scores


def attention_mask(n: int, key_valid: np.ndarray | None = None, causal: bool = True) -> np.ndarray:
    """Boolean (…, N, N) mask of allowed (query, key) pairs.

    Padded keys are excluded; a padded query keeps itself so its row is never
    empty (its output is discarded downstream).
    """
    allowed = np.tril(np.ones((n, n), dtype=bool)) if causal else np.ones((n, n), dtype=bool)
    if key_valid is None:
        return allowed
    key_valid = np.asarray(key_valid, dtype=bool)
    allowed = allowed & key_valid[..., None, :]
    return allowed | np.eye(n, dtype=bool) & ~key_valid[..., :, None]


def attend(scores, V, causal_mask: bool = True, key_valid=None, mask: np.ndarray | None = None):
    """Masked softmax over keys followed by a weighted sum of values.

    Returns ``(output, weights)``.
    """
    scores = T.as_tensor(scores)
    n = scores.shape[-1]
    if mask is None:
        mask = attention_mask(n, key_valid, causal_mask)
    if not np.all(np.broadcast_to(mask, scores.shape).any(axis=-1)):
        raise ValueError("attention row with every key masked")
    weights = T.softmax(T.where(mask, scores, MASK_VALUE), axis=-1)
    return weights @ V, weights


# ----------------------------------------------------------------------
# long-term decay analysis


def decay_score(lambda_q, lambda_k, theta_q, theta_k, delta, bias, g, D) -> float:
    """Unscaled score sum_t lq lk cos(delta dS + b + D g) at continuous distance D."""
    lq, lk = np.asarray(lambda_q), np.asarray(lambda_k)
    arg = np.asarray(delta) * (np.asarray(theta_q) - np.asarray(theta_k)) + np.asarray(bias)
    return float(np.sum(lq * lk * np.cos(arg + D * np.asarray(g))))


def decay_gradient(lambda_q, lambda_k, theta_q, theta_k, adapt, sched, D: float) -> float:
    """Closed-form d(score)/dD = -C . sin(delta dS + b + D g), C = lq * lk * g.

    ``adapt`` may be an :class:`AdaptiveParams` (first head is used when the
    parameters are per-head) or a ``(delta, bias)`` pair of arrays.
    """
    if isinstance(adapt, AdaptiveParams):
        delta, bias = adapt.delta.data, adapt.bias.data
        if delta.ndim == 2:
            delta, bias = delta[0], bias[0]
    else:
        delta, bias = adapt
    g = sched.g if isinstance(sched, FrequencySchedule) else np.asarray(sched)
    C = np.asarray(lambda_q) * np.asarray(lambda_k) * g
    arg = np.asarray(delta) * (np.asarray(theta_q) - np.asarray(theta_k)) + np.asarray(bias) + D * g
    return float(-np.sum(C * np.sin(arg)))


@dataclass
class AttentionRecord:
    """Per-layer intermediate values kept for losses and exports."""

    weights: Tensor
    theta_q: Tensor | None = None
    theta_k: Tensor | None = None
    extras: dict = field(default_factory=dict)
