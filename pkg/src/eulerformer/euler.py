"""Euler transformation between real vectors and polar-form complex vectors.

A real vector of even length ``d`` is read as ``r + i s`` with ``r`` the first
half and ``s`` the second half.  In polar form it becomes ``lambda * exp(i theta)``
with ``lambda = |r + i s|`` and ``theta = atan2(s, r)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigurationError(ValueError):
    """Raised when a model or layer is configured with incompatible sizes."""


def canonicalize(phase):
    """Map angles into (-pi, pi] without changing their cosine/sine."""
    arr = np.asarray(phase, dtype=np.float64)
    out = np.pi - np.mod(np.pi - arr, 2.0 * np.pi)
    return out


def _wrap(phase) -> Tensor:
    # Differentiable canonicalisation: subtracting a locally constant multiple
    # of 2*pi leaves the derivative untouched.
    phase = T.as_tensor(phase)
    shift = phase.data - canonicalize(phase.data)
    return phase - shift


@dataclass
class PolarPair:
    modulus: Tensor
    phase: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.modulus.shape


def euler_transform(x) -> PolarPair:
    x = T.as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ConfigurationError(f"Euler transformation needs an even last dimension, got {d}")
    r, s = T.split(x, 2, axis=-1)
    return PolarPair(T.modulus(r, s), T.atan2(s, r))


def inverse_transform(p: PolarPair) -> Tensor:
    return T.concat([p.modulus * T.cos(p.phase), p.modulus * T.sin(p.phase)], axis=-1)


def rotate(p: PolarPair, angle) -> PolarPair:
    return PolarPair(p.modulus, _wrap(p.phase + angle))


def polar_dot(a: PolarPair, b: PolarPair) -> Tensor:
    """Real part of ``a . conj(b)`` summed over the last axis.

    Evaluated through the inverse transformation and a real dot product,
    which equals sum(lambda_a * lambda_b * cos(theta_a - theta_b)).
    """
    if a.shape[-1] != b.shape[-1]:
        raise ConfigurationError("polar vectors must have matching length")
    return (inverse_transform(a) * inverse_transform(b)).sum(axis=-1)


def polar_dot_trig(a: PolarPair, b: PolarPair) -> Tensor:
    """Trigonometric form of :func:`polar_dot`; kept as a cross-check."""
    return (a.modulus * b.modulus * T.cos(a.phase - b.phase)).sum(axis=-1)
