"""Adaptive gain control: differentiable amplitude renormalization.

An input tensor x with per-sample energy E = mean(x^2) is rescaled by

    g = ((e_target / (E + eps)) - 1) * alpha + 1
    y = g * x

so the output energy moves a fraction of the way toward the target.  The
epsilon keeps the gain finite on silent input; zero input stays zero (the
large gain multiplies zeros), so no clamp is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

AGC_EPS = 1e-6  # fixed stability constant, not a tunable


@dataclass(frozen=True)
class AgcParams:
    e_target: float = 1.0
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise DataError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.e_target > 0:
            raise DataError(f"e_target must be positive, got {self.e_target}")


def energy(x: np.ndarray) -> float:
    """Mean squared value over all elements of the tensor."""
    x = np.asarray(x)
    if x.size == 0:
        raise DataError("energy of an empty tensor is undefined")
    if not np.isfinite(x).all():
        raise NumericError("non-finite input to energy")
    return float(np.mean(np.square(x, dtype=np.float64)))


def gain(e: float, p: AgcParams) -> float:
    return (p.e_target / (e + AGC_EPS) - 1.0) * p.alpha + 1.0


def agc_forward(x: np.ndarray, p: AgcParams = AgcParams()) -> tuple[np.ndarray, float]:
    """Return (g * x, g).  Pure function of the input tensor."""
    g = gain(energy(x), p)
    return np.asarray(x) * g, g


def agc_backward(x: np.ndarray, p: AgcParams, grad_y: np.ndarray) -> np.ndarray:
    """Gradient of agc_forward's output w.r.t. its input.

    dy_j/dx_i = g * delta_ij + x_j * g'(E) * 2 x_i / N  with
    g'(E) = -alpha * e_target / (E + eps)^2, so the input gradient is
    g * grad_y plus an energy-path term along x.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if x.shape != grad_y.shape:
        raise DataError(f"gradient shape {grad_y.shape} does not match input {x.shape}")
    e = energy(x)
    g = gain(e, p)
    g_prime = -p.alpha * p.e_target / (e + AGC_EPS) ** 2
    inner = float(np.sum(grad_y * x))
    return g * grad_y + (2.0 / x.size) * g_prime * inner * x


def apply_agc_set(feature_set, p: AgcParams | None) -> None:
    """Scale every segment's log-mel and correlation tensors in place.

    ``p=None`` bypasses the layer (ablation: gain identically 1).  The set
    is marked so training and evaluation never rescale twice.
    """
    if feature_set.agc_applied:
        return
    if p is not None:
        for k in range(len(feature_set)):
            for arr in (feature_set.logmel[k], feature_set.gcc[k]):
                arr *= gain(energy(arr), p)
    feature_set.agc_applied = True


def waveform_gain_fn(p: AgcParams):
    """Per-segment waveform rescaler for applying the layer before feature
    extraction instead of after (the alternative placement)."""

    def apply(samples: np.ndarray) -> np.ndarray:
        y, _ = agc_forward(samples, p)
        return y

    return apply
