"""Leaky integrate-and-fire dynamics and their surrogate-gradient adjoint.

Only the discrete update is executed::

    U_pre[t] = beta * U[t-1] + (1 - beta) * I[t]
    S[t]     = 1 if U_pre[t] >= threshold else 0
    U[t]     = U_pre[t] - threshold * S[t]      (subtract reset)
    U[t]     = U_pre[t] * (1 - S[t])            (zero reset)

The continuous membrane equation ``tau dU/dt = -U + R I`` enters only through
``beta``; the time constant and membrane resistance are not runtime
parameters (resistance is absorbed into the incoming weights).

The Heaviside step has no useful derivative, so the backward pass replaces it
with the fast-sigmoid surrogate ``1 / (1 + k|v|)^2``, with ``v = U_pre - threshold``.
That surrogate is also used for the reset path.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor_core import ShapeError


class Reset(str, Enum):
    SUBTRACT = "subtract"
    ZERO = "zero"


@dataclass(frozen=True)
class LifParams:
    beta: float = 0.5
    threshold: float = 1.0
    reset: Reset = Reset.SUBTRACT

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.threshold > 0.0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        object.__setattr__(self, "reset", Reset(self.reset))


@dataclass(frozen=True)
class SurrogateSpec:
    """Fast-sigmoid surrogate; ``slope`` is the sharpness ``k``."""

    slope: float = 25.0
    kind: str = "fast_sigmoid"

    def __post_init__(self) -> None:
        if not self.slope > 0.0:
            raise ValueError(f"surrogate slope must be positive, got {self.slope}")
        if self.kind != "fast_sigmoid":
            raise ValueError(f"unknown surrogate kind {self.kind!r}")


@dataclass
class LifState:
    membrane: np.ndarray

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "LifState":
        return cls(np.zeros(shape))


def surrogate_grad(v: np.ndarray, spec: SurrogateSpec = SurrogateSpec()) -> np.ndarray:
    """Derivative stand-in for the spike step at distance ``v`` from threshold."""
    return 1.0 / (1.0 + spec.slope * np.abs(v)) ** 2


def relaxed_spike(v: np.ndarray, spec: SurrogateSpec = SurrogateSpec()) -> np.ndarray:
    """Smooth relaxation of the step whose derivative is :func:`surrogate_grad`.

    ``0.5 + v / (1 + k|v|)`` stays inside ``(0, 1)`` for ``k >= 2``. It exists
    so that gradient checks have a differentiable forward to compare against.
    """
    return 0.5 + v / (1.0 + spec.slope * np.abs(v))


def _reset(u_pre: np.ndarray, spikes: np.ndarray, params: LifParams) -> np.ndarray:
    if params.reset is Reset.SUBTRACT:
        return u_pre - params.threshold * spikes
    return u_pre * (1.0 - spikes)


def lif_step(
    state: LifState,
    input_current: np.ndarray,
    params: LifParams,
    relaxed: SurrogateSpec | None = None,
) -> tuple[np.ndarray, LifState]:
    """Advance a population of neurons by one time step.

    Args:
        state: Membrane potentials after the previous step.
        input_current: Same shape as ``state.membrane``.
        params: Leak, threshold and reset rule.
        relaxed: If given, emit the smooth relaxation instead of binary spikes.

    Returns:
        ``(spikes, new_state)``.
    """
    spikes, _, u_new = _step(state.membrane, input_current, params, relaxed)
    return spikes, LifState(u_new)


def _step(u_prev, current, params, relaxed):
    current = np.asarray(current, dtype=np.float64)
    if current.shape != u_prev.shape:
        raise ShapeError(f"input shape {current.shape} != membrane shape {u_prev.shape}")
    u_pre = params.beta * u_prev + (1.0 - params.beta) * current
    if relaxed is None:
        spikes = (u_pre >= params.threshold).astype(np.float64)
    else:
        spikes = relaxed_spike(u_pre - params.threshold, relaxed)
    return spikes, u_pre, _reset(u_pre, spikes, params)


@dataclass
class LifTrace:
    """Per-step values saved by :func:`lif_sequence_forward` for the backward pass."""

    spikes: np.ndarray  # [T, ...]
    u_pre: np.ndarray  # [T, ...]
    final: LifState


def lif_sequence_forward(
    currents: np.ndarray,
    params: LifParams,
    state: LifState | None = None,
    relaxed: SurrogateSpec | None = None,
) -> LifTrace:
    """Run :func:`lif_step` over the leading (time) axis of ``currents``."""
    currents = np.asarray(currents, dtype=np.float64)
    u = np.zeros(currents.shape[1:]) if state is None else state.membrane
    spikes = np.empty_like(currents)
    u_pre = np.empty_like(currents)
    for t in range(currents.shape[0]):
        spikes[t], u_pre[t], u = _step(u, currents[t], params, relaxed)
    return LifTrace(spikes, u_pre, LifState(u))


def lif_sequence_backward(
    u_pre: np.ndarray,
    grad_spikes: np.ndarray,
    params: LifParams,
    spec: SurrogateSpec = SurrogateSpec(),
    grad_final: np.ndarray | None = None,
    spikes: np.ndarray | None = None,
) -> np.ndarray:
    """Reverse-time adjoint of :func:`lif_sequence_forward`.

    Args:
        u_pre: Saved pre-reset membranes, ``[T, ...]``.
        grad_spikes: Loss gradient with respect to each step's spikes.
        params: The parameters used in the forward run.
        spec: Surrogate used in place of the step derivative.
        grad_final: Gradient with respect to the membrane after the last step.
        spikes: Saved forward spikes. Recomputed from ``u_pre`` when omitted,
            which is only correct for a hard (binary) forward.

    Returns:
        Gradient with respect to the input current at every step, ``[T, ...]``.
    """
    u_pre = np.asarray(u_pre, dtype=np.float64)
    grad_spikes = np.asarray(grad_spikes, dtype=np.float64)
    if grad_spikes.shape != u_pre.shape:
        raise ShapeError(
            f"grad_spikes shape {grad_spikes.shape} != saved membrane shape {u_pre.shape}"
        )
    if spikes is None:
        spikes = (u_pre >= params.threshold).astype(np.float64)
    elif spikes.shape != u_pre.shape:
        raise ShapeError(f"spikes shape {spikes.shape} != saved membrane shape {u_pre.shape}")
    grad_u = np.zeros(u_pre.shape[1:]) if grad_final is None else np.array(grad_final, float)
    if grad_u.shape != u_pre.shape[1:]:
        raise ShapeError(f"grad_final shape {grad_u.shape} != neuron shape {u_pre.shape[1:]}")

    beta, theta = params.beta, params.threshold
    grad_current = np.empty_like(u_pre)
    for t in range(u_pre.shape[0] - 1, -1, -1):
        sg = surrogate_grad(u_pre[t] - theta, spec)
        if params.reset is Reset.SUBTRACT:
            through_reset = 1.0 - theta * sg
        else:
            through_reset = (1.0 - spikes[t]) - u_pre[t] * sg
        g_pre = grad_spikes[t] * sg + grad_u * through_reset
        grad_current[t] = (1.0 - beta) * g_pre
        grad_u = beta * g_pre
    return grad_current
