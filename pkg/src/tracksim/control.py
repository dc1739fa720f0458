"""Feedback-linearizing trajectory trackers on the offset output point.

Both controllers compute a desired offset-point translation for the next
interval and push it through an inverse model to get track speeds. On the
matching nominal plant the loop is exactly linear, with per-axis error
dynamics:

  first order:   e[t+1] = (1 - kp) e[t]
  second order:  e[t+2] + (kd - 1) e[t+1] + (kp - kd) e[t] = 0

The second-order law compensates the actuator low-pass, and its inverse
model is pluggable: either the closed-form kinematic inverse or a learned
replacement with the same call signature.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .kinematics import (
    OffsetPose,
    PoseDelta,
    TrackCommand,
    VehicleParams,
    inverse_first_order,
    inverse_second_order,
)

# pole magnitudes must clear 1 by at least this much
STABILITY_MARGIN = 1e-9

# signature shared by the closed-form inverse and learned replacements:
# (desired next offset delta (2,), current measured delta, heading at the
# start of that delta) -> track command
InverseModelFn = Callable[[np.ndarray, PoseDelta, float], TrackCommand]


@dataclass(frozen=True)
class Gains:
    """Per-axis proportional (and, for order 2, derivative-like) gains."""

    kp: tuple[float, float]
    kd: Optional[tuple[float, float]] = None

    def __post_init__(self) -> None:
        if len(self.kp) != 2 or not all(math.isfinite(g) for g in self.kp):
            raise ValueError(f"kp must be two finite values, got {self.kp}")
        if self.kd is not None:
            if len(self.kd) != 2 or not all(math.isfinite(g) for g in self.kd):
                raise ValueError(f"kd must be two finite values, got {self.kd}")


@dataclass(frozen=True)
class ReferencePoint:
    """One sample of the reference for the offset point.

    (dx, dy) is the translation from this sample to the next one;
    (dx_next, dy_next) the translation one interval further out. The
    second-order law needs both because it shapes the delta one interval
    ahead of the newest measurement.
    """

    x: float
    y: float
    dx: float
    dy: float
    dx_next: float
    dy_next: float

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def delta(self) -> np.ndarray:
        return np.array([self.dx, self.dy])

    def next_delta(self) -> np.ndarray:
        return np.array([self.dx_next, self.dy_next])


def validate_gains(gains: Gains, order: int) -> np.ndarray:
    """Closed-loop pole magnitudes for the nominal loop of the given order.

    Pure computation: returns magnitudes, never raises on unstable gains.
    Order 1 yields one pole per axis (|1 - kp|); order 2 yields the two
    roots per axis of z^2 + (kd - 1) z + (kp - kd).
    """
    if order == 1:
        return np.array([abs(1.0 - k) for k in gains.kp])
    if order == 2:
        if gains.kd is None:
            raise ValueError("order-2 gains require kd")
        mags = []
        for kp, kd in zip(gains.kp, gains.kd):
            disc = cmath.sqrt((kd - 1.0) ** 2 - 4.0 * (kp - kd))
            mags.append(abs((-(kd - 1.0) + disc) / 2.0))
            mags.append(abs((-(kd - 1.0) - disc) / 2.0))
        return np.array(mags)
    raise ValueError(f"order must be 1 or 2, got {order}")


def assert_stable(gains: Gains, order: int) -> None:
    """Reject gains whose closed-loop poles touch or leave the unit circle."""
    mags = validate_gains(gains, order)
    if not np.all(mags < 1.0 - STABILITY_MARGIN):
        raise ValueError(
            f"unstable order-{order} gains {gains}: pole magnitudes {mags}"
        )


def first_order_step(
    ref: ReferencePoint,
    measured: OffsetPose,
    gains: Gains,
    params: VehicleParams,
) -> TrackCommand:
    """One first-order control step: feedforward plus proportional feedback."""
    kp = np.array(gains.kp)
    u = ref.delta() + kp * (ref.position() - measured.xy())
    return inverse_first_order(u, measured.phi, params)


def second_order_step(
    ref: ReferencePoint,
    measured: OffsetPose,
    measured_delta: PoseDelta,
    gains: Gains,
    params: VehicleParams,
    inverse_model: Optional[InverseModelFn] = None,
) -> TrackCommand:
    """One second-order control step.

    Every term is evaluated at a single time instant: `measured` is the
    offset pose at the *start* of `measured_delta` (the newest realized
    delta), and `ref` is the reference sample for that same instant. The
    produced command shapes the delta of the following interval.

    Args:
        inverse_model: drop-in replacement for the closed-form kinematic
            inverse (e.g. a trained regression model); None uses the
            closed form.
    """
    if gains.kd is None:
        raise ValueError("second-order control requires kd gains")
    kp = np.array(gains.kp)
    kd = np.array(gains.kd)
    u = (
        ref.next_delta()
        + kd * (ref.delta() - measured_delta.xy())
        + kp * (ref.position() - measured.xy())
    )
    if inverse_model is None:
        return inverse_second_order(u, measured_delta, measured.phi, params)
    return inverse_model(u, measured_delta, measured.phi)


class FirstOrderTracker:
    """Stateless first-order tracker; rejects unstable gains up front."""

    order = 1

    def __init__(self, gains: Gains, params: VehicleParams):
        assert_stable(gains, 1)
        self.gains = gains
        self.params = params

    def command(self, ref: ReferencePoint, pose_b: OffsetPose) -> TrackCommand:
        return first_order_step(ref, pose_b, self.gains, self.params)

    def observe(self, realized_delta: PoseDelta) -> None:
        # first-order law carries no velocity state
        pass


class SecondOrderTracker:
    """Second-order tracker holding the newest realized offset delta.

    The control law is anchored at the start of that delta, so the step
    reconstructs the one-interval-old pose and reference from its stored
    state; callers just hand in the current pose and current reference
    sample. The vehicle is assumed at rest on the first step (zero delta,
    reference held still).
    """

    order = 2

    def __init__(
        self,
        gains: Gains,
        params: VehicleParams,
        inverse_model: Optional[InverseModelFn] = None,
    ):
        assert_stable(gains, 2)
        self.gains = gains
        self.params = params
        self.inverse_model = inverse_model
        self.last_delta = PoseDelta.zero()
        self._prev_ref: Optional[ReferencePoint] = None

    def command(self, ref: ReferencePoint, pose_b: OffsetPose) -> TrackCommand:
        if self._prev_ref is None:
            # virtual pre-start sample: reference at rest where it begins
            self._prev_ref = ReferencePoint(ref.x, ref.y, 0.0, 0.0, ref.dx, ref.dy)
        d = self.last_delta
        pose_then = OffsetPose(pose_b.x - d.dx, pose_b.y - d.dy, pose_b.phi - d.dphi)
        cmd = second_order_step(
            self._prev_ref, pose_then, d, self.gains, self.params, self.inverse_model
        )
        self._prev_ref = ref
        return cmd

    def observe(self, realized_delta: PoseDelta) -> None:
        self.last_delta = realized_delta
