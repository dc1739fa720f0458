"""Reference trajectories, closed-loop rollouts, and dataset extraction.

The rollout engine wires a tracker from the control module to one of two
plants at a fixed sample time: the nominal plant integrates the offset
pose under the exact difference model (so nominal control is exact on
it), while the slip plant integrates the vehicle center through the
tilted-plane slip equations and reports offset-pose deltas by
differencing, the way odometry would.

Log rows follow one convention throughout: row k holds the pose read at
step k (before moving), the command issued at step k, and the offset
delta realized by that step. Dataset extraction pairs each interior row
with its successor to invert the actuator recursion.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .control import (
    FirstOrderTracker,
    Gains,
    InverseModelFn,
    ReferencePoint,
    SecondOrderTracker,
)
from .gp import Dataset, GpModel, predict
from .kinematics import (
    OffsetPose,
    Pose2,
    PoseDelta,
    TrackCommand,
    VehicleParams,
    center_pose,
    offset_model_matrix,
    offset_point,
    wrap_angle,
)
from .terrain3d import SlipPlaneWorld, SlipState, slip_forward, slip_ratios

TRAJECTORY_KINDS = ("figure8", "circle", "waypoints")

# dense polyline spacing used to represent the waypoint spline; small
# enough that chord error is far below the waypoint-hit tolerance
SPLINE_SPACING = 1e-3


class NumericsError(RuntimeError):
    """Rollout state became non-finite (diverged loop or bad config)."""


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Uniformly sampled reference for the offset point."""

    kind: str
    sample_time: float
    samples: tuple[ReferencePoint, ...]

    def __post_init__(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.sample_time <= 0.0:
            raise ValueError(f"sample_time must be positive, got {self.sample_time}")
        if len(self.samples) < 1:
            raise ValueError("trajectory needs at least one sample")

    def __len__(self) -> int:
        return len(self.samples)

    def positions(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.samples])


def _trajectory_from_positions(
    kind: str, positions: np.ndarray, sample_time: float
) -> ReferenceTrajectory:
    """Build M reference points from M+2 positions (forward deltas)."""
    deltas = np.diff(positions, axis=0)
    samples = tuple(
        ReferencePoint(
            positions[k, 0],
            positions[k, 1],
            deltas[k, 0],
            deltas[k, 1],
            deltas[k + 1, 0],
            deltas[k + 1, 1],
        )
        for k in range(positions.shape[0] - 2)
    )
    return ReferenceTrajectory(kind, sample_time, samples)


def make_figure8(
    amplitude: float = 2.0,
    period_steps: int = 800,
    sample_time: float = 0.05,
    laps: int = 1,
) -> ReferenceTrajectory:
    """Closed figure-8 (Gerono lemniscate), one point per sample time.

    x = A sin(theta), y = A sin(theta) cos(theta); theta sweeps one turn
    per period. Starts and ends at the origin crossing.
    """
    if amplitude <= 0.0:
        raise ValueError(f"amplitude must be positive, got {amplitude}")
    if period_steps < 4:
        raise ValueError(f"period_steps must be at least 4, got {period_steps}")
    if laps < 1:
        raise ValueError(f"laps must be at least 1, got {laps}")
    steps = period_steps * laps
    theta = 2.0 * math.pi * np.arange(steps + 3) / period_steps
    s = np.sin(theta)
    positions = amplitude * np.stack([s, s * np.cos(theta)], axis=1)
    return _trajectory_from_positions("figure8", positions, sample_time)


def make_circle(
    radius: float = 1.5,
    period_steps: int = 800,
    sample_time: float = 0.05,
    laps: int = 1,
) -> ReferenceTrajectory:
    """Closed circle starting at (radius, 0), counterclockwise."""
    if radius <= 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    if period_steps < 4:
        raise ValueError(f"period_steps must be at least 4, got {period_steps}")
    if laps < 1:
        raise ValueError(f"laps must be at least 1, got {laps}")
    steps = period_steps * laps
    theta = 2.0 * math.pi * np.arange(steps + 3) / period_steps
    positions = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return _trajectory_from_positions("circle", positions, sample_time)


def catmull_rom_point(
    p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, p3: np.ndarray, u: float
) -> np.ndarray:
    """Uniform Catmull-Rom segment between p1 and p2 at parameter u."""
    u2 = u * u
    u3 = u2 * u
    return 0.5 * (
        2.0 * p1
        + (p2 - p0) * u
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2
        + (3.0 * p1 - 3.0 * p2 + p3 - p0) * u3
    )


@dataclass(frozen=True)
class PathSpline:
    """Dense arc-length representation of a waypoint spline.

    points is a polyline tracing the Catmull-Rom curve through the
    waypoints; arclengths is the matching cumulative arc length, and
    waypoint_arclengths locates each waypoint on that parameterization.
    """

    waypoints: np.ndarray
    points: np.ndarray
    arclengths: np.ndarray
    waypoint_arclengths: np.ndarray

    @property
    def length(self) -> float:
        return float(self.arclengths[-1])

    def point_at(self, s: float | np.ndarray) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        x = np.interp(s, self.arclengths, self.points[:, 0])
        y = np.interp(s, self.arclengths, self.points[:, 1])
        return np.stack([x, y], axis=-1)


def path_spline(
    waypoints: Sequence[Sequence[float]], spacing: float = SPLINE_SPACING
) -> PathSpline:
    """Catmull-Rom spline through the waypoints, densely traced.

    Endpoint tangents come from mirrored phantom points, so a two-point
    path degenerates to the straight segment. Consecutive duplicate
    waypoints are rejected.
    """
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two 2-D waypoints")
    if not np.all(np.isfinite(pts)):
        raise ValueError("waypoints contain non-finite values")
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(gaps < 1e-12):
        raise ValueError("consecutive waypoints coincide")
    control = np.vstack([2.0 * pts[0] - pts[1], pts, 2.0 * pts[-1] - pts[-2]])
    dense = [pts[0]]
    junction_idx = [0]
    for seg in range(pts.shape[0] - 1):
        p0, p1, p2, p3 = control[seg : seg + 4]
        chord = float(np.linalg.norm(p2 - p1))
        n = max(8, int(math.ceil(chord / spacing)))
        u = np.arange(1, n + 1) / n
        u2 = u * u
        u3 = u2 * u
        block = 0.5 * (
            2.0 * p1
            + np.outer(u, p2 - p0)
            + np.outer(u2, 2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3)
            + np.outer(u3, 3.0 * p1 - 3.0 * p2 + p3 - p0)
        )
        dense.extend(block)
        junction_idx.append(len(dense) - 1)
    points = np.asarray(dense)
    arclengths = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))]
    )
    return PathSpline(
        waypoints=pts,
        points=points,
        arclengths=arclengths,
        waypoint_arclengths=arclengths[junction_idx],
    )


def _ramp_profile(length: float, cruise: float, ramp_time: float):
    """Arc length as a function of time under a trapezoidal speed profile.

    Accelerates at cruise/ramp_time, cruises, then decelerates; short
    paths fall back to a triangular profile that peaks below cruise.
    Returns (total_time, s_of_t).
    """
    accel = cruise / ramp_time
    if length >= cruise * ramp_time:
        total = length / cruise + ramp_time

        def s_of_t(t: float) -> float:
            if t <= 0.0:
                return 0.0
            if t >= total:
                return length
            if t < ramp_time:
                return 0.5 * accel * t * t
            if t <= total - ramp_time:
                return 0.5 * cruise * ramp_time + cruise * (t - ramp_time)
            return length - 0.5 * accel * (total - t) ** 2

    else:
        peak_time = math.sqrt(length / accel)
        total = 2.0 * peak_time

        def s_of_t(t: float) -> float:
            if t <= 0.0:
                return 0.0
            if t >= total:
                return length
            if t < peak_time:
                return 0.5 * accel * t * t
            return length - 0.5 * accel * (total - t) ** 2

    return total, s_of_t


def make_waypoint_path(
    waypoints: Sequence[Sequence[float]],
    cruise_speed: float = 0.3,
    sample_time: float = 0.05,
    ramp_time: float = 2.0,
) -> ReferenceTrajectory:
    """Free-form trajectory through waypoints at a cruising speed.

    The spline is resampled by arc length under a trapezoidal speed
    profile (ramp in, cruise, ramp out), so the reference starts and
    ends at rest exactly on the first and last waypoints.
    """
    if cruise_speed <= 0.0:
        raise ValueError(f"cruise_speed must be positive, got {cruise_speed}")
    if ramp_time <= 0.0:
        raise ValueError(f"ramp_time must be positive, got {ramp_time}")
    spline = path_spline(waypoints)
    total, s_of_t = _ramp_profile(spline.length, cruise_speed, ramp_time)
    steps = int(math.ceil(total / sample_time))
    times = np.arange(steps + 3) * sample_time
    s = np.array([s_of_t(float(t)) for t in times])
    positions = spline.point_at(s)
    return _trajectory_from_positions("waypoints", positions, sample_time)


# ---------------------------------------------------------------------------
# plants


@dataclass(frozen=True)
class PlantStep:
    """What one plant step realized."""

    delta: PoseDelta  # offset-pose delta, world frame
    left_speed: float  # filtered track speeds after actuator lag
    right_speed: float
    slip: SlipState


class NominalPlant:
    """Integrates the offset pose under the exact difference model."""

    def __init__(
        self, params: VehicleParams, start: OffsetPose, actuator_alpha: float
    ):
        if not 0.0 <= actuator_alpha < 1.0:
            raise ValueError(f"actuator_alpha must be in [0, 1), got {actuator_alpha}")
        self.params = params
        self.alpha = actuator_alpha
        self._pose = start
        self._vel = np.zeros(2)

    def offset_pose(self) -> OffsetPose:
        return self._pose

    def center(self) -> Pose2:
        return center_pose(self._pose, self.params)

    def step(self, cmd: TrackCommand) -> PlantStep:
        vmax = self.params.max_track_speed
        sat = np.clip(cmd.as_array(), -vmax, vmax)
        self._vel = self.alpha * self._vel + (1.0 - self.alpha) * sat
        d = self.params.sample_time * (
            offset_model_matrix(self._pose.phi, self.params) @ self._vel
        )
        delta = PoseDelta(d[0], d[1], d[2])
        self._pose = OffsetPose(
            self._pose.x + delta.dx,
            self._pose.y + delta.dy,
            self._pose.phi + delta.dphi,
        )
        return PlantStep(delta, float(self._vel[0]), float(self._vel[1]), SlipState.zero())


class SlipPlant:
    """Integrates the vehicle center through the tilted-plane slip model.

    The controller's offset point is measured on the world x-y
    projection of the center pose; offset deltas are reported by
    differencing those measurements, the way odometry would see them.
    """

    def __init__(
        self,
        params: VehicleParams,
        world: SlipPlaneWorld,
        start: Pose2,
        rng: np.random.Generator,
    ):
        self.params = params
        self.world = world
        self._pose = start
        self._vel = np.zeros(2)
        self._rng = rng

    def offset_pose(self) -> OffsetPose:
        return offset_point(self._pose, self.params)

    def center(self) -> Pose2:
        return self._pose

    def step(self, cmd: TrackCommand) -> PlantStep:
        vmax = self.params.max_track_speed
        sat = np.clip(cmd.as_array(), -vmax, vmax)
        a = self.params.actuator_alpha
        self._vel = a * self._vel + (1.0 - a) * sat
        realized = TrackCommand(float(self._vel[0]), float(self._vel[1]))
        slip = slip_ratios(realized, self.world)
        delta_c = slip_forward(self._pose, realized, slip, self.world, self.params)
        dx, dy, dphi = delta_c.dx, delta_c.dy, delta_c.dphi
        if self.world.noise_sigma > 0.0:
            noise = self._rng.normal(0.0, self.world.noise_sigma, size=3)
            dx, dy, dphi = dx + noise[0], dy + noise[1], dphi + noise[2]
        before = self.offset_pose()
        self._pose = Pose2(self._pose.x + dx, self._pose.y + dy, self._pose.phi + dphi)
        after = self.offset_pose()
        delta_b = PoseDelta(
            after.x - before.x,
            after.y - before.y,
            wrap_angle(after.phi - before.phi),
        )
        return PlantStep(delta_b, float(self._vel[0]), float(self._vel[1]), slip)


# ---------------------------------------------------------------------------
# rollout and logs

LOG_COLUMNS = (
    "t",
    "x_d",
    "y_d",
    "x",
    "y",
    "phi",
    "x_B",
    "y_B",
    "dx",
    "dy",
    "dphi",
    "vl_cmd",
    "vr_cmd",
    "vl_real",
    "vr_real",
    "a_l",
    "a_r",
    "beta",
    "err",
)


@dataclass(frozen=True)
class RolloutLog:
    """Columnar per-step record of one closed-loop run.

    Row k: reference sample k, center pose and offset point read before
    moving, the offset delta realized by step k, the command issued at
    step k, the filtered track speeds, and the slip state.
    """

    sample_time: float
    ref_x: np.ndarray
    ref_y: np.ndarray
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    x_b: np.ndarray
    y_b: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dphi: np.ndarray
    vl_cmd: np.ndarray
    vr_cmd: np.ndarray
    vl_real: np.ndarray
    vr_real: np.ndarray
    a_l: np.ndarray
    a_r: np.ndarray
    beta: np.ndarray
    err: np.ndarray

    def __post_init__(self) -> None:
        n = self.ref_x.shape[0]
        for name in _LOG_FIELDS:
            col = getattr(self, name)
            if col.ndim != 1 or col.shape[0] != n:
                raise ValueError(f"log column {name} has shape {col.shape}, want ({n},)")

    def __len__(self) -> int:
        return self.ref_x.shape[0]


_LOG_FIELDS = (
    "ref_x",
    "ref_y",
    "x",
    "y",
    "phi",
    "x_b",
    "y_b",
    "dx",
    "dy",
    "dphi",
    "vl_cmd",
    "vr_cmd",
    "vl_real",
    "vr_real",
    "a_l",
    "a_r",
    "beta",
    "err",
)


def rollout(
    traj: ReferenceTrajectory,
    gains: Gains,
    order: int,
    params: VehicleParams,
    plant: str = "nominal",
    world: Optional[SlipPlaneWorld] = None,
    seed: int = 0,
    inverse_model: Optional[InverseModelFn] = None,
) -> RolloutLog:
    """Run the closed loop over the whole reference trajectory.

    The run starts on the reference: the offset point sits on the first
    sample with heading taken from the first nonzero reference delta,
    and the vehicle is at rest. Deterministic given the seed.

    Raises NumericsError if the state ever goes non-finite, and
    ValueError for inconsistent arguments (slip plant without a world,
    learned inverse with a first-order law, unstable gains).
    """
    if plant not in ("nominal", "slip"):
        raise ValueError(f"plant must be 'nominal' or 'slip', got {plant!r}")
    if plant == "slip" and world is None:
        raise ValueError("slip plant requires a world")
    if order == 1:
        if inverse_model is not None:
            raise ValueError("a learned inverse model requires the order-2 law")
        tracker = FirstOrderTracker(gains, params)
    elif order == 2:
        tracker = SecondOrderTracker(gains, params, inverse_model=inverse_model)
    else:
        raise ValueError(f"order must be 1 or 2, got {order}")

    phi0 = 0.0
    for p in traj.samples:
        if math.hypot(p.dx, p.dy) > 1e-12:
            phi0 = math.atan2(p.dy, p.dx)
            break
    start_b = OffsetPose(traj.samples[0].x, traj.samples[0].y, phi0)
    if plant == "nominal":
        alpha = params.actuator_alpha if order == 2 else 0.0
        machine = NominalPlant(params, start_b, alpha)
    else:
        machine = SlipPlant(
            params, world, center_pose(start_b, params), np.random.default_rng(seed)
        )

    n = len(traj)
    cols = {name: np.empty(n) for name in _LOG_FIELDS}
    for k, ref in enumerate(traj.samples):
        pose_b = machine.offset_pose()
        center = machine.center()
        # the pose, delta, and command types reject non-finite values, so
        # divergence surfaces as ValueError inside the step
        try:
            cmd = tracker.command(ref, pose_b)
            step = machine.step(cmd)
        except ValueError as exc:
            raise NumericsError(
                f"loop state went non-finite at step {k}: {exc}"
            ) from exc
        cols["ref_x"][k] = ref.x
        cols["ref_y"][k] = ref.y
        cols["x"][k] = center.x
        cols["y"][k] = center.y
        cols["phi"][k] = center.phi
        cols["x_b"][k] = pose_b.x
        cols["y_b"][k] = pose_b.y
        cols["dx"][k] = step.delta.dx
        cols["dy"][k] = step.delta.dy
        cols["dphi"][k] = step.delta.dphi
        cols["vl_cmd"][k] = cmd.left
        cols["vr_cmd"][k] = cmd.right
        cols["vl_real"][k] = step.left_speed
        cols["vr_real"][k] = step.right_speed
        cols["a_l"][k] = step.slip.left_ratio
        cols["a_r"][k] = step.slip.right_ratio
        cols["beta"][k] = step.slip.beta
        cols["err"][k] = math.hypot(ref.x - pose_b.x, ref.y - pose_b.y)
        tracker.observe(step.delta)
    return RolloutLog(sample_time=traj.sample_time, **cols)


def learned_inverse(model: GpModel) -> InverseModelFn:
    """Adapt a trained regression model to the controller's inverse slot.

    The query layout mirrors dataset extraction: desired next offset
    translation, newest realized offset delta, heading at that delta's
    start.
    """
    if model.inputs.shape[1] != 6 or len(model.outputs) != 2:
        raise ValueError(
            "model does not match the six-input, two-command inverse slot: "
            f"inputs {model.inputs.shape}, outputs {len(model.outputs)}"
        )

    def fn(u: np.ndarray, delta: PoseDelta, phi: float) -> TrackCommand:
        w = np.array([u[0], u[1], delta.dx, delta.dy, delta.dphi, phi])
        mean, _ = predict(model, w)
        return TrackCommand(float(mean[0]), float(mean[1]))

    return fn


# ---------------------------------------------------------------------------
# metrics and dataset extraction


@dataclass(frozen=True)
class Metrics:
    """Cartesian tracking error along a rollout."""

    errors: np.ndarray
    mean_error: float
    max_error: float

    def __post_init__(self) -> None:
        if self.errors.size == 0:
            raise ValueError("metrics need at least one step")
        if self.mean_error < 0.0 or self.mean_error > self.max_error + 1e-15:
            raise ValueError("inconsistent error aggregates")


def cartesian_error(log: RolloutLog) -> Metrics:
    """Per-step distance between the reference and the offset point."""
    if len(log) == 0:
        raise ValueError("empty rollout log")
    errors = np.hypot(log.ref_x - log.x_b, log.ref_y - log.y_b)
    return Metrics(errors, float(errors.mean()), float(errors.max()))


def extract_dataset(log: RolloutLog) -> Dataset:
    """Inverse-model training pairs from a rollout log.

    Anchored at interior rows t in [1, L-2]: the input stacks the next
    realized offset translation, the current realized offset delta, and
    the heading at that delta's start; the target is the command issued
    at row t+1 (the command that produced the next delta). A length-L
    log therefore yields L-2 samples.
    """
    n = len(log)
    if n < 3:
        raise ValueError(f"need at least 3 log rows to extract samples, got {n}")
    t = np.arange(1, n - 1)
    w = np.column_stack(
        [
            log.dx[t + 1],
            log.dy[t + 1],
            log.dx[t],
            log.dy[t],
            log.dphi[t],
            log.phi[t],
        ]
    )
    z = np.column_stack([log.vl_cmd[t + 1], log.vr_cmd[t + 1]])
    return Dataset(w, z)


def split_dataset(
    data: Dataset, train_fraction: float = 0.8, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Seeded shuffle into disjoint, exhaustive train/test parts."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(data)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return (
        Dataset(data.inputs[train_idx], data.targets[train_idx]),
        Dataset(data.inputs[test_idx], data.targets[test_idx]),
    )


# ---------------------------------------------------------------------------
# CSV persistence


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    ncols = len(header)
    for row in rows:
        if len(row) != ncols:
            raise ValueError(f"row has {len(row)} fields, want {ncols}")
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def save_log(log: RolloutLog, path: str) -> None:
    rows = (
        [k] + [float(getattr(log, name)[k]) for name in _LOG_FIELDS]
        for k in range(len(log))
    )
    atomic_write_text(path, _csv_text(LOG_COLUMNS, rows))


def load_log(path: str, sample_time: float = 0.05) -> RolloutLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != LOG_COLUMNS:
            raise ValueError(
                f"unexpected log header in {path}: {header}, want {LOG_COLUMNS}"
            )
        data = [[float(v) for v in row] for row in reader]
    arr = np.asarray(data, dtype=float).reshape(len(data), len(LOG_COLUMNS))
    cols = {name: arr[:, i + 1].copy() for i, name in enumerate(_LOG_FIELDS)}
    return RolloutLog(sample_time=sample_time, **cols)


DATASET_COLUMNS = ("w1", "w2", "w3", "w4", "w5", "w6", "z1", "z2")


def save_dataset(data: Dataset, path: str) -> None:
    rows = (
        [float(v) for v in data.inputs[i]] + [float(v) for v in data.targets[i]]
        for i in range(len(data))
    )
    atomic_write_text(path, _csv_text(DATASET_COLUMNS, rows))


def load_dataset(path: str) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != DATASET_COLUMNS:
            raise ValueError(
                f"unexpected dataset header in {path}: {header}, want {DATASET_COLUMNS}"
            )
        data = [[float(v) for v in row] for row in reader]
    arr = np.asarray(data, dtype=float).reshape(len(data), len(DATASET_COLUMNS))
    return Dataset(arr[:, :6].copy(), arr[:, 6:].copy())
