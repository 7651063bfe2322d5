"""Parametric Kanizsa-triangle stimuli and their perturbations.

Coordinates are normalized so that the image width is 1. The y axis points
down the image (row direction), which does not matter for any of the
geometric predicates below since they are all rotation/reflection covariant.

A stimulus is three "Pac-Man" inducers. Each inducer is a disc with a wedge
removed; the wedge is described by the direction it opens toward (the mouth
bisector) and its opening angle. In a valid figure every wedge boundary ray
points exactly at one of the other two inducer centers.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi


class InvalidGeometry(ValueError):
    """A stimulus violates the non-overlap or image-margin invariants."""


class GenerationExhausted(RuntimeError):
    """Resampling failed too many times; usually a misconfigured range."""


class DatasetKind(str, enum.Enum):
    OFFS = "offs"
    ANGLE = "angle"
    ROT = "rot"
    COMB = "comb"
    # ROT restricted to a single rotated vertex
    ROT1 = "rot1"


class PerturbationKind(str, enum.Enum):
    NONE = "none"
    OFFSET = "offset"
    ANGLE = "angle"
    ROT = "rot"


class Label(enum.IntEnum):
    VALID = 0
    INVALID = 1


class Point2(NamedTuple):
    x: float
    y: float


def normalize_angle(a: float) -> float:
    """Map an angle to [0, 2*pi)."""
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    return 0.0 if a >= TWO_PI else a


def wrap_angle(a):
    """Map an angle (scalar or array) to (-pi, pi]."""
    return math.pi - np.mod(math.pi - a, TWO_PI)


@dataclass(frozen=True)
class TrianglePose:
    centroid: Point2
    circumradius: float
    orientation: float


@dataclass(frozen=True)
class InducerSpec:
    center: Point2
    radius: float
    mouth_bisector: float
    opening_angle: float

    def __post_init__(self):
        if not self.radius > 0.0:
            raise InvalidGeometry(f"inducer radius must be positive, got {self.radius}")
        if not 0.0 < self.opening_angle < math.pi:
            raise InvalidGeometry(f"opening angle {self.opening_angle} outside (0, pi)")
        object.__setattr__(self, "mouth_bisector", normalize_angle(self.mouth_bisector))

    def boundary_rays(self) -> tuple[float, float]:
        half = 0.5 * self.opening_angle
        return self.mouth_bisector - half, self.mouth_bisector + half


@dataclass(frozen=True)
class PerturbationRecord:
    kind: PerturbationKind = PerturbationKind.NONE
    target_vertices: tuple[int, ...] = ()
    offset_distance: float = 0.0
    offset_sign: int = 0
    angle_delta: float = 0.0
    rotation_deltas: tuple[float, ...] = ()

    def __post_init__(self):
        n = len(self.target_vertices)
        if (self.kind is PerturbationKind.NONE) != (n == 0):
            raise ValueError("kind=NONE must coincide with an empty target set")
        if self.kind in (PerturbationKind.OFFSET, PerturbationKind.ANGLE) and n != 1:
            raise ValueError(f"{self.kind.value} perturbation needs exactly one target")
        if self.kind is PerturbationKind.ROT:
            if not 1 <= n <= 3 or len(set(self.target_vertices)) != n:
                raise ValueError("rot perturbation needs 1-3 distinct targets")
            if len(self.rotation_deltas) != n:
                raise ValueError("one rotation delta per target required")


@dataclass(frozen=True)
class StimulusSpec:
    inducers: tuple[InducerSpec, InducerSpec, InducerSpec]
    label: Label
    record: PerturbationRecord
    pose: TrianglePose

    def __post_init__(self):
        if len(self.inducers) != 3:
            raise ValueError("a stimulus has exactly three inducers")
        if (self.label is Label.VALID) != (self.record.kind is PerturbationKind.NONE):
            raise ValueError("label must be VALID exactly when there is no perturbation")


@dataclass(frozen=True)
class OracleTolerance:
    angle_tol: float = math.radians(2.0)


@dataclass(frozen=True)
class GeometryRanges:
    """Sampling ranges for poses and perturbations (angles in radians)."""

    circumradius: tuple[float, float] = (0.22, 0.34)
    r_ratio: tuple[float, float] = (0.18, 0.24)
    margin: float = 0.02
    min_gap: float = 0.01
    offset_d: tuple[float, float] = (0.06, 0.20)
    offset_direction: str = "parallel"
    angle_delta: tuple[float, float] = (math.radians(8.0), math.radians(35.0))
    rot_delta: tuple[float, float] = (math.radians(12.0), math.pi)
    aspect: float = 1.0  # image height / width
    max_retries: int = 100


DEFAULT_RANGES = GeometryRanges()


def vertices_of(pose: TrianglePose) -> list[Point2]:
    cx, cy = pose.centroid
    R = pose.circumradius
    out = []
    for k in range(3):
        a = pose.orientation + TWO_PI * k / 3.0
        out.append(Point2(cx + R * math.cos(a), cy + R * math.sin(a)))
    return out


def side_length(pose: TrianglePose) -> float:
    return math.sqrt(3.0) * pose.circumradius


def _direction(p: Point2, q: Point2) -> float:
    return math.atan2(q[1] - p[1], q[0] - p[0])


def check_invariants(inducers, ranges: GeometryRanges = DEFAULT_RANGES) -> None:
    """Raise InvalidGeometry on overlapping inducers or margin violations."""
    for i in range(3):
        a = inducers[i]
        for j in range(i + 1, 3):
            b = inducers[j]
            dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
            if dist <= a.radius + b.radius + ranges.min_gap:
                raise InvalidGeometry(f"inducers {i} and {j} overlap (distance {dist:.4f})")
        m = ranges.margin
        x, y = a.center
        if (x - a.radius < m or x + a.radius > 1.0 - m
                or y - a.radius < m or y + a.radius > ranges.aspect - m):
            raise InvalidGeometry(f"inducer {i} leaves the image margin")


def make_valid(pose: TrianglePose, r_ratio: float,
               ranges: GeometryRanges = DEFAULT_RANGES) -> StimulusSpec:
    verts = vertices_of(pose)
    radius = r_ratio * side_length(pose)
    inducers = []
    for k in range(3):
        p = verts[k]
        a = _direction(p, verts[(k + 1) % 3])
        b = _direction(p, verts[(k + 2) % 3])
        bis = math.atan2(math.sin(a) + math.sin(b), math.cos(a) + math.cos(b))
        opening = abs(wrap_angle(a - b))
        inducers.append(InducerSpec(p, radius, bis, opening))
    check_invariants(inducers, ranges)
    return StimulusSpec(tuple(inducers), Label.VALID, PerturbationRecord(), pose)


def _require_valid(stim: StimulusSpec) -> None:
    if stim.label is not Label.VALID:
        raise ValueError("perturbations apply to valid stimuli only")


def perturb_offset(stim: StimulusSpec, k: int, d: float, sign: int,
                   ranges: GeometryRanges = DEFAULT_RANGES) -> StimulusSpec:
    """Translate inducer ``k`` by ``sign * d * side``.

    With ``ranges.offset_direction == "parallel"`` the translation runs along
    the segment joining the other two centers; with ``"toward"`` it runs
    perpendicular to that segment, positive sign moving toward it.
    Mouth directions are left unchanged in the world frame.
    """
    _require_valid(stim)
    if sign not in (-1, 1):
        raise ValueError("sign must be +1 or -1")
    ind = stim.inducers
    p = ind[k].center
    a, b = ind[(k + 1) % 3].center, ind[(k + 2) % 3].center
    ux, uy = b[0] - a[0], b[1] - a[1]
    norm = math.hypot(ux, uy)
    ux, uy = ux / norm, uy / norm
    if ranges.offset_direction == "toward":
        # perpendicular pointing from p toward the line ab
        nx, ny = -uy, ux
        if (a[0] - p[0]) * nx + (a[1] - p[1]) * ny < 0:
            nx, ny = -nx, -ny
        ux, uy = nx, ny
    elif ranges.offset_direction != "parallel":
        raise ValueError(f"unknown offset direction {ranges.offset_direction!r}")
    step = sign * d * side_length(stim.pose)
    moved = replace(ind[k], center=Point2(p[0] + step * ux, p[1] + step * uy))
    inducers = tuple(moved if i == k else ind[i] for i in range(3))
    check_invariants(inducers, ranges)
    rec = PerturbationRecord(PerturbationKind.OFFSET, (k,), offset_distance=d, offset_sign=sign)
    return StimulusSpec(inducers, Label.INVALID, rec, stim.pose)


def perturb_angle(stim: StimulusSpec, k: int, delta: float,
                  ranges: GeometryRanges = DEFAULT_RANGES) -> StimulusSpec:
    _require_valid(stim)
    if delta == 0.0:
        raise ValueError("angle delta must be non-zero")
    old = stim.inducers[k]
    new_angle = old.opening_angle + delta
    if not 0.0 < new_angle < math.pi:
        raise InvalidGeometry(f"opening angle {new_angle:.4f} outside (0, pi)")
    moved = replace(old, opening_angle=new_angle)
    inducers = tuple(moved if i == k else stim.inducers[i] for i in range(3))
    rec = PerturbationRecord(PerturbationKind.ANGLE, (k,), angle_delta=delta)
    return StimulusSpec(inducers, Label.INVALID, rec, stim.pose)


def perturb_rot(stim: StimulusSpec, targets, deltas,
                ranges: GeometryRanges = DEFAULT_RANGES) -> StimulusSpec:
    _require_valid(stim)
    targets = tuple(int(t) for t in targets)
    deltas = tuple(float(wrap_angle(d)) for d in deltas)
    if len(targets) != len(deltas):
        raise ValueError("one delta per target required")
    if any(d == 0.0 for d in deltas):
        raise ValueError("rotation delta must not be a multiple of 2*pi")
    inducers = list(stim.inducers)
    for t, d in zip(targets, deltas):
        inducers[t] = replace(inducers[t], mouth_bisector=inducers[t].mouth_bisector + d)
    rec = PerturbationRecord(PerturbationKind.ROT, targets, rotation_deltas=deltas)
    return StimulusSpec(tuple(inducers), Label.INVALID, rec, stim.pose)


_KIND_TO_PERTURBATION = {
    DatasetKind.OFFS: PerturbationKind.OFFSET,
    DatasetKind.ANGLE: PerturbationKind.ANGLE,
    DatasetKind.ROT: PerturbationKind.ROT,
    DatasetKind.ROT1: PerturbationKind.ROT,
}
_COMB_CHOICES = (DatasetKind.OFFS, DatasetKind.ANGLE, DatasetKind.ROT)


def _signed_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    mag = rng.uniform(lo, hi)
    return mag if rng.random() < 0.5 else -mag


def _draw_perturbation(stim, kind, rng, ranges):
    k = int(rng.integers(3))
    if kind is DatasetKind.OFFS:
        d = float(rng.uniform(*ranges.offset_d))
        sign = 1 if rng.random() < 0.5 else -1
        return perturb_offset(stim, k, d, sign, ranges)
    if kind is DatasetKind.ANGLE:
        return perturb_angle(stim, k, _signed_uniform(rng, *ranges.angle_delta), ranges)
    n = 1 if kind is DatasetKind.ROT1 else int(rng.integers(1, 4))
    targets = sorted(int(t) for t in rng.choice(3, size=n, replace=False))
    deltas = [_signed_uniform(rng, *ranges.rot_delta) for _ in targets]
    return perturb_rot(stim, targets, deltas, ranges)


def make_invalid(stim: StimulusSpec, kind: DatasetKind, rng: np.random.Generator,
                 ranges: GeometryRanges = DEFAULT_RANGES) -> StimulusSpec:
    """Apply exactly one randomly drawn error of family ``kind``.

    For COMB the family itself is drawn uniformly from OFFS/ANGLE/ROT first.
    Parameter draws that break the geometry invariants are redrawn.
    """
    _require_valid(stim)
    kind = DatasetKind(kind)
    if kind is DatasetKind.COMB:
        kind = _COMB_CHOICES[int(rng.integers(3))]
    for _ in range(ranges.max_retries):
        try:
            return _draw_perturbation(stim, kind, rng, ranges)
        except InvalidGeometry:
            continue
    raise GenerationExhausted(
        f"no admissible {kind.value} perturbation after {ranges.max_retries} draws")


def sample_pose(rng: np.random.Generator, ranges: GeometryRanges = DEFAULT_RANGES):
    """Draw ``(pose, r_ratio)`` with the whole figure inside the margin box."""
    R = float(rng.uniform(*ranges.circumradius))
    orientation = float(rng.uniform(0.0, TWO_PI))
    r_ratio = float(rng.uniform(*ranges.r_ratio))
    r = r_ratio * math.sqrt(3.0) * R
    angles = orientation + TWO_PI * np.arange(3) / 3.0
    xs, ys = R * np.cos(angles), R * np.sin(angles)
    m = ranges.margin + 1e-9
    lo_x, hi_x = m + r - xs.min(), 1.0 - m - r - xs.max()
    lo_y, hi_y = m + r - ys.min(), ranges.aspect - m - r - ys.max()
    if lo_x > hi_x or lo_y > hi_y:
        raise InvalidGeometry("triangle does not fit into the image")
    centroid = Point2(float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
    return TrianglePose(centroid, R, orientation), r_ratio


def sample_stimulus(rng: np.random.Generator, label: Label, kind: DatasetKind,
                    ranges: GeometryRanges = DEFAULT_RANGES) -> StimulusSpec:
    """Draw a full stimulus; poses are redrawn while the geometry is inadmissible."""
    for _ in range(ranges.max_retries):
        try:
            pose, r_ratio = sample_pose(rng, ranges)
            stim = make_valid(pose, r_ratio, ranges)
        except InvalidGeometry:
            continue
        if label is Label.VALID:
            return stim
        return make_invalid(stim, kind, rng, ranges)
    raise GenerationExhausted(f"no admissible pose after {ranges.max_retries} draws")


def boundary_misalignment(stim: StimulusSpec) -> float:
    """Largest angular error between a wedge ray and its best center match.

    For each inducer both boundary rays are paired with the two other
    centers (the pairing with the smaller worst-case error wins); the
    function returns the worst error over all inducers. Zero for an exact
    Kanizsa figure.
    """
    worst = 0.0
    ind = stim.inducers
    for k in range(3):
        c = ind[k].center
        d1 = _direction(c, ind[(k + 1) % 3].center)
        d2 = _direction(c, ind[(k + 2) % 3].center)
        r1, r2 = ind[k].boundary_rays()
        straight = max(abs(wrap_angle(r1 - d1)), abs(wrap_angle(r2 - d2)))
        crossed = max(abs(wrap_angle(r1 - d2)), abs(wrap_angle(r2 - d1)))
        worst = max(worst, min(straight, crossed))
    return float(worst)


def oracle_is_valid(stim: StimulusSpec, tol: OracleTolerance = OracleTolerance()) -> bool:
    return boundary_misalignment(stim) <= tol.angle_tol


def transform_stimulus(stim: StimulusSpec, angle: float = 0.0, scale: float = 1.0,
                       shift=(0.0, 0.0), mirror: bool = False) -> StimulusSpec:
    """Apply ``p -> scale * Rot(angle) * M p + shift`` to every inducer.

    ``M`` is the reflection x -> -x when ``mirror`` is set. The result is not
    checked against the image margin; it is a geometric utility.
    """
    ca, sa = math.cos(angle), math.sin(angle)

    def move(p):
        x, y = (-p[0], p[1]) if mirror else (p[0], p[1])
        return Point2(scale * (ca * x - sa * y) + shift[0], scale * (sa * x + ca * y) + shift[1])

    def turn(theta):
        return (math.pi - theta if mirror else theta) + angle

    inducers = tuple(
        InducerSpec(move(i.center), scale * i.radius, turn(i.mouth_bisector), i.opening_angle)
        for i in stim.inducers)
    pose = TrianglePose(move(stim.pose.centroid), scale * stim.pose.circumradius,
                        normalize_angle(turn(stim.pose.orientation)))
    return StimulusSpec(inducers, stim.label, stim.record, pose)


def mirror_horizontal(stim: StimulusSpec) -> StimulusSpec:
    """Reflect about the vertical image axis x = 0.5."""
    inducers = tuple(
        InducerSpec(Point2(1.0 - i.center[0], i.center[1]), i.radius,
                    math.pi - i.mouth_bisector, i.opening_angle)
        for i in stim.inducers)
    c = stim.pose.centroid
    pose = TrianglePose(Point2(1.0 - c[0], c[1]), stim.pose.circumradius,
                        normalize_angle(math.pi - stim.pose.orientation))
    return StimulusSpec(inducers, stim.label, stim.record, pose)
