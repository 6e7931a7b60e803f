"""Exact 3D primitives: rays, yaw-oriented boxes, rigid transforms, angles.

All angles are in radians; degrees exist only at the CLI boundary. Boxes are
yaw-only (no pitch/roll): ``length`` runs along the local x axis, ``width``
along local y, ``height`` along local z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Monte-Carlo volume sampling for boxes with unequal yaws (see iou_3d).
_MC_SAMPLES = 20_000
_MC_SEED = 20240

__all__ = [
    "Ray",
    "OrientedBox",
    "RigidTransform",
    "wrap_2pi",
    "wrap_pi",
    "rot_z",
    "project_onto_ray",
    "box_contains",
    "box_contains_many",
    "iou_3d",
    "bearing",
]


def wrap_2pi(angle):
    """Wrap an angle (scalar or array) to [0, 2*pi)."""
    return np.mod(angle, TWO_PI)


def wrap_pi(angle):
    """Wrap an angle (scalar or array) to [-pi, pi)."""
    return np.mod(np.asarray(angle) + math.pi, TWO_PI) - math.pi


def rot_z(angle: float) -> np.ndarray:
    """3x3 rotation about +z, counter-clockwise seen from above."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _as_vec3(value, name: str) -> np.ndarray:
    v = np.asarray(value, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must have finite components, got {v}")
    return v


@dataclass(frozen=True)
class Ray:
    """Half line from ``origin`` along a unit ``direction``."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin, "origin"))
        d = _as_vec3(self.direction, "direction")
        norm = np.linalg.norm(d)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"ray direction must be unit-norm, |d| = {norm!r}")
        object.__setattr__(self, "direction", d)

    @classmethod
    def through(cls, origin, target) -> "Ray":
        """Ray from ``origin`` towards ``target`` (must be distinct points)."""
        origin = _as_vec3(origin, "origin")
        delta = _as_vec3(target, "target") - origin
        norm = np.linalg.norm(delta)
        if norm < 1e-12:
            raise ValueError("ray target coincides with origin")
        return cls(origin, delta / norm)


@dataclass(frozen=True)
class OrientedBox:
    """Yaw-oriented box: center, width (y), height (z), length (x), yaw."""

    center: np.ndarray
    width: float
    height: float
    length: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))
        for name in ("width", "height", "length"):
            value = float(getattr(self, name))
            if not (value > 0.0 and math.isfinite(value)):
                raise ValueError(f"box {name} must be positive, got {value}")
            object.__setattr__(self, name, value)
        yaw = float(self.yaw)
        if not math.isfinite(yaw):
            raise ValueError("box yaw must be finite")
        object.__setattr__(self, "yaw", float(wrap_pi(yaw)))

    @property
    def volume(self) -> float:
        return self.width * self.height * self.length

    @property
    def half_extents(self) -> np.ndarray:
        """Half sizes along the local (x, y, z) = (length, width, height) axes."""
        return np.array([self.length / 2.0, self.width / 2.0, self.height / 2.0])

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Express world points (n, 3) in the box frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.center) @ rot_z(self.yaw)

    def to_world(self, points: np.ndarray) -> np.ndarray:
        """Express box-local points (n, 3) in the world frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ rot_z(self.yaw).T + self.center

    def corners(self) -> np.ndarray:
        """The 8 world-frame corners, shape (8, 3)."""
        h = self.half_extents
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=float,
        )
        return self.to_world(signs * h)

    def scaled(self, factor: float) -> "OrientedBox":
        return OrientedBox(
            self.center,
            self.width * factor,
            self.height * factor,
            self.length * factor,
            self.yaw,
        )


@dataclass(frozen=True)
class RigidTransform:
    """Yaw rotation about +z followed by a translation."""

    yaw: float
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _as_vec3(self.translation, "translation"))
        object.__setattr__(self, "yaw", float(self.yaw))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(0.0, np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ rot_z(self.yaw).T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.yaw + other.yaw,
            rot_z(self.yaw) @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(-self.yaw, -(rot_z(-self.yaw) @ self.translation))


def project_onto_ray(v, ray: Ray) -> np.ndarray:
    """Project a 3-vector onto the ray direction: (v . d) d."""
    v = np.asarray(v, dtype=float)
    d = ray.direction
    return (v @ d) * d


def box_contains(box: OrientedBox, point) -> bool:
    """True iff ``point``, expressed in the box frame, lies within the half extents."""
    local = box.to_local(np.asarray(point, dtype=float).reshape(1, 3))[0]
    return bool(np.all(np.abs(local) <= box.half_extents))


def box_contains_many(box: OrientedBox, points: np.ndarray) -> np.ndarray:
    """Vectorized membership test for an (n, 3) array of world points."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros(0, dtype=bool)
    local = box.to_local(pts)
    return np.all(np.abs(local) <= box.half_extents, axis=1)


def _aabb_disjoint(a: OrientedBox, b: OrientedBox) -> bool:
    ca, cb = a.corners(), b.corners()
    return bool(
        np.any(ca.max(axis=0) < cb.min(axis=0)) or np.any(cb.max(axis=0) < ca.min(axis=0))
    )


def iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    """Volume intersection-over-union of two yaw-oriented boxes.

    Equal yaws are handled exactly by rotating both boxes into a's frame and
    intersecting axis-aligned extents. Unequal yaws fall back to Monte-Carlo
    volume sampling (fixed seed, 20k points), which is stable to ~1e-2 and
    sufficient for overlap weighting and threshold checks at this scale.
    """
    if _aabb_disjoint(a, b):
        return 0.0
    if abs(float(wrap_pi(a.yaw - b.yaw))) < 1e-12:
        cb = a.to_local(b.center.reshape(1, 3))[0]
        ha, hb = a.half_extents, b.half_extents
        overlap = np.minimum(ha, cb + hb) - np.maximum(-ha, cb - hb)
        if np.any(overlap <= 0.0):
            return 0.0
        inter = float(np.prod(overlap))
    else:
        rng = np.random.default_rng(_MC_SEED)
        local = (rng.random((_MC_SAMPLES, 3)) - 0.5) * (2.0 * a.half_extents)
        world = a.to_world(local)
        frac = float(np.count_nonzero(box_contains_many(b, world))) / _MC_SAMPLES
        inter = frac * a.volume
    union = a.volume + b.volume - inter
    return min(inter / union, 1.0)


def bearing(point, sensor) -> float:
    """Horizontal angle of (point - sensor), counter-clockwise from +x, in [0, 2*pi).

    Raises ValueError when the point sits on the sensor's vertical axis
    (horizontal distance below 1e-9), where the angle is undefined.
    """
    delta = _as_vec3(point, "point") - _as_vec3(sensor, "sensor")
    if math.hypot(delta[0], delta[1]) < 1e-9:
        raise ValueError("bearing undefined: point on the sensor's vertical axis")
    return float(wrap_2pi(math.atan2(delta[1], delta[0])))
