"""Sensor-relative rotation grouping of objects.

Every object is assigned to one of G angular slices based on how the sensor
sees it: the slice of (bearing - yaw) mod 2*pi, which is the position an
equivalent forward-facing object with the same incidence angle would occupy.
Slices are centered on the reference angles beta_g = (g-1) * 2*pi/G and
half-open on the upper side, so boundary angles resolve deterministically.

Axis-aligned boxes carry no heading sign, only an orientation modulo pi
(from the longer horizontal side). They are grouped on a 2G-slice scheme and
opposite slice pairs (g, g+G) fold onto g, giving G usable fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloudio import PointCloud
from .geometry import OrientedBox, bearing, wrap_2pi

# w ~ l within this tolerance leaves the long-side orientation undefined
AMBIGUOUS_EXTENT_EPS = 1e-6


@dataclass(frozen=True)
class GroupScheme:
    """G angular slices of width 2*pi/G centered on beta_g = (g-1)*2*pi/G."""

    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("group count must be >= 1")

    @property
    def slice_width(self) -> float:
        return 2.0 * math.pi / self.count

    def reference_angle(self, group: int) -> float:
        """beta_g for a 1-based group index."""
        if not 1 <= group <= self.count:
            raise ValueError(f"group must be in 1..{self.count}")
        return (group - 1) * self.slice_width

    def slice_of(self, angle: float) -> int:
        """1-based index of the half-open slice [beta_g - w/2, beta_g + w/2)."""
        width = self.slice_width
        shifted = wrap_2pi(float(angle) + width / 2.0)
        index = int(shifted // width)
        return index % self.count + 1


def group_of(box: OrientedBox, sensor, scheme: GroupScheme) -> int:
    """Rotation group of an oriented object as seen from ``sensor``."""
    return scheme.slice_of(bearing(box.center, sensor) - box.yaw)


def fold_opposite(group: int, count: int) -> int:
    """Fold slice indices of a 2*count scheme so g and g+count coincide."""
    return (group - 1) % count + 1


def group_of_axis_aligned(box: OrientedBox, sensor, scheme: GroupScheme) -> int:
    """Group for an axis-aligned box whose yaw is only known modulo pi.

    The box is scored on the doubled (2G-slice) scheme with its yaw reduced
    mod pi, then opposite slices are folded together.
    """
    doubled = GroupScheme(2 * scheme.count)
    theta = bearing(box.center, sensor) - math.fmod(box.yaw, math.pi)
    return fold_opposite(doubled.slice_of(theta), scheme.count)


def pseudo_yaw(subject):
    """Orientation of the longer horizontal extent, modulo pi.

    Accepts an :class:`OrientedBox` (long side from length vs width) or an
    (n, 3)/(n, 2) point array (principal horizontal axis of the spread).
    Returns ``(angle, ambiguous)``; near-isotropic subjects give (0.0, True).
    """
    if isinstance(subject, OrientedBox):
        if abs(subject.length - subject.width) < AMBIGUOUS_EXTENT_EPS:
            return 0.0, True
        angle = subject.yaw if subject.length >= subject.width else subject.yaw + math.pi / 2.0
        return math.fmod(wrap_2pi(angle), math.pi), False

    points = np.asarray(subject, dtype=float)
    if points.ndim != 2 or len(points) < 3:
        raise ValueError("pseudo yaw from points needs at least 3 points")
    xy = points[:, :2] - points[:, :2].mean(axis=0)
    cov = xy.T @ xy / len(xy)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] - eigvals[0] < AMBIGUOUS_EXTENT_EPS * max(eigvals[1], 1.0):
        return 0.0, True
    main = eigvecs[:, 1]  # eigenvalues ascending; last = principal axis
    return math.fmod(wrap_2pi(math.atan2(main[1], main[0])), math.pi), False


def axis_aligned_box_of_instance(cloud: PointCloud, instance_id: int,
                                 step: float) -> OrientedBox | None:
    """World-axis-aligned bounding box of an instance, None if under 3 points.

    Extents are inflated by step/2 per side so boundary points have lattice
    roots on their interior side. The yaw encodes the pseudo orientation: the
    long horizontal side becomes the box length (yaw 0 or pi/2).
    """
    points = cloud.xyz[cloud.instance == instance_id]
    if len(points) < 3:
        return None
    low = points.min(axis=0) - step / 2.0
    high = points.max(axis=0) + step / 2.0
    center = (low + high) / 2.0
    ex, ey, ez = high - low
    if ex >= ey:
        return OrientedBox(center, width=ey, height=ez, length=ex, yaw=0.0)
    return OrientedBox(center, width=ex, height=ez, length=ey, yaw=math.pi / 2.0)
