"""Learnable displacement lattices and their constrained application.

A vector field is a regular lattice of 4-component vectors (x, y, z shift in
meters plus an intensity shift) living in the local frame of a reference box.
Applying a field to an object anchors the lattice to the object's box (roots
scale, vectors only rotate), assigns every point inside the box to its k
nearest roots with inverse-distance weights, and moves each point strictly
along its sensor view ray by the projected weighted vector sum. Intensity
shifts are weighted the same way and the result is clipped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cloudio import PointCloud
from .geometry import OrientedBox, rot_z

# Points closer than this to a root are hard-assigned to it (weight 1),
# avoiding the 1/d blow-up.
COINCIDENT_EPS = 1e-9


@dataclass
class VectorField:
    """Lattice of learnable displacement vectors for one (group, variant) slot."""

    dims: tuple          # reference box (w0, h0, l0) in meters
    step: float          # lattice step t in meters
    roots: np.ndarray    # (m, 3) lattice coordinates, box-local frame
    vectors: np.ndarray  # (m, 4) x/y/z shift in meters + intensity shift
    group: int = 1       # rotation group g, 1-based
    variant: int = 1     # variant n, 1-based
    class_id: int = 0

    def __post_init__(self):
        self.roots = np.asarray(self.roots, dtype=float).reshape(-1, 3)
        self.vectors = np.asarray(self.vectors, dtype=float).reshape(-1, 4)
        if len(self.roots) != len(self.vectors):
            raise ValueError("roots and vectors must have equal length")

    @property
    def size(self) -> int:
        return len(self.roots)

    def copy(self) -> "VectorField":
        return VectorField(self.dims, self.step, self.roots.copy(), self.vectors.copy(),
                           self.group, self.variant, self.class_id)


@dataclass
class FieldBank:
    """All G x N vector fields for one class, sharing dims and step."""

    class_id: int
    class_name: str
    groups: int                     # G
    variants: int                   # N
    fields: list = dc_field(default_factory=list)
    eps: float = 0.3
    psi: float = 0.3

    def __post_init__(self):
        if len(self.fields) != self.groups * self.variants:
            raise ValueError(
                f"bank needs G*N = {self.groups * self.variants} fields, got {len(self.fields)}"
            )
        seen = {(f.group, f.variant) for f in self.fields}
        if len(seen) != len(self.fields):
            raise ValueError("bank has duplicate (group, variant) slots")
        ref = self.fields[0]
        for f in self.fields:
            if f.dims != ref.dims or f.step != ref.step:
                raise ValueError("all fields in a bank must share dims and step")

    @property
    def dims(self) -> tuple:
        return self.fields[0].dims

    @property
    def step(self) -> float:
        return self.fields[0].step

    def field(self, group: int, variant: int) -> VectorField:
        for f in self.fields:
            if f.group == group and f.variant == variant:
                return f
        raise KeyError(f"no field for group {group}, variant {variant}")

    def copy(self) -> "FieldBank":
        return FieldBank(self.class_id, self.class_name, self.groups, self.variants,
                         [f.copy() for f in self.fields], self.eps, self.psi)


@dataclass
class DeformationPlan:
    """Frozen point-to-root assignment for one (cloud, box) pair.

    Computed once from the clean cloud; during optimization only the vectors
    change, so the point shift stays linear in the vector components.
    """

    point_idx: np.ndarray     # (a,) indices of affected points in the cloud
    neighbor_idx: np.ndarray  # (a, k) root indices, nearest first
    weights: np.ndarray       # (a, k) nonnegative, rows sum to 1
    rays: np.ndarray          # (a, 3) unit directions sensor -> point
    yaw: float                # box yaw used to anchor the field

    @property
    def n_affected(self) -> int:
        return len(self.point_idx)


def lattice_counts(dims, step: float) -> tuple:
    """Cells per local axis (x=length, y=width, z=height): floor(extent / step)."""
    w, h, l = (float(d) for d in dims)
    step = float(step)
    if step <= 0.0 or min(w, h, l) <= 0.0:
        raise ValueError("dims and step must be positive")
    if step > min(w, h, l):
        raise ValueError(f"step {step} exceeds smallest box extent {min(w, h, l)}")
    # the tiny bias keeps exact-ratio extents (e.g. 4.6 / 0.2) from
    # truncating one cell short under binary rounding
    count = lambda extent: int(math.floor(extent / step + 1e-9))
    return count(l), count(w), count(h)


def build_lattice(dims, step: float, group: int = 1, variant: int = 1,
                  class_id: int = 0) -> VectorField:
    """Zero-initialized field with roots at the cell centers of the lattice.

    ``dims`` is (w0, h0, l0); the grid has floor(extent/step) cells per axis
    and is centered in the box, so roots sit at cell centers symmetric about
    the box center.
    """
    nx, ny, nz = lattice_counts(dims, step)
    axes = [(np.arange(n) + 0.5 - n / 2.0) * step for n in (nx, ny, nz)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    roots = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    return VectorField(
        dims=tuple(float(d) for d in dims),
        step=float(step),
        roots=roots,
        vectors=np.zeros((len(roots), 4)),
        group=group,
        variant=variant,
        class_id=class_id,
    )


def init_random(field: VectorField, seed) -> None:
    """Draw every component from U(-0.01, 0.01), in place, deterministic per seed."""
    rng = np.random.default_rng(seed)
    field.vectors[:] = rng.uniform(-0.01, 0.01, size=field.vectors.shape)


def field_init_seed(base_seed: int, group: int, variant: int) -> np.random.SeedSequence:
    """Per-slot init seed; shared with the activity analysis for reproduction."""
    return np.random.SeedSequence([int(base_seed), 29, int(group), int(variant)])


def make_bank(class_id: int, class_name: str, dims, step: float, groups: int,
              variants: int, seed: int, eps: float = 0.3, psi: float = 0.3) -> FieldBank:
    """Build a randomly initialized G x N bank sharing one lattice geometry."""
    fields = []
    for group in range(1, groups + 1):
        for variant in range(1, variants + 1):
            fld = build_lattice(dims, step, group=group, variant=variant,
                                class_id=class_id)
            init_random(fld, field_init_seed(seed, group, variant))
            fields.append(fld)
    return FieldBank(class_id=class_id, class_name=class_name, groups=groups,
                     variants=variants, fields=fields, eps=eps, psi=psi)


def anchor(field: VectorField, box: OrientedBox) -> np.ndarray:
    """World-frame root positions of the field anchored to ``box``.

    Roots scale per axis to fit the box, then rotate by the box yaw and
    translate to its center. Vectors are anchored separately (rotation only,
    no scaling) by :func:`anchored_vectors`.
    """
    w0, h0, l0 = field.dims
    scale = np.array([box.length / l0, box.width / w0, box.height / h0])
    return (field.roots * scale) @ rot_z(box.yaw).T + box.center


def anchored_vectors(field: VectorField, yaw: float) -> np.ndarray:
    """Spatial vector components rotated into the world frame, shape (m, 3)."""
    return field.vectors[:, :3] @ rot_z(yaw).T


def plan_deformation(cloud: PointCloud, box: OrientedBox, field: VectorField,
                     sensor, k: int) -> DeformationPlan:
    """Assign every point inside ``box`` to its k nearest anchored roots.

    Weights are 1/d normalized; a point within 1e-9 of a root is assigned
    entirely to that root (lowest index wins ties). Rays point from the
    sensor to each point and must be well defined (no point at the sensor).
    """
    from .geometry import box_contains_many

    if k < 1:
        raise ValueError("k must be >= 1")
    sensor = np.asarray(sensor, dtype=float).reshape(3)
    inside = np.flatnonzero(box_contains_many(box, cloud.xyz))
    k_eff = min(int(k), field.size)

    points = cloud.xyz[inside]
    deltas = points - sensor
    norms = np.linalg.norm(deltas, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("point coincides with the sensor; ray undefined")
    rays = deltas / norms[:, None]

    roots = anchor(field, box)
    if len(inside) == 0:
        return DeformationPlan(inside, np.zeros((0, k_eff), dtype=np.int64),
                               np.zeros((0, k_eff)), rays, box.yaw)

    dist = np.linalg.norm(points[:, None, :] - roots[None, :, :], axis=2)
    # stable argsort keeps the lower root index first among exact ties
    order = np.argsort(dist, axis=1, kind="stable")[:, :k_eff]
    d = np.take_along_axis(dist, order, axis=1)

    weights = np.empty_like(d)
    coincident = d[:, 0] < COINCIDENT_EPS
    safe = ~coincident
    if np.any(safe):
        inv = 1.0 / d[safe]
        weights[safe] = inv / inv.sum(axis=1, keepdims=True)
    if np.any(coincident):
        weights[coincident] = 0.0
        weights[coincident, 0] = 1.0

    return DeformationPlan(inside, order, weights, rays, box.yaw)


def _weighted_world_vectors(plan: DeformationPlan, field: VectorField):
    """Per affected point: weighted world-frame spatial vector and intensity shift."""
    world = anchored_vectors(field, plan.yaw)
    vsum = np.einsum("ak,akc->ac", plan.weights, world[plan.neighbor_idx])
    tau_sum = np.einsum("ak,ak->a", plan.weights, field.vectors[plan.neighbor_idx, 3])
    return vsum, tau_sum


def deform(cloud: PointCloud, plan: DeformationPlan, field: VectorField) -> PointCloud:
    """Apply the field to the planned points; everything else is untouched.

    Each point moves along its own view ray by the ray projection of its
    weighted vector sum; its intensity moves by the weighted intensity shift
    and is clipped back to [0, 1]. Labels never change.
    """
    out = cloud.copy()
    if plan.n_affected == 0:
        return out
    vsum, tau_sum = _weighted_world_vectors(plan, field)
    along = np.einsum("ac,ac->a", vsum, plan.rays)
    out.xyz[plan.point_idx] += along[:, None] * plan.rays
    out.intensity[plan.point_idx] = np.clip(
        cloud.intensity[plan.point_idx] + tau_sum, 0.0, 1.0
    )
    return out


def clamp_field(field: VectorField, eps: float, psi: float) -> None:
    """Clip spatial components to [-eps, eps] and the intensity shift to [-psi, psi]."""
    if eps <= 0.0 or psi <= 0.0:
        raise ValueError("eps and psi must be positive")
    np.clip(field.vectors[:, :3], -eps, eps, out=field.vectors[:, :3])
    np.clip(field.vectors[:, 3], -psi, psi, out=field.vectors[:, 3])


class ShiftJacobian:
    """Linear map from field vector components to planned point outputs.

    The displacement of point i w.r.t. the world-frame vector at root j is
    w_ij * u_i u_i^T (zero for non-neighbors); intensity shifts pass through
    with weight w_ij wherever the [0, 1] clip is inactive. Gradients are
    returned in the field-local frame that the optimizer updates.
    """

    def __init__(self, plan: DeformationPlan):
        self.plan = plan
        self._rot = rot_z(plan.yaw)

    def displacement_block(self, row: int, root: int) -> np.ndarray:
        """d p'_i / d v_j (world frame) for affected-point row i and root j."""
        plan = self.plan
        u = plan.rays[row]
        matches = np.flatnonzero(plan.neighbor_idx[row] == root)
        if matches.size == 0:
            return np.zeros((3, 3))
        w = float(plan.weights[row, matches].sum())
        return w * np.outer(u, u)

    def tau_clip_active(self, cloud: PointCloud, field: VectorField) -> np.ndarray:
        """True where the intensity clip saturates for the planned points."""
        plan = self.plan
        _, tau_sum = _weighted_world_vectors(plan, field)
        raw = cloud.intensity[plan.point_idx] + tau_sum
        return (raw < 0.0) | (raw > 1.0)

    def vector_gradient(self, d_positions: np.ndarray, d_intensity: np.ndarray,
                        field_size: int, clip_active=None) -> np.ndarray:
        """Accumulate per-point upstream gradients into an (m, 4) field gradient.

        ``d_positions`` is (a, 3) w.r.t. deformed positions of the affected
        points, ``d_intensity`` (a,) w.r.t. their clipped intensities.
        """
        plan = self.plan
        grad = np.zeros((field_size, 4))
        if plan.n_affected == 0:
            return grad
        along = np.einsum("ac,ac->a", np.asarray(d_positions, dtype=float), plan.rays)
        # world-frame gradient per (point, neighbor): w_ij * (u . dL/dp') * u
        contrib = plan.weights[:, :, None] * (along[:, None, None] * plan.rays[:, None, :])
        np.add.at(grad[:, :3], plan.neighbor_idx, contrib)
        grad[:, :3] = grad[:, :3] @ self._rot  # back to the field-local frame

        d_tau = np.asarray(d_intensity, dtype=float).copy()
        if clip_active is not None:
            d_tau = np.where(np.asarray(clip_active, dtype=bool), 0.0, d_tau)
        np.add.at(grad[:, 3], plan.neighbor_idx, plan.weights * d_tau[:, None])
        return grad


def shift_jacobian(plan: DeformationPlan) -> ShiftJacobian:
    return ShiftJacobian(plan)
