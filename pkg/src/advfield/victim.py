"""Frozen attackable targets: a per-point segmenter and an anchor-grid detector.

Both heads are small tanh MLPs over order-invariant neighborhood statistics,
with reverse-mode gradients written out by hand for parameters and, crucially,
for the raw inputs (positions and intensities) so that projected-gradient
attacks can differentiate straight through them. Neighborhoods come from
uniform-grid binning; bin membership is piecewise constant, so the input
gradients are exact almost everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .cloudio import FormatError, PointCloud

CKPT_MAGIC = "advfield-ckpt"
CKPT_VERSION = 1

# fixed feature normalization; changing these changes the architecture
_REL_SCALE = 2.0     # relative offsets, +-0.5 m -> +-1
_Z_SCALE = 0.3       # absolute height, buildings ~10 m -> ~3
_COUNT_SCALE = 0.4   # log1p(point count)

_KEY_SHIFT = 1 << 19
_KEY_BITS = 20


def _grid_keys(xyz: np.ndarray, cell: float) -> np.ndarray:
    """Collapse integer voxel coordinates into one sortable int64 key."""
    ids = np.floor(xyz / cell).astype(np.int64) + _KEY_SHIFT
    if ids.size and (ids.min() < 0 or ids.max() >= (1 << _KEY_BITS)):
        raise ValueError("point coordinates exceed the supported grid range")
    return (ids[:, 0] << (2 * _KEY_BITS)) | (ids[:, 1] << _KEY_BITS) | ids[:, 2]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _Mlp:
    """Two tanh hidden layers and a linear output, all float64."""

    def __init__(self, n_in: int, hidden: int, n_out: int):
        self.shapes = {
            "W1": (n_in, hidden), "b1": (hidden,),
            "W2": (hidden, hidden), "b2": (hidden,),
            "W3": (hidden, n_out), "b3": (n_out,),
        }
        self.params = {k: np.zeros(s) for k, s in self.shapes.items()}

    def init_random(self, seed) -> None:
        rng = np.random.default_rng(seed)
        for key, shape in self.shapes.items():
            if key.startswith("W"):
                fan_in = shape[0]
                self.params[key] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
            else:
                self.params[key] = np.zeros(shape)

    def forward(self, x: np.ndarray):
        p = self.params
        a1 = np.tanh(x @ p["W1"] + p["b1"])
        a2 = np.tanh(a1 @ p["W2"] + p["b2"])
        logits = a2 @ p["W3"] + p["b3"]
        return logits, (x, a1, a2)

    def backward(self, tape, dlogits: np.ndarray):
        """Returns (d_input, param_grads)."""
        x, a1, a2 = tape
        p = self.params
        grads = {"W3": a2.T @ dlogits, "b3": dlogits.sum(axis=0)}
        da2 = dlogits @ p["W3"].T
        dz2 = da2 * (1.0 - a2 * a2)
        grads["W2"] = a1.T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        da1 = dz2 @ p["W2"].T
        dz1 = da1 * (1.0 - a1 * a1)
        grads["W1"] = x.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        dx = dz1 @ p["W1"].T
        return dx, grads


# ---------------------------------------------------------------------------
# segmentation head
# ---------------------------------------------------------------------------

@dataclass
class SegTape:
    """Activations of one forward pass, consumed by the backward passes."""

    cloud: PointCloud
    inverse: np.ndarray       # (n,) voxel index per point
    counts: np.ndarray        # (nv,) points per voxel
    mlp_tape: tuple
    probs: np.ndarray


class SegNetMini:
    """Per-point semantic segmenter over local grid-neighborhood features.

    Features per point: offset to the centroid of its grid cell (cell size =
    ``radius``), height above ground, intensity, log point count of the cell,
    and the cell's mean intensity.
    """

    N_FEATURES = 7

    def __init__(self, n_classes: int, hidden: int = 64, radius: float = 0.5):
        self.n_classes = int(n_classes)
        self.hidden = int(hidden)
        self.radius = float(radius)
        self.mlp = _Mlp(self.N_FEATURES, self.hidden, self.n_classes)

    def init_random(self, seed) -> None:
        self.mlp.init_random(seed)

    def _features(self, cloud: PointCloud):
        keys = _grid_keys(cloud.xyz, self.radius)
        _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        nv = len(counts)
        sums = np.zeros((nv, 3))
        np.add.at(sums, inverse, cloud.xyz)
        centroids = sums / counts[:, None]
        tau_sums = np.zeros(nv)
        np.add.at(tau_sums, inverse, cloud.intensity)
        mean_tau = tau_sums / counts

        feats = np.empty((cloud.n, self.N_FEATURES))
        feats[:, 0:3] = (cloud.xyz - centroids[inverse]) * _REL_SCALE
        feats[:, 3] = cloud.xyz[:, 2] * _Z_SCALE
        feats[:, 4] = cloud.intensity
        feats[:, 5] = np.log1p(counts[inverse]) * _COUNT_SCALE
        feats[:, 6] = mean_tau[inverse]
        return feats, inverse, counts

    def forward(self, cloud: PointCloud, rows: np.ndarray | None = None):
        """Per-point class probabilities; rows restricts the MLP to a subset.

        Neighborhood statistics always come from the full cloud. Returns
        ``(probs, tape)``; with ``rows`` given, probs has one row per entry.
        """
        if cloud.n == 0:
            empty = np.zeros((0, self.n_classes))
            return empty, SegTape(cloud, np.zeros(0, np.int64), np.zeros(0, np.int64),
                                  (empty, empty, empty), empty)
        feats, inverse, counts = self._features(cloud)
        if rows is not None:
            feats = feats[rows]
        logits, mlp_tape = self.mlp.forward(feats)
        probs = _softmax(logits)
        return probs, SegTape(cloud, inverse, counts, mlp_tape, probs)

    def backward_params(self, tape: SegTape, dlogits: np.ndarray) -> dict:
        _, grads = self.mlp.backward(tape.mlp_tape, dlogits)
        return grads

    def backward_inputs(self, tape: SegTape, dlogits: np.ndarray):
        """Exact gradients w.r.t. (x, y, z) and intensity of every point.

        Only full-cloud tapes are supported (the neighborhood-mean terms need
        every point's feature gradient).
        """
        cloud = tape.cloud
        if len(tape.mlp_tape[0]) != cloud.n:
            raise ValueError("input gradients need a full-cloud forward pass")
        if cloud.n == 0:
            return np.zeros((0, 3)), np.zeros(0)
        dfeat, _ = self.mlp.backward(tape.mlp_tape, dlogits)

        nv = len(tape.counts)
        rel_sums = np.zeros((nv, 3))
        np.add.at(rel_sums, tape.inverse, dfeat[:, 0:3])
        rel_means = rel_sums / tape.counts[:, None]
        dpos = (dfeat[:, 0:3] - rel_means[tape.inverse]) * _REL_SCALE
        dpos[:, 2] += dfeat[:, 3] * _Z_SCALE

        mtau_sums = np.zeros(nv)
        np.add.at(mtau_sums, tape.inverse, dfeat[:, 6])
        dtau = dfeat[:, 4] + (mtau_sums / tape.counts)[tape.inverse]
        return dpos, dtau

    def predict(self, cloud: PointCloud) -> np.ndarray:
        probs, _ = self.forward(cloud)
        return probs.argmax(axis=1).astype(np.int32) if cloud.n else np.zeros(0, np.int32)

    def state(self) -> dict:
        meta = {"kind": "seg", "n_classes": self.n_classes, "hidden": self.hidden,
                "radius": self.radius}
        return meta, self.mlp.params

    @classmethod
    def from_state(cls, meta: dict, params: dict) -> "SegNetMini":
        model = cls(int(meta["n_classes"]), int(meta["hidden"]), float(meta["radius"]))
        model.mlp.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        return model


# ---------------------------------------------------------------------------
# detection head
# ---------------------------------------------------------------------------

CANONICAL_CAR = (1.8, 1.6, 4.6)  # (width, height, length) of the anchor template


@dataclass
class DetTape:
    cloud: PointCloud
    point_cell: np.ndarray     # (n,) flat cell index per point, -1 off-grid
    neighbor_counts: np.ndarray  # (A,) 3x3-neighborhood point count per anchor
    means: np.ndarray          # (A, 3) neighborhood mean positions
    mlp_tape: tuple


def _anchor_view_angles(centers: np.ndarray) -> np.ndarray:
    """Bearing of each anchor from the sensor pillar at the origin."""
    return np.arctan2(centers[:, 1], centers[:, 0])


class DetHeadMini:
    """Single-class detector over a ground-plane anchor grid.

    One axis-aligned anchor per 2 m cell at the canonical car size. Each
    anchor pools first and second point moments over its 3x3 cell
    neighborhood (integral-image box sums, so the receptive field spans a
    whole car); an MLP maps them to a confidence logit and box residuals
    (center offsets, log-size scales, doubled-angle yaw). Intensity is not
    used by this head.
    """

    N_FEATURES = 8
    N_OUTPUTS = 9  # score, dx, dy, dz, dlog w, dlog h, dlog l, sin 2a, cos 2a
    GROUND_CLIP = 0.25  # points at or below this height are not pooled

    def __init__(self, area: float = 64.0, stride: float = 2.0, hidden: int = 48):
        self.area = float(area)     # grid covers [-area, area) in x and y
        self.stride = float(stride)
        self.hidden = int(hidden)
        self.cells_per_axis = int(round(2 * self.area / self.stride))
        self.mlp = _Mlp(self.N_FEATURES, self.hidden, self.N_OUTPUTS)

    @property
    def n_anchors(self) -> int:
        return self.cells_per_axis ** 2

    def init_random(self, seed) -> None:
        self.mlp.init_random(seed)
        # confident-negative prior: empty anchors start well under relevance
        self.mlp.params["b3"][0] = -3.0

    def anchor_centers(self, anchors: np.ndarray) -> np.ndarray:
        ix, iy = np.divmod(np.asarray(anchors, dtype=np.int64), self.cells_per_axis)
        x = (ix + 0.5) * self.stride - self.area
        y = (iy + 0.5) * self.stride - self.area
        z = np.full(len(np.atleast_1d(x)), CANONICAL_CAR[1] / 2.0)
        return np.column_stack([np.atleast_1d(x).astype(float),
                                np.atleast_1d(y).astype(float), z])

    def _box_sum(self, grid: np.ndarray) -> np.ndarray:
        """3x3 neighborhood sums of a (K, K) per-cell grid."""
        padded = np.pad(grid, 1)
        integral = np.pad(padded.cumsum(axis=0).cumsum(axis=1), ((1, 0), (1, 0)))
        k = self.cells_per_axis
        # neighborhood of cell (i, j) spans padded rows i..i+2, cols j..j+2
        return (integral[3:3 + k, 3:3 + k] - integral[:k, 3:3 + k]
                - integral[3:3 + k, :k] + integral[:k, :k])

    def _pool(self, cloud: PointCloud):
        k = self.cells_per_axis
        ij = np.floor((cloud.xyz[:, :2] + self.area) / self.stride).astype(np.int64)
        valid = np.all((ij >= 0) & (ij < k), axis=1)
        valid &= cloud.xyz[:, 2] > self.GROUND_CLIP  # ground returns carry no box cue
        point_cell = np.where(valid, ij[:, 0] * k + ij[:, 1], -1)

        moments = np.zeros((7, k * k))
        rows = np.flatnonzero(valid)
        if rows.size:
            x, y, z = cloud.xyz[rows, 0], cloud.xyz[rows, 1], cloud.xyz[rows, 2]
            cells = point_cell[rows]
            for channel, values in enumerate(
                    (np.ones_like(x), x, y, z, x * x, y * y, x * y)):
                np.add.at(moments[channel], cells, values)
        sums = np.stack([self._box_sum(m.reshape(k, k)).ravel() for m in moments])

        count = sums[0]
        safe = np.maximum(count, 1.0)
        centers = self.anchor_centers(np.arange(k * k))
        means = sums[1:4].T / safe[:, None]
        # moments are expressed in each anchor's view frame (x radial from
        # the sensor, y tangential): the offset between a car's visible side
        # and its true center, and its yaw, only make sense relative to the
        # viewing direction
        phi = _anchor_view_angles(centers)
        cos_p, sin_p = np.cos(phi), np.sin(phi)
        off_x = means[:, 0] - centers[:, 0]
        off_y = means[:, 1] - centers[:, 1]
        var_x = sums[4] / safe - means[:, 0] ** 2
        var_y = sums[5] / safe - means[:, 1] ** 2
        cov2 = 2.0 * (sums[6] / safe - means[:, 0] * means[:, 1])
        dvar = var_x - var_y
        cos2, sin2 = np.cos(2 * phi), np.sin(2 * phi)

        feats = np.zeros((k * k, self.N_FEATURES))
        feats[:, 0] = np.log1p(count) * _COUNT_SCALE
        feats[:, 1] = cos_p * off_x + sin_p * off_y       # radial offset
        feats[:, 2] = -sin_p * off_x + cos_p * off_y      # tangential offset
        feats[:, 3] = means[:, 2] * _Z_SCALE
        feats[:, 4] = var_x + var_y                        # rotation invariant
        feats[:, 5] = cos2 * dvar + sin2 * cov2            # doubled-angle pair,
        feats[:, 6] = -sin2 * dvar + cos2 * cov2           # view frame
        own = np.zeros(k * k)
        if rows.size:
            np.add.at(own, point_cell[rows], 1.0)
        feats[:, 7] = np.log1p(own) * _COUNT_SCALE  # own-cell occupancy
        empty = count == 0
        feats[empty] = 0.0
        return feats, point_cell, count, means

    def forward(self, cloud: PointCloud):
        """Scores and raw outputs for every anchor -> (scores, outputs, tape)."""
        feats, point_cell, counts, means = self._pool(cloud)
        outputs, mlp_tape = self.mlp.forward(feats)
        scores = _sigmoid(outputs[:, 0])
        tape = DetTape(cloud, point_cell, counts, means, mlp_tape)
        return scores, outputs, tape

    def decode(self, anchors: np.ndarray, outputs: np.ndarray):
        """View-frame residuals -> (center (n,3), sizes (n,3) as w/h/l, yaw (n,))."""
        from .geometry import wrap_pi

        centers = self.anchor_centers(anchors)
        phi = _anchor_view_angles(centers)
        cos_p, sin_p = np.cos(phi), np.sin(phi)
        res = outputs[:, 1:]
        dx = self.stride * (cos_p * res[:, 0] - sin_p * res[:, 1])
        dy = self.stride * (sin_p * res[:, 0] + cos_p * res[:, 1])
        center = centers + np.column_stack([dx, dy, res[:, 2]])
        w0, h0, l0 = CANONICAL_CAR
        sizes = np.column_stack([
            w0 * np.exp(np.clip(res[:, 3], -2, 2)),
            h0 * np.exp(np.clip(res[:, 4], -2, 2)),
            l0 * np.exp(np.clip(res[:, 5], -2, 2)),
        ])
        yaw = wrap_pi(phi + np.arctan2(res[:, 6], res[:, 7]) / 2.0)
        return center, sizes, yaw

    def decode_boxes(self, anchors: np.ndarray, full_outputs: np.ndarray) -> list:
        from .geometry import OrientedBox

        anchors = np.asarray(anchors, dtype=np.int64)
        center, sizes, yaw = self.decode(anchors, full_outputs[anchors])
        return [
            OrientedBox(center[i], sizes[i, 0], sizes[i, 1], sizes[i, 2], float(yaw[i]))
            for i in range(len(anchors))
        ]

    def backward_params(self, tape: DetTape, d_outputs: np.ndarray) -> dict:
        _, grads = self.mlp.backward(tape.mlp_tape, d_outputs)
        return grads

    def backward_inputs(self, tape: DetTape, d_outputs: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. point positions; the detector ignores intensity."""
        cloud = tape.cloud
        dpos = np.zeros((cloud.n, 3))
        rows = np.flatnonzero(tape.point_cell >= 0)
        if rows.size == 0:
            return dpos
        dfeat, _ = self.mlp.backward(tape.mlp_tape, d_outputs)

        k = self.cells_per_axis
        cells = tape.point_cell[rows]
        ci, cj = np.divmod(cells, k)
        x, y = cloud.xyz[rows, 0], cloud.xyz[rows, 1]
        # a point in cell c feeds the 9 anchors whose neighborhood covers c
        centers = self.anchor_centers(np.arange(k * k))
        phi = _anchor_view_angles(centers)
        cos_p, sin_p = np.cos(phi), np.sin(phi)
        cos2, sin2 = np.cos(2 * phi), np.sin(2 * phi)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ai, aj = ci + di, cj + dj
                ok = (ai >= 0) & (ai < k) & (aj >= 0) & (aj < k)
                a = ai[ok] * k + aj[ok]
                inv = 1.0 / np.maximum(tape.neighbor_counts[a], 1.0)
                sub = rows[ok]
                # undo the per-anchor view rotation of offsets and moments
                d_off_x = cos_p[a] * dfeat[a, 1] - sin_p[a] * dfeat[a, 2]
                d_off_y = sin_p[a] * dfeat[a, 1] + cos_p[a] * dfeat[a, 2]
                d_dvar = cos2[a] * dfeat[a, 5] - sin2[a] * dfeat[a, 6]
                d_cov2 = sin2[a] * dfeat[a, 5] + cos2[a] * dfeat[a, 6]
                cx = 2.0 * (x[ok] - tape.means[a, 0])
                cy = 2.0 * (y[ok] - tape.means[a, 1])
                gx = d_off_x + (dfeat[a, 4] + d_dvar) * cx + d_cov2 * cy
                gy = d_off_y + (dfeat[a, 4] - d_dvar) * cy + d_cov2 * cx
                gz = dfeat[a, 3] * _Z_SCALE
                np.add.at(dpos[:, 0], sub, gx * inv)
                np.add.at(dpos[:, 1], sub, gy * inv)
                np.add.at(dpos[:, 2], sub, gz * inv)
        return dpos

    def state(self) -> dict:
        meta = {"kind": "det", "area": self.area, "stride": self.stride,
                "hidden": self.hidden}
        return meta, self.mlp.params

    @classmethod
    def from_state(cls, meta: dict, params: dict) -> "DetHeadMini":
        model = cls(float(meta["area"]), float(meta["stride"]), int(meta["hidden"]))
        model.mlp.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        return model


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Plain Adam over a dict of arrays."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, grad in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            self.m[key] = b1 * self.m[key] + (1 - b1) * grad
            self.v[key] = b2 * self.v[key] + (1 - b2) * grad * grad
            m_hat = self.m[key] / (1 - b1 ** self.t)
            v_hat = self.v[key] / (1 - b2 ** self.t)
            params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def class_weights(scenes, n_classes: int) -> np.ndarray:
    """Inverse-sqrt-frequency weights, mean 1 over the classes present."""
    counts = np.zeros(n_classes)
    for cloud in scenes:
        counts += np.bincount(cloud.semantic, minlength=n_classes)
    weights = np.where(counts > 0, 1.0 / np.sqrt(counts + 1.0), 0.0)
    present = weights > 0
    if present.any():
        weights[present] *= present.sum() / weights[present].sum()
    return weights


def standard_augment(cloud: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Global yaw rotation in (-pi, pi] about the sensor axis plus a random y flip."""
    from .geometry import rot_z

    out = cloud.copy()
    angle = rng.uniform(-math.pi, math.pi)
    out.xyz = out.xyz @ rot_z(angle).T
    if rng.random() < 0.5:
        out.xyz[:, 1] *= -1.0
    return out


def train_seg(scenes, n_classes: int, epochs: int, lr: float, seed,
              hook=None, points_per_scene: int = 1536, hidden: int = 64,
              radius: float = 0.5, augment_standard: bool = True) -> SegNetMini:
    """Train a SegNetMini with Adam on weighted cross-entropy.

    ``scenes`` is a list of labeled PointClouds. ``hook(index, cloud, rng)``
    may return a replacement cloud and runs before the standard global
    augmentations, once per scene per epoch. Deterministic for a fixed seed.
    Raises RuntimeError on non-finite loss.
    """
    model = SegNetMini(n_classes, hidden=hidden, radius=radius)
    model.init_random(np.random.SeedSequence([_seed_int(seed), 1]))
    weights = class_weights(scenes, n_classes)
    optim = Adam(lr)
    rng = np.random.default_rng(np.random.SeedSequence([_seed_int(seed), 2]))

    order = np.arange(len(scenes))
    for epoch in range(epochs):
        # step decay settles the per-scene Adam updates near the end
        optim.lr = lr * (0.25 if epoch >= (3 * epochs) // 4 else 1.0)
        rng.shuffle(order)
        for scene_idx in order:
            cloud = scenes[scene_idx]
            if hook is not None:
                cloud = hook(int(scene_idx), cloud, rng)
            if augment_standard:
                cloud = standard_augment(cloud, rng)
            n = cloud.n
            if n == 0:
                continue
            if n > points_per_scene:
                # class-balanced subsample: rare classes keep their gradient share
                p = weights[cloud.semantic]
                total = p.sum()
                if total <= 0:
                    continue
                rows = rng.choice(n, size=points_per_scene, replace=False, p=p / total)
            else:
                rows = np.arange(n)
            probs, tape = model.forward(cloud, rows=rows)
            labels = cloud.semantic[rows]
            w = np.sqrt(weights[labels])
            denom = w.sum()
            if denom <= 0:
                continue
            picked = probs[np.arange(len(rows)), labels]
            loss = float(-(w * np.log(np.maximum(picked, 1e-12))).sum() / denom)
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, scene {scene_idx}"
                )
            dlogits = probs.copy()
            dlogits[np.arange(len(rows)), labels] -= 1.0
            dlogits *= (w / denom)[:, None]
            grads = model.backward_params(tape, dlogits)
            optim.step(model.mlp.params, grads)
    return model


def train_det(scenes, boxes_per_scene, epochs: int, lr: float, seed,
              hook=None, hidden: int = 32, area: float = 64.0,
              stride: float = 2.0, augment_standard: bool = True) -> DetHeadMini:
    """Train the detector on (cloud, car boxes) pairs.

    ``boxes_per_scene[i]`` lists the ground-truth OrientedBox targets of
    scene i. Positive anchors are the cells whose center falls inside a box
    footprint, plus the cell nearest to each box center.
    """
    from .geometry import rot_z, wrap_pi

    model = DetHeadMini(area=area, stride=stride, hidden=hidden)
    model.init_random(np.random.SeedSequence([_seed_int(seed), 3]))
    optim = Adam(lr)
    rng = np.random.default_rng(np.random.SeedSequence([_seed_int(seed), 4]))
    w0, h0, l0 = CANONICAL_CAR

    order = np.arange(len(scenes))
    for epoch in range(epochs):
        optim.lr = lr * (0.25 if epoch >= (3 * epochs) // 4 else 1.0)
        rng.shuffle(order)
        for scene_idx in order:
            cloud = scenes[scene_idx]
            gt = list(boxes_per_scene[scene_idx])
            if hook is not None:
                cloud = hook(int(scene_idx), cloud, rng)
            if augment_standard:
                angle = rng.uniform(-math.pi, math.pi)
                flip = rng.random() < 0.5
                cloud = cloud.copy()
                cloud.xyz = cloud.xyz @ rot_z(angle).T
                if flip:
                    cloud.xyz[:, 1] *= -1.0
                moved = []
                for box in gt:
                    center = rot_z(angle) @ box.center
                    yaw = box.yaw + angle
                    if flip:
                        center = center * np.array([1.0, -1.0, 1.0])
                        yaw = -yaw
                    moved.append(type(box)(center, box.width, box.height,
                                           box.length, float(wrap_pi(yaw))))
                gt = moved

            scores, full, tape = model.forward(cloud)
            targets = np.zeros(model.n_anchors)
            reg_targets = {}
            centers_all = model.anchor_centers(np.arange(model.n_anchors))
            for box in gt:
                local = (centers_all[:, :2] - box.center[:2]) @ rot_z(box.yaw)[:2, :2]
                inside = np.all(
                    np.abs(local) <= np.array([box.length / 2, box.width / 2]), axis=1
                )
                dist = np.linalg.norm(centers_all[:, :2] - box.center[:2], axis=1)
                pos = np.flatnonzero(inside | (dist < 2.0))
                pos = np.union1d(pos, [int(np.argmin(dist))])
                targets[pos] = 1.0
                for a in pos:
                    ac = centers_all[a]
                    phi = math.atan2(ac[1], ac[0])
                    dx, dy = box.center[0] - ac[0], box.center[1] - ac[1]
                    reg_targets[int(a)] = np.array([
                        (math.cos(phi) * dx + math.sin(phi) * dy) / model.stride,
                        (-math.sin(phi) * dx + math.cos(phi) * dy) / model.stride,
                        box.center[2] - ac[2],
                        math.log(box.width / w0),
                        math.log(box.height / h0),
                        math.log(box.length / l0),
                        math.sin(2 * (box.yaw - phi)),
                        math.cos(2 * (box.yaw - phi)),
                    ])

            # confidence BCE balanced three ways: positives, occupied
            # negatives (the hard ones), and empty anchors
            occupied = tape.neighbor_counts > 0
            pos_mask = targets > 0
            hard_neg = occupied & ~pos_mask
            n_pos = max(pos_mask.sum(), 1)
            n_hard = max(hard_neg.sum(), 1)
            n_empty = max((~occupied & ~pos_mask).sum(), 1)
            w_anchor = np.where(pos_mask, 0.5 / n_pos,
                                np.where(hard_neg, 0.35 / n_hard, 0.15 / n_empty))
            d_full = np.zeros_like(full)
            d_full[:, 0] = w_anchor * (scores - targets)
            loss = float(-(w_anchor * (targets * np.log(np.maximum(scores, 1e-12))
                         + (1 - targets) * np.log(np.maximum(1 - scores, 1e-12)))).sum())
            if reg_targets:
                idx = np.fromiter(reg_targets.keys(), dtype=np.int64)
                tgt = np.stack([reg_targets[int(a)] for a in idx])
                diff = full[idx, 1:] - tgt
                loss += float(0.5 * (diff * diff).sum() / len(idx))
                d_full[idx, 1:] += diff / len(idx)
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"non-finite detection loss at epoch {epoch}, scene {scene_idx}"
                )
            grads = model.backward_params(tape, d_full)
            optim.step(model.mlp.params, grads)
    return model


def _seed_int(seed) -> int:
    return int(seed) & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# checkpoints (hexfloat text with shape header)
# ---------------------------------------------------------------------------

def save_checkpoint(model, path) -> None:
    meta, params = model.state()
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}"]
    for key, value in meta.items():
        lines.append(f"{key} = {value}")
    for name, array in params.items():
        arr = np.asarray(array, dtype=float)
        shape = " ".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {shape}")
        lines.extend(" ".join(float(x).hex() for x in row)
                     for row in arr.reshape(arr.shape[0] if arr.ndim else 1, -1))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not an {CKPT_MAGIC} file")
    if int(lines[0].split()[1]) != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    meta = {}
    params = {}
    idx = 1
    while idx < len(lines) and not lines[idx].startswith("param "):
        key, _, value = lines[idx].partition("=")
        if value:
            meta[key.strip()] = value.strip()
        idx += 1
    while idx < len(lines):
        header = lines[idx].split()
        idx += 1
        if not header:
            continue
        if header[0] != "param":
            raise FormatError(f"{path}: expected a param header, got {lines[idx - 1]!r}")
        name = header[1]
        shape = tuple(int(s) for s in header[2:])
        rows = shape[0] if shape else 1
        flat = []
        for _ in range(rows):
            flat.extend(float.fromhex(tok) for tok in lines[idx].split())
            idx += 1
        params[name] = np.array(flat).reshape(shape)
    if meta.get("kind") == "seg":
        return SegNetMini.from_state(meta, params)
    if meta.get("kind") == "det":
        return DetHeadMini.from_state(meta, params)
    raise FormatError(f"{path}: missing or unknown checkpoint kind")
