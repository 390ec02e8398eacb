"""Arbitrary-resolution querying of a fitted (model, latent) pair.

Grids and oblique planes are just coordinate constructions: the field's
value at a point depends only on the continuous coordinate, never on the
grid it is queried through. The nearest-neighbor resampler provides the
classical baseline the neural predictions are compared against, using
physical (mm) distances so anisotropic spacing is honored.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DimensionError
from .inference import InferConfig, evaluate_points, full_observations, infer_latent
from .metrics import DiceReport, ReconReport, dice_report, reconstruction_error
from .model import FieldModel
from .volume import VolumeSample, degrade, linear_axis, normalize_index

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned sample lattice in normalized coordinates.

    One (count, range) pair per axis (x, y, z, t). count == 1 samples the
    range midpoint, so a fixed axis is written as count 1 with a
    degenerate range (v, v). Ranges outside [0,1] are allowed; such
    points are extrapolations and come back flagged.
    """

    counts: tuple[int, int, int, int]
    ranges: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.counts) != 4 or len(self.ranges) != 4:
            raise ContractError("GridSpec needs 4 counts and 4 ranges")
        if any(c < 1 for c in self.counts):
            raise ContractError(f"axis counts must be >= 1, got {self.counts}")
        if any(lo > hi for lo, hi in self.ranges):
            raise ContractError("range lower bound exceeds upper bound")

    @classmethod
    def matching_volume(cls, volume: VolumeSample, t_index: int | None = None) -> "GridSpec":
        """The spec that reproduces a volume's own voxel-center lattice."""
        def full(n):
            return (0.0, 1.0) if n > 1 else (0.5, 0.5)

        gx, gy, gz, gt = volume.shape
        if t_index is None:
            t_count, t_range = gt, full(gt)
        else:
            t_count, t_range = 1, (normalize_index(t_index, gt),) * 2
        return cls(counts=(gx, gy, gz, t_count),
                   ranges=(full(gx), full(gy), full(gz), t_range))

    def axes(self) -> list[np.ndarray]:
        return [linear_axis(lo, hi, n) for n, (lo, hi) in zip(self.counts, self.ranges)]

    def coords(self) -> np.ndarray:
        """All sample coordinates, shape [nx, ny, nz, nt, 4]."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)


@dataclass
class GridSample:
    intensity: np.ndarray   # [nx,ny,nz,nt]
    labels: np.ndarray      # [nx,ny,nz,nt] uint8
    probs: np.ndarray       # [nx,ny,nz,nt,M]
    out_of_range: np.ndarray  # bool, same grid shape; True = extrapolated


def sample_grid(model: FieldModel, h, spec: GridSpec) -> GridSample:
    coords = spec.coords()
    flat = coords.reshape(-1, 4)
    labels, probs, intensity = evaluate_points(model, h, flat)
    shape = coords.shape[:-1]
    oor = np.any((flat < 0.0) | (flat > 1.0), axis=1).reshape(shape)
    return GridSample(intensity=intensity.reshape(shape),
                      labels=labels.reshape(shape),
                      probs=probs.reshape(*shape, -1),
                      out_of_range=oor)


@dataclass(frozen=True)
class PlaneSpec:
    """An arbitrarily oriented image plane through the volume.

    Geometry lives in physical space: ``dir1_mm``/``dir2_mm`` are
    orthonormal mm-space directions, ``extent_mm`` the physical width
    along each, ``origin_norm`` the plane center in normalized
    coordinates. ``span_mm`` is the physical size of the normalized unit
    cube per axis (grid extent minus one, times spacing) and is what
    ties the two spaces together. Pixel (i, j) sits at

        center_mm + a_i * dir1_mm + b_j * dir2_mm

    with a, b spanning [-extent/2, +extent/2].
    """

    origin_norm: tuple[float, float, float]
    dir1_mm: tuple[float, float, float]
    dir2_mm: tuple[float, float, float]
    extent_mm: tuple[float, float]
    counts: tuple[int, int]
    t: float
    span_mm: tuple[float, float, float]

    def __post_init__(self):
        d1 = np.asarray(self.dir1_mm, dtype=np.float64)
        d2 = np.asarray(self.dir2_mm, dtype=np.float64)
        if abs(d1 @ d1 - 1.0) > ORTHO_TOL or abs(d2 @ d2 - 1.0) > ORTHO_TOL:
            raise ContractError("plane directions must be unit length (mm space)")
        if abs(d1 @ d2) > ORTHO_TOL:
            raise ContractError("plane directions must be orthogonal (mm space)")
        if any(c < 1 for c in self.counts) or any(e <= 0 for e in self.extent_mm):
            raise ContractError("plane counts must be >= 1 and extents positive")
        if any(s < 0 for s in self.span_mm):
            raise ContractError("span_mm must be nonnegative")

    def pixel_mm(self) -> np.ndarray:
        """Physical pixel positions, shape [nu, nv, 3]."""
        a = linear_axis(-0.5 * self.extent_mm[0], 0.5 * self.extent_mm[0], self.counts[0])
        b = linear_axis(-0.5 * self.extent_mm[1], 0.5 * self.extent_mm[1], self.counts[1])
        center = np.asarray(self.origin_norm) * np.asarray(self.span_mm)
        d1 = np.asarray(self.dir1_mm)
        d2 = np.asarray(self.dir2_mm)
        return (center[None, None, :]
                + a[:, None, None] * d1[None, None, :]
                + b[None, :, None] * d2[None, None, :])

    def pixel_norm(self) -> np.ndarray:
        """Normalized pixel coordinates [nu, nv, 3]; degenerate axes -> 0.5."""
        mm = self.pixel_mm()
        out = np.empty_like(mm)
        for axis in range(3):
            span = self.span_mm[axis]
            out[..., axis] = mm[..., axis] / span if span > 0 else 0.5
        return out


@dataclass
class PlaneSample:
    intensity: np.ndarray       # [nu,nv]
    labels: np.ndarray          # [nu,nv] uint8
    probs: np.ndarray           # [nu,nv,M]
    out_of_volume: np.ndarray   # [nu,nv] bool; True = outside [0,1]^3
    coords_norm: np.ndarray     # [nu,nv,3]


def sample_plane(model: FieldModel, h, spec: PlaneSpec) -> PlaneSample:
    norm = spec.pixel_norm()
    nu, nv = spec.counts
    flat = np.concatenate([norm.reshape(-1, 3),
                           np.full((nu * nv, 1), float(spec.t))], axis=1)
    labels, probs, intensity = evaluate_points(model, h, flat)
    # fully out-of-volume planes are legal; every pixel just comes back flagged
    outside = np.any((norm < 0.0) | (norm > 1.0), axis=-1)
    return PlaneSample(intensity=intensity.reshape(nu, nv),
                       labels=labels.reshape(nu, nv),
                       probs=probs.reshape(nu, nv, -1),
                       out_of_volume=outside,
                       coords_norm=norm)


# ---------------------------------------------------------------------------
# nearest-neighbor baseline


def _nn_indices(positions_mm: np.ndarray, extent: int, spacing: float
                ) -> tuple[np.ndarray, np.ndarray]:
    """Nearest voxel index along one axis, half-way ties toward the lower index.

    Returns (indices, inside): queries outside the voxel-center hull
    [0, (extent-1)*spacing] are flagged and their index clamped for safe
    gathering (callers must mask them out).
    """
    x = positions_mm / spacing
    idx = np.ceil(x - 0.5).astype(np.int64)  # round-half-down
    inside = (positions_mm >= 0.0) & (positions_mm <= (extent - 1) * spacing)
    return np.clip(idx, 0, extent - 1), inside


def nn_lookup(volume: VolumeSample, points_mm: np.ndarray, t_index: int
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-voxel (intensity, label, inside-mask) at physical points.

    Per-axis rounding equals true physical-distance nearest neighbor
    because the squared distance separates over axes; on exact half-way
    ties every axis independently takes the lower index, which is the
    lexicographically smallest of the tied voxels.
    """
    p = np.asarray(points_mm, dtype=np.float64)
    if p.shape[-1] != 3:
        raise DimensionError(f"points must end in 3 components, got {p.shape}")
    if not 0 <= t_index < volume.num_frames:
        raise ContractError(f"frame index {t_index} outside [0,{volume.num_frames})")
    idx, inside = [], np.ones(p.shape[:-1], dtype=bool)
    for axis in range(3):
        i, ok = _nn_indices(p[..., axis], volume.shape[axis], volume.spacing[axis])
        idx.append(i)
        inside &= ok
    intensity = volume.intensity[idx[0], idx[1], idx[2], t_index]
    labels = volume.labels[idx[0], idx[1], idx[2], t_index]
    intensity = np.where(inside, intensity, 0.0)
    labels = np.where(inside, labels, 0).astype(np.uint8)
    return intensity, labels, inside


def nearest_frame(volume: VolumeSample, t_norm: float) -> int:
    """Frame whose normalized time is closest to t (ties toward lower)."""
    gt = volume.num_frames
    if gt == 1:
        return 0
    return int(np.clip(np.ceil(t_norm * (gt - 1) - 0.5), 0, gt - 1))


def nearest_neighbor_resample(volume: VolumeSample, spec: "PlaneSpec | GridSpec"
                              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Classical resampling of stored voxels onto a plane or grid.

    Returns (intensity, labels, inside_mask) shaped like the spec's
    lattice. Out-of-bounds queries fill 0 and flag False.
    """
    if isinstance(spec, PlaneSpec):
        points = spec.pixel_mm()
        t_index = nearest_frame(volume, spec.t)
        return nn_lookup(volume, points, t_index)
    if isinstance(spec, GridSpec):
        coords = spec.coords()  # [...,4] normalized
        mm = volume.norm_to_mm(coords[..., :3])
        shape = coords.shape[:-1]
        intensity = np.zeros(shape)
        labels = np.zeros(shape, dtype=np.uint8)
        inside = np.zeros(shape, dtype=bool)
        for ti in range(shape[3]):
            t_index = nearest_frame(volume, float(coords[0, 0, 0, ti, 3]))
            vals, labs, ok = nn_lookup(volume, mm[:, :, :, ti, :], t_index)
            intensity[:, :, :, ti] = vals
            labels[:, :, :, ti] = labs
            inside[:, :, :, ti] = ok
        return intensity, labels, inside
    raise ContractError(f"unsupported spec type {type(spec).__name__}")


def brute_force_nn(volume: VolumeSample, points_mm: np.ndarray, t_index: int
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Oracle for nn_lookup: scan every voxel center, compare squared
    physical distances, break ties by lexicographically smallest index.
    Quadratic cost; only sensible on small volumes."""
    p = np.asarray(points_mm, dtype=np.float64).reshape(-1, 3)
    xs, ys, zs = volume.voxel_centers_mm()
    intensity = np.zeros(p.shape[0])
    labels = np.zeros(p.shape[0], dtype=np.uint8)
    inside = np.zeros(p.shape[0], dtype=bool)
    hull_hi = [(volume.shape[a] - 1) * volume.spacing[a] for a in range(3)]
    for n in range(p.shape[0]):
        best = None
        for i in range(volume.shape[0]):
            for j in range(volume.shape[1]):
                for k in range(volume.shape[2]):
                    d = ((p[n, 0] - xs[i]) ** 2 + (p[n, 1] - ys[j]) ** 2
                         + (p[n, 2] - zs[k]) ** 2)
                    key = (d, i, j, k)
                    if best is None or key < best:
                        best = key
        _, i, j, k = best
        ok = all(0.0 <= p[n, a] <= hull_hi[a] for a in range(3))
        inside[n] = ok
        if ok:
            intensity[n] = volume.intensity[i, j, k, t_index]
            labels[n] = volume.labels[i, j, k, t_index]
    shape = np.asarray(points_mm).shape[:-1]
    return intensity.reshape(shape), labels.reshape(shape), inside.reshape(shape)


# ---------------------------------------------------------------------------
# held-out slice protocol


@dataclass
class HeldoutSliceReport:
    slice_index: int
    dice_model: DiceReport
    dice_baseline: DiceReport
    recon: ReconReport
    trace: object
    latent: np.ndarray


def copy_nearest_slice_labels(volume: VolumeSample, slice_index: int) -> np.ndarray:
    """Baseline: labels of the nearest observed z slice, copied in place.

    Nearest by index distance among slices not equal to the held-out one;
    ties toward the lower index.
    """
    gz = volume.shape[2]
    candidates = [z for z in range(gz) if z != slice_index]
    if not candidates:
        raise ContractError("cannot copy-fill a volume with a single slice")
    donor = min(candidates, key=lambda z: (abs(z - slice_index), z))
    return volume.labels[:, :, donor, :]


def predict_heldout_slice(model: FieldModel, volume: VolumeSample, slice_index: int,
                          config: InferConfig) -> HeldoutSliceReport:
    """Fit the latent without one z slice, then predict that slice.

    Scores the prediction against ground truth on the held-out slice
    only (all frames), next to the copy-nearest-slice baseline.
    """
    if not 0 <= slice_index < volume.shape[2]:
        raise ContractError(f"slice index {slice_index} outside [0,{volume.shape[2]})")
    reduced = degrade(volume, "drop_slices", slices=[slice_index])
    coords, intensities = full_observations(reduced)
    # by construction the held-out slice cannot appear in the observations
    z_norm = normalize_index(slice_index, volume.shape[2])
    if np.any(coords[:, 2] == z_norm):
        raise ContractError("held-out slice leaked into the observation set")
    h, trace = infer_latent(model, coords, intensities, config)

    gx, gy, gz, gt = volume.shape
    spec = GridSpec(counts=(gx, gy, 1, gt),
                    ranges=((0.0, 1.0) if gx > 1 else (0.5, 0.5),
                            (0.0, 1.0) if gy > 1 else (0.5, 0.5),
                            (z_norm, z_norm),
                            (0.0, 1.0) if gt > 1 else (0.5, 0.5)))
    pred = sample_grid(model, h, spec)
    true_labels = volume.labels[:, :, slice_index, :]
    true_intensity = volume.intensity[:, :, slice_index, :]
    pred_labels = pred.labels[:, :, 0, :]
    pred_intensity = pred.intensity[:, :, 0, :]

    baseline_labels = copy_nearest_slice_labels(volume, slice_index)
    return HeldoutSliceReport(
        slice_index=slice_index,
        dice_model=dice_report(pred_labels, true_labels),
        dice_baseline=dice_report(baseline_labels, true_labels),
        recon=reconstruction_error(np.clip(pred_intensity, 0.0, 1.0), true_intensity),
        trace=trace,
        latent=h.values.copy())
