"""Synthetic torso phantoms whose body shape is coupled to liver fat.

A torso is a stack of superellipse cross-sections. Adiposity ``v`` in
[0, 1] widens a Gaussian band around the waist by up to 60%; ground-truth
fat is ``40 v + noise``. The liver is a homogeneous ellipsoid whose
attenuation encodes the fat fraction, read back through ROIs exactly as a
real scan would be. Each subject also gets shape nuisance drawn independently
of ``v``: torso position in the field of view, hip and chest proportions and
waist height.
"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .formats import ManifestRow, save_depth_maps, save_volume, write_manifest
from .pipeline import ROI, FatCalib, Volume, fat_to_grade, label_from_volume, project_depth_maps

logger = logging.getLogger(__name__)

AIR_HU = -1000
TISSUE_HU = 40
LIVER_HU_AT_ZERO_FAT = 65.0
HU_PER_FAT_PCT = 1.0
FAT_PER_ADIPOSITY = 40.0
FAT_CLAMP = (0.0, 45.0)
WAIST_GAIN = 0.6
EXPONENT = 2.5
# translation nuisance drawn per subject, independent of adiposity
OFFSET_RANGE = (110.0, 110.0)  # mm, x and y
JITTER_RANGE = (0.95, 1.05)  # independent hip and chest half-axis scale
WAIST_FRAC_RANGE = (0.44, 0.56)
Z_SHIFT_RANGE = 12           # slices

# inverse of the liver attenuation model, so labels read back the generative fat
PHANTOM_CALIB = FatCalib(c0=LIVER_HU_AT_ZERO_FAT / HU_PER_FAT_PCT, c1=-1.0 / HU_PER_FAT_PCT)
COHORT_GRADE_COUNTS = (122, 107, 42, 44)


@dataclass(frozen=True)
class PhantomParams:
    adiposity: float = 0.0
    sigma: float = 1.5
    seed: int = 0
    dims: tuple = (96, 96, 80)          # nx, ny, nz
    spacing: tuple = (8.0, 8.0, 6.0)    # mm
    # torso half-axes (lateral a, antero-posterior b) at hip, waist and chest, mm
    hip: tuple = (165.0, 110.0)
    waist: tuple = (130.0, 92.0)
    chest: tuple = (158.0, 112.0)
    waist_frac: float = 0.5             # waist height as a fraction of torso length
    margin_slices: int = 14             # empty slices above and below the unshifted torso
    offset: tuple = (0.0, 0.0)          # in-plane torso shift (x, y), mm
    z_shift: int = 0                    # torso shift along z, slices
    liver_offset: tuple = (-0.38, 0.05)  # liver centre as fractions of (a, b) at its level
    n_rois: int = 10
    roi_radius: float = 2.0             # voxels
    body_noise: float = 8.0             # HU, outside the liver only

    def __post_init__(self):
        if not 0.0 <= self.adiposity <= 1.0:
            raise ValueError(f"adiposity must lie in [0, 1], got {self.adiposity}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if min(self.hip + self.waist + self.chest) <= 0:
            raise ValueError("half-axes must be positive")
        nz = self.dims[2]
        if nz - 2 * self.margin_slices < 16:
            raise ValueError("volume too short for a torso")
        if abs(self.z_shift) > self.margin_slices:
            raise ValueError(f"z_shift {self.z_shift} pushes the torso out of the volume")

    @property
    def torso_slices(self):
        return self.margin_slices + self.z_shift, self.dims[2] - 1 - self.margin_slices + self.z_shift

    @property
    def waist_slice(self):
        lo, hi = self.torso_slices
        return int(round(lo + self.waist_frac * (hi - lo)))

    def half_axes(self):
        """Per-slice superellipse half-axes ``(a(z), b(z))`` in mm; zero outside the torso."""
        nz = self.dims[2]
        lo, hi = self.torso_slices
        span = hi - lo
        z = np.arange(nz, dtype=np.float64)
        zw = self.waist_slice
        knots_z = np.array([lo, lo + 0.15 * span, zw, lo + 0.85 * span, hi], dtype=np.float64)
        a = np.zeros(nz)
        b = np.zeros(nz)
        inside = (z >= lo) & (z <= hi)
        for out, idx in ((a, 0), (b, 1)):
            vals = np.array([self.hip[idx], self.hip[idx], self.waist[idx], self.chest[idx], self.chest[idx]])
            out[inside] = _smooth_interp(z[inside], knots_z, vals)
        band = np.exp(-0.5 * ((z - zw) / (0.12 * span)) ** 2)
        gain = 1.0 + WAIST_GAIN * self.adiposity * band
        return a * gain * inside, b * gain * inside


def _smooth_interp(x, xp, fp):
    """Piecewise cosine interpolation: passes through knots with zero slope there."""
    i = np.clip(np.searchsorted(xp, x, side="right") - 1, 0, len(xp) - 2)
    x0, x1 = xp[i], xp[i + 1]
    t = np.where(x1 > x0, (x - x0) / np.where(x1 > x0, x1 - x0, 1.0), 0.0)
    s = 0.5 - 0.5 * np.cos(np.pi * np.clip(t, 0, 1))
    return fp[i] * (1 - s) + fp[i + 1] * s


def label_noise(params):
    """The generative noise term, drawn first from the subject's stream."""
    return params.sigma * np.random.default_rng(params.seed).standard_normal()


def generative_fat(params):
    fat = FAT_PER_ADIPOSITY * params.adiposity + label_noise(params)
    return float(np.clip(fat, *FAT_CLAMP))


def liver_hu(fat_pct):
    return LIVER_HU_AT_ZERO_FAT - HU_PER_FAT_PCT * fat_pct


def _liver_geometry(params, a, b):
    lo, hi = params.torso_slices
    span = hi - lo
    nx, ny, _ = params.dims
    sx, sy, _ = params.spacing
    zc = int(round(lo + 0.68 * span))
    rz = 0.13 * span
    ax, by = a[zc], b[zc]
    cx = (nx - 1) / 2 + (params.offset[0] + params.liver_offset[0] * ax) / sx
    cy = (ny - 1) / 2 + (params.offset[1] + params.liver_offset[1] * by) / sy
    rx = 0.28 * params.waist[0] / sx
    ry = 0.38 * params.waist[1] / sy
    return zc, rz, cy, cx, ry, rx


def generate_phantom(params, calib=PHANTOM_CALIB):
    """Build one subject: ``(Volume, LiverLabel)``. Deterministic in ``params``."""
    rng = np.random.default_rng(params.seed)
    rng.standard_normal()  # label noise, see label_noise()
    nx, ny, nz = params.dims
    sx, sy, sz = params.spacing
    a, b = params.half_axes()

    xs = (np.arange(nx) - (nx - 1) / 2) * sx - params.offset[0]
    ys = (np.arange(ny) - (ny - 1) / 2) * sy - params.offset[1]
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    ax = np.abs(xx)[None]
    ay = np.abs(yy)[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (ax / a[:, None, None]) ** EXPONENT + (ay / b[:, None, None]) ** EXPONENT
    body = np.nan_to_num(r, nan=np.inf, posinf=np.inf) <= 1.0

    vox = np.full((nz, ny, nx), AIR_HU, dtype=np.float64)
    noise = rng.standard_normal(vox.shape) * params.body_noise
    vox[body] = TISSUE_HU + noise[body]

    fat = generative_fat(params)
    zc, rz, cy, cx, ry, rx = _liver_geometry(params, a, b)
    zz, yv, xv = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    liver = ((zz - zc) / rz) ** 2 + ((yv - cy) / ry) ** 2 + ((xv - cx) / rx) ** 2 <= 1.0
    liver &= body
    dither = rng.random(vox.shape)
    vox[liver] = np.floor(liver_hu(fat) + dither[liver])
    voxels = np.clip(np.rint(vox), -1024, 3071).astype(np.int16)
    volume = Volume(voxels, params.spacing)

    half = params.n_rois // 2
    slices = [zc + k for k in range(-half, params.n_rois - half)]
    rois = [ROI(z, (round(cy), round(cx)), params.roi_radius) for z in slices]
    label = label_from_volume(volume, rois, calib, min_rois=min(8, params.n_rois))
    return volume, label


def grade_counts(n, mix):
    """Largest-remainder apportionment of ``n`` subjects over four grades."""
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (4,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
        raise ValueError(f"grade mix must be four non-negative proportions summing to 1, got {mix.tolist()}")
    raw = n * mix
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def _adiposity_range(grade, sigma, calib):
    edges = (FAT_CLAMP[0],) + calib.thresholds + (FAT_CLAMP[1],)
    lo = (edges[grade] - 3 * sigma) / FAT_PER_ADIPOSITY
    hi = (edges[grade + 1] + 3 * sigma) / FAT_PER_ADIPOSITY
    return max(lo, 0.0), min(hi, 1.0)


def sample_subject_params(seed, index, grade, sigma=1.5, base=PhantomParams(), calib=PHANTOM_CALIB,
                          max_attempts=1000):
    """Draw shape nuisance and adiposity for one subject landing in ``grade``.

    The stream depends only on ``(seed, index)``.
    """
    rng = np.random.default_rng([seed, index])
    v_lo, v_hi = _adiposity_range(grade, sigma, calib)
    for _ in range(max_attempts):
        v = float(rng.uniform(v_lo, v_hi))
        jitter = rng.uniform(*JITTER_RANGE, size=4)
        params = replace(
            base,
            adiposity=v,
            sigma=sigma,
            seed=int(rng.integers(0, 2**63 - 1)),
            hip=(base.hip[0] * jitter[0], base.hip[1] * jitter[1]),
            chest=(base.chest[0] * jitter[2], base.chest[1] * jitter[3]),
            waist_frac=float(rng.uniform(*WAIST_FRAC_RANGE)),
            offset=(float(rng.uniform(-OFFSET_RANGE[0], OFFSET_RANGE[0])),
                    float(rng.uniform(-OFFSET_RANGE[1], OFFSET_RANGE[1]))),
            z_shift=int(rng.integers(-Z_SHIFT_RANGE, Z_SHIFT_RANGE + 1)),
        )
        if fat_to_grade(generative_fat(params), calib) == grade:
            return params
    raise RuntimeError(f"could not place subject {index} in grade {grade}")


@dataclass
class SubjectRecord:
    index: int
    params: PhantomParams
    fat_generative: float
    row: ManifestRow = field(default=None)


def _build_subject(job):
    seed, index, grade, sigma, size, out_dir, calib = job
    attempt = 0
    while True:
        # a read-back label can straddle a grade edge; redraw from a disjoint stream
        params = sample_subject_params(seed, index + attempt * 1_000_003, grade, sigma, calib=calib)
        volume, label = generate_phantom(params, calib)
        if label.grade == grade:
            break
        attempt += 1
    sid = f"s{index:04d}"
    pair = project_depth_maps(volume, out_size=size, subject_id=sid)
    path = save_depth_maps(pair, os.path.join(out_dir, "maps"))
    rel = os.path.relpath(path, out_dir)
    row = ManifestRow(sid, rel, rel, label.fat_pct, label.grade, label.mean_hu)
    return SubjectRecord(index, params, generative_fat(params), row)


def generate_dataset(n, seed, grade_mix, out_dir, size=64, sigma=1.5, jobs=1, calib=PHANTOM_CALIB):
    """Write ``n`` subjects' depth maps and ``manifest.csv`` under ``out_dir``.

    Per-grade counts follow ``grade_mix`` by largest remainder. Returns
    ``(manifest_path, records)`` with records in subject order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    counts = grade_counts(n, grade_mix)
    grades = np.random.default_rng(seed).permutation(np.repeat(np.arange(4), counts))
    os.makedirs(out_dir, exist_ok=True)
    jobs_list = [(seed, i, int(g), sigma, size, out_dir, calib) for i, g in enumerate(grades)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_build_subject, jobs_list, chunksize=4))
    else:
        records = [_build_subject(j) for j in jobs_list]
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest([r.row for r in records], manifest)
    logger.info("wrote %d subjects to %s (grade counts %s)", n, manifest, counts.tolist())
    return manifest, records


def save_subject_volume(record, directory, calib=PHANTOM_CALIB):
    """Write ``<id>.sfv`` and its ROI list ``<id>.rois.json`` for one generated subject."""
    os.makedirs(directory, exist_ok=True)
    volume, label = generate_phantom(record.params, calib)
    sid = record.row.id
    save_volume(volume, os.path.join(directory, f"{sid}.sfv"))
    rois = [{"slice": r.slice_index, "row": r.center[0], "col": r.center[1], "radius": r.radius}
            for r in label.rois]
    with open(os.path.join(directory, f"{sid}.rois.json"), "w") as f:
        json.dump(rois, f, indent=1)
    return os.path.join(directory, f"{sid}.sfv")
