"""Body volume -> frontal/lateral depth maps, and liver attenuation -> fat label."""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

HU_MIN, HU_MAX = -1024, 3071
DEFAULT_BODY_THRESHOLD = -300.0
DEFAULT_DEPTH_SCALE = 500.0
MIN_ROIS = 8


@dataclass
class Volume:
    """CT-like volume. ``voxels`` is indexed ``[z, y, x]`` (z-major on disk)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)  # (sx, sy, sz) in mm

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume needs three positive dims, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.voxels.size and (self.voxels.min() < HU_MIN or self.voxels.max() > HU_MAX):
            raise ValueError(f"attenuation outside [{HU_MIN}, {HU_MAX}]")

    @property
    def dims(self):
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz


@dataclass(frozen=True)
class ROI:
    """Circular region in one axial slice; centre and radius in voxels."""

    slice_index: int
    center: tuple  # (row=y, col=x)
    radius: float


@dataclass
class DepthMapPair:
    frontal: np.ndarray
    lateral: np.ndarray
    subject_id: str = ""

    @property
    def size(self):
        return self.frontal.shape[0]


@dataclass
class LiverLabel:
    fat_pct: float
    grade: int
    mean_hu: float
    rois: list = field(default_factory=list)


@dataclass(frozen=True)
class FatCalib:
    """Linear attenuation->fat map and grade cut points (all in percent)."""

    c0: float = 38.2
    c1: float = -0.58
    thresholds: tuple = (5.0, 15.0, 25.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.thresholds)
        if len(t) != 3 or not (0 < t[0] < t[1] < t[2] < 100):
            raise ValueError(f"grade thresholds must satisfy 0 < t1 < t2 < t3 < 100, got {t}")
        object.__setattr__(self, "thresholds", t)

    @classmethod
    def parse(cls, text):
        """From ``"c0,c1,t1,t2,t3"``."""
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 5:
            raise ValueError(f"calibration needs 5 comma-separated values, got {text!r}")
        return cls(vals[0], vals[1], tuple(vals[2:]))

    def as_list(self):
        return [self.c0, self.c1, *self.thresholds]


def body_mask(slice2d, threshold=DEFAULT_BODY_THRESHOLD):
    """Largest connected region at or above ``threshold``, holes filled."""
    above = np.asarray(slice2d) >= threshold
    if not above.any():
        return np.zeros(above.shape, dtype=bool)
    labels, count = ndimage.label(above)
    if count > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        above = labels == int(np.argmax(sizes))
    return ndimage.binary_fill_holes(above)


def depth_profile(mask, direction, spacing=1.0):
    """Through-thickness of a 2-d mask indexed ``[row, col]``.

    ``frontal`` gives one extent per column (measured along rows),
    ``lateral`` one per row (measured along columns). Extent is
    ``(last - first + 1) * spacing``; unoccupied lines give 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if direction == "frontal":
        m = mask
    elif direction == "lateral":
        m = mask.T
    else:
        raise ValueError(f"direction must be 'frontal' or 'lateral', got {direction!r}")
    occupied = m.any(axis=0)
    first = np.argmax(m, axis=0)
    last = m.shape[0] - 1 - np.argmax(m[::-1], axis=0)
    return np.where(occupied, (last - first + 1) * float(spacing), 0.0)


def raw_depth_maps(volume, threshold=DEFAULT_BODY_THRESHOLD):
    """Per-slice depth profiles stacked with the top slice first, in mm.

    Returns ``(frontal, lateral)`` of shapes ``(nz, nx)`` and ``(nz, ny)``.
    """
    sx, sy, _ = volume.spacing
    vox = volume.voxels
    nz = vox.shape[0]
    frontal = np.zeros((nz, vox.shape[2]))
    lateral = np.zeros((nz, vox.shape[1]))
    for z in range(nz):
        m = body_mask(vox[z], threshold)
        row = nz - 1 - z
        frontal[row] = depth_profile(m, "frontal", sy)
        lateral[row] = depth_profile(m, "lateral", sx)
    return frontal, lateral


def resize_bilinear(img, out_shape):
    """Bilinear resampling with pixel-centre alignment and edge clamping."""
    img = np.asarray(img, dtype=np.float64)

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis_weights(img.shape[0], out_shape[0])
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    c0, c1, fc = axis_weights(img.shape[1], out_shape[1])
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def project_depth_maps(volume, threshold=DEFAULT_BODY_THRESHOLD, out_size=512,
                       depth_scale=DEFAULT_DEPTH_SCALE, subject_id=""):
    """Frontal and lateral depth maps resampled to ``out_size`` and scaled to [0, 1]."""
    frontal, lateral = raw_depth_maps(volume, threshold)
    if not frontal.any():
        raise ValueError("no body found")
    shape = (out_size, out_size)

    def finish(m):
        return np.clip(resize_bilinear(m, shape) / depth_scale, 0.0, 1.0).astype(np.float32)

    return DepthMapPair(finish(frontal), finish(lateral), subject_id)


def roi_mask(shape, rois):
    """Boolean ``[z, y, x]`` mask of the union of ROIs; raises if any leaves the volume."""
    nz, ny, nx = shape
    mask = np.zeros(shape, dtype=bool)
    yy, xx = np.mgrid[0:ny, 0:nx]
    for roi in rois:
        z = int(roi.slice_index)
        cy, cx = roi.center
        r = roi.radius
        if not (0 <= z < nz and cy - r >= 0 and cx - r >= 0 and cy + r <= ny - 1 and cx + r <= nx - 1):
            raise ValueError(f"ROI {roi} is not fully inside volume of shape {shape}")
        mask[z] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return mask


def mean_liver_hu(volume, rois, min_rois=MIN_ROIS):
    """Mean attenuation over the union of ROI voxels."""
    if len(rois) < min_rois:
        raise ValueError(f"need at least {min_rois} ROIs, got {len(rois)}")
    mask = roi_mask(volume.voxels.shape, rois)
    if not mask.any():
        raise ValueError("ROIs cover no voxels")
    return float(volume.voxels[mask].astype(np.float64).mean())


def hu_to_fat_pct(mean_hu, calib=FatCalib()):
    return float(min(max(calib.c0 + calib.c1 * mean_hu, 0.0), 100.0))


def fat_to_grade(fat_pct, calib=FatCalib()):
    """0..3; a value equal to a threshold belongs to the higher grade."""
    t1, t2, t3 = calib.thresholds
    if fat_pct < t1:
        return 0
    if fat_pct < t2:
        return 1
    if fat_pct < t3:
        return 2
    return 3


def label_from_volume(volume, rois, calib=FatCalib(), min_rois=MIN_ROIS):
    hu = mean_liver_hu(volume, rois, min_rois=min_rois)
    fat = hu_to_fat_pct(hu, calib)
    return LiverLabel(fat_pct=fat, grade=fat_to_grade(fat, calib), mean_hu=hu, rois=list(rois))
