"""On-disk formats: raw volumes, depth-map pairs and the dataset manifest.

All binary fields are little-endian.

* volume:    ``b"SFV1" | u32 nx, ny, nz | f32 sx, sy, sz | int16 voxels (z-major)``
* depth map: ``b"BSM1" | u32 S | f32 frontal[S*S] | f32 lateral[S*S]``
* manifest:  CSV ``id,frontal_path,lateral_path,fat_pct,grade,mean_hu``; both
  path columns name the pair file, relative to the manifest's directory.
"""
import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

from .pipeline import DepthMapPair, Volume

VOLUME_MAGIC = b"SFV1"
MAP_MAGIC = b"BSM1"
MANIFEST_FIELDS = ["id", "frontal_path", "lateral_path", "fat_pct", "grade", "mean_hu"]


class FormatError(ValueError):
    pass


def _check_magic(head, magic, path):
    if head == magic:
        return
    if len(head) == 4 and head[:3] == magic[:3]:
        raise FormatError(f"{path}: unsupported version {head!r}, expected {magic!r}")
    raise FormatError(f"{path}: bad magic {head!r}, expected {magic!r}")


def save_volume(volume, path):
    nx, ny, nz = volume.dims
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(struct.pack("<3f", *volume.spacing))
        f.write(np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes())


def load_volume(path):
    with open(path, "rb") as f:
        buf = f.read()
    _check_magic(buf[:4], VOLUME_MAGIC, path)
    if len(buf) < 28:
        raise FormatError(f"{path}: truncated header")
    nx, ny, nz = struct.unpack_from("<3I", buf, 4)
    spacing = struct.unpack_from("<3f", buf, 16)
    expected = 28 + 2 * nx * ny * nz
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "oversized"
        raise FormatError(f"{path}: {kind} voxel block ({len(buf)} bytes, expected {expected} for {nx}x{ny}x{nz})")
    vox = np.frombuffer(buf, dtype="<i2", offset=28).reshape(nz, ny, nx).astype(np.int16)
    return Volume(vox, spacing)


def encode_depth_maps(pair):
    s = pair.frontal.shape[0]
    if pair.frontal.shape != (s, s) or pair.lateral.shape != (s, s):
        raise FormatError(f"maps must both be square and equal: {pair.frontal.shape}, {pair.lateral.shape}")
    return (MAP_MAGIC + struct.pack("<I", s)
            + np.ascontiguousarray(pair.frontal, dtype="<f4").tobytes()
            + np.ascontiguousarray(pair.lateral, dtype="<f4").tobytes())


def decode_depth_maps(buf, subject_id="", path="<bytes>"):
    _check_magic(buf[:4], MAP_MAGIC, path)
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header")
    (s,) = struct.unpack_from("<I", buf, 4)
    expected = 8 + 8 * s * s
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for S={s}, got {len(buf)}")
    maps = np.frombuffer(buf, dtype="<f4", offset=8).reshape(2, s, s).astype(np.float32)
    return DepthMapPair(maps[0].copy(), maps[1].copy(), subject_id)


def save_depth_maps(pair, directory):
    """Write ``<directory>/<subject_id>.bsm`` and return its path."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{pair.subject_id or 'subject'}.bsm")
    with open(path, "wb") as f:
        f.write(encode_depth_maps(pair))
    return path


def load_depth_maps(path, subject_id=None):
    with open(path, "rb") as f:
        buf = f.read()
    if subject_id is None:
        subject_id = os.path.splitext(os.path.basename(path))[0]
    return decode_depth_maps(buf, subject_id, path)


@dataclass
class ManifestRow:
    id: str
    frontal_path: str
    lateral_path: str
    fat_pct: float
    grade: int
    mean_hu: float


def write_manifest(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.id, r.frontal_path, r.lateral_path, repr(float(r.fat_pct)), int(r.grade), repr(float(r.mean_hu))])


def read_manifest(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}, got {reader.fieldnames}")
        return [ManifestRow(r["id"], r["frontal_path"], r["lateral_path"], float(r["fat_pct"]),
                            int(r["grade"]), float(r["mean_hu"])) for r in reader]


@dataclass
class Dataset:
    """Depth maps and labels loaded from a manifest, ready for training."""

    ids: list
    frontal: np.ndarray  # (n, S, S) float32
    lateral: np.ndarray
    fat: np.ndarray      # (n,) float64
    grade: np.ndarray    # (n,) int64

    def __len__(self):
        return len(self.ids)

    @property
    def size(self):
        return self.frontal.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset([self.ids[i] for i in idx], self.frontal[idx], self.lateral[idx], self.fat[idx], self.grade[idx])


def load_dataset(manifest_path):
    rows = read_manifest(manifest_path)
    if not rows:
        raise FormatError(f"{manifest_path}: empty manifest")
    base = os.path.dirname(os.path.abspath(manifest_path))
    cache = {}
    fr, la = [], []
    for r in rows:
        fpath = os.path.join(base, r.frontal_path)
        lpath = os.path.join(base, r.lateral_path)
        for p in {fpath, lpath}:
            if p not in cache:
                cache[p] = load_depth_maps(p, r.id)
        fr.append(cache[fpath].frontal)
        la.append(cache[lpath].lateral)
        if len(cache) > 4:
            cache.clear()
    return Dataset([r.id for r in rows], np.stack(fr), np.stack(la),
                   np.array([r.fat_pct for r in rows]), np.array([r.grade for r in rows], dtype=np.int64))
