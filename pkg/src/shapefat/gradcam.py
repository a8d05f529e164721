"""Gradient-weighted activation maps for the regression output."""
import csv
import logging
import os

import numpy as np

from .engine import backward, no_grad, sum_all
from .model import forward_attention, forward_backbone
from .pipeline import resize_bilinear

logger = logging.getLogger(__name__)


def cam_from_features(f_res, grads, out_size):
    """Heatmaps from one sample's features and gradients, both C×h×w.

    Channel weights are the spatial means of the gradients; the weighted sum
    of feature maps is rectified, bilinearly upsampled to ``out_size`` and
    divided by its maximum.
    """
    f_res = np.asarray(f_res, dtype=np.float64)
    weights = np.asarray(grads, dtype=np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, f_res, axes=1), 0.0)
    up = resize_bilinear(cam, (out_size, out_size))
    peak = up.max()
    if peak <= 0:
        logger.warning("grad-cam: gradient signal is zero, returning an all-zero map")
        return np.zeros((out_size, out_size))
    return up / peak


def grad_cam_map(mp, frontal, lateral):
    """One S×S heatmap in [0, 1] per subject, explaining the backbone's fat prediction.

    Runs the backbone in eval mode, so samples are independent and a summed
    backward pass gives every sample its own gradient.
    """
    frontal = np.asarray(frontal)
    lateral = np.asarray(lateral)
    single = frontal.ndim == 2
    if single:
        frontal, lateral = frontal[None], lateral[None]
    fat, f_res, _ = forward_backbone(mp, frontal, lateral, train=False)
    f_res.retain_grad()
    backward(sum_all(fat))
    grads = f_res.grad
    mp.params.zero_grad()
    size = frontal.shape[-1]
    maps = np.stack([cam_from_features(f_res.data[i], grads[i], size) for i in range(frontal.shape[0])])
    return maps[0] if single else maps


def attention_maps(mp, frontal, lateral):
    """Raw attention maps (N×K×h×w) for inspection; not part of prediction."""
    with no_grad():
        _, f_res, _ = forward_backbone(mp, frontal, lateral, train=False)
        maps, _ = forward_attention(mp, f_res)
    return np.concatenate([m.data for m in maps], axis=1)


def _to_u8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img_u8):
    h, w = img_u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img_u8, dtype=np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_csv_grid(path, values):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in np.asarray(values, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])


def read_csv_grid(path):
    with open(path, newline="") as f:
        return np.array([[float(v) for v in row] for row in csv.reader(f)])


def export_heatmap(heatmap, frontal, out_dir, subject_id):
    """Write ``heatmap_<id>.pgm``, ``heatmap_<id>.csv`` and ``overlay_<id>.pgm``.

    The overlay is ``0.5 * frontal + 0.5 * heatmap`` scaled so its maximum is 255.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    frontal = np.asarray(frontal, dtype=np.float64)
    if heatmap.shape != frontal.shape or heatmap.ndim != 2:
        raise ValueError(f"heatmap {heatmap.shape} and frontal map {frontal.shape} must be equal 2-d shapes")
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "heatmap": os.path.join(out_dir, f"heatmap_{subject_id}.pgm"),
        "csv": os.path.join(out_dir, f"heatmap_{subject_id}.csv"),
        "overlay": os.path.join(out_dir, f"overlay_{subject_id}.pgm"),
    }
    write_pgm(paths["heatmap"], _to_u8(heatmap))
    write_csv_grid(paths["csv"], heatmap)
    blend = 0.5 * frontal + 0.5 * heatmap
    peak = blend.max()
    write_pgm(paths["overlay"], _to_u8(blend / peak if peak > 0 else blend))
    return paths
