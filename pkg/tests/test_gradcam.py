import numpy as np
import pytest

from _oracles import bilinear_loop
from shapefat.gradcam import (
    attention_maps,
    cam_from_features,
    export_heatmap,
    grad_cam_map,
    read_csv_grid,
    read_pgm,
)
from shapefat.engine import no_grad
from shapefat.model import ModelConfig, build_model, forward, forward_backbone


def ready(mp):
    """One train-mode pass fills the batch-norm running statistics."""
    rng = np.random.default_rng(9)
    with no_grad():
        forward(mp, rng.random((4, 64, 64)), rng.random((4, 64, 64)), train=True)
    mp.trained = True
    return mp


def single_channel_model():
    cfg = ModelConfig(input_size=64, phase_channels=2, stage_channels=(4, 4, 1), fc_hidden=3, variant="plain")
    mp = build_model(cfg, seed=2, dtype=np.float64)
    p = mp.params
    p["fc1.w"].data[...] = [[0.5, 1.0, 2.0]]
    p["fc1.b"].data[...] = 1.0
    p["fc2.w"].data[...] = [[1.0], [0.5], [0.25]]
    return ready(mp)


@pytest.fixture
def maps():
    rng = np.random.default_rng(0)
    return rng.random((2, 64, 64)), rng.random((2, 64, 64))


class TestCam:
    def test_single_channel_closed_form(self, maps):
        mp = single_channel_model()
        frontal, lateral = maps
        _, f_res, _ = forward_backbone(mp, frontal[:1], lateral[:1])
        feat = np.maximum(f_res.data[0, 0], 0)
        expected = bilinear_loop(feat, 64)
        expected /= expected.max()
        heat = grad_cam_map(mp, frontal[0], lateral[0])
        assert heat.shape == (64, 64)
        assert np.abs(heat - expected).max() < 1e-6

    def test_features_helper_closed_form(self):
        f = np.array([[[1.0, -2.0], [3.0, 0.5]]])
        heat = cam_from_features(f, np.full_like(f, 0.7), 6)
        expected = bilinear_loop(np.maximum(f[0], 0), 6)
        assert np.allclose(heat, expected / expected.max(), atol=1e-12)

    def test_negative_weight_gives_complement(self):
        f = np.array([[[1.0, -2.0], [3.0, 0.5]]])
        heat = cam_from_features(f, -np.ones_like(f), 2)
        assert np.allclose(heat, [[0.0, 1.0], [0.0, 0.0]])

    def test_range_and_peak(self, maps):
        mp = ready(build_model(ModelConfig(variant="proposed"), seed=1))
        heat = grad_cam_map(mp, *maps)
        assert heat.shape == (2, 64, 64)
        for h in heat:
            assert h.min() >= 0 and (h.max() == pytest.approx(1.0) or h.max() == 0)

    def test_zero_gradient_warns(self, caplog):
        f = np.ones((2, 3, 3))
        heat = cam_from_features(f, np.zeros_like(f), 8)
        assert not heat.any()
        assert "zero" in caplog.text

    def test_duplicate_in_batch(self, maps):
        mp = single_channel_model()
        f, l = maps
        heat = grad_cam_map(mp, np.stack([f[0], f[0]]), np.stack([l[0], l[0]]))
        assert np.array_equal(heat[0], heat[1])

    def test_deterministic_and_grads_cleared(self, maps):
        mp = single_channel_model()
        a = grad_cam_map(mp, maps[0][0], maps[1][0])
        assert all(t.grad is None or not np.any(t.grad) for t in (mp.params[n] for n in mp.params))
        assert np.array_equal(a, grad_cam_map(mp, maps[0][0], maps[1][0]))

    def test_attention_dump(self, maps):
        mp = ready(build_model(ModelConfig(), seed=0))
        a = attention_maps(mp, *maps)
        assert a.shape == (2, 4, 4, 4)
        assert np.all((a > 0) & (a < 1))


class TestExport:
    def test_files_and_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        heat = rng.random((16, 16))
        frontal = rng.random((16, 16))
        paths = export_heatmap(heat, frontal, str(tmp_path), "s0001")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["heatmap_s0001.csv", "heatmap_s0001.pgm", "overlay_s0001.pgm"]
        assert np.abs(read_csv_grid(paths["csv"]) - heat).max() < 1e-6
        img = read_pgm(paths["heatmap"])
        assert img.dtype == np.uint8 and img.shape == (16, 16)
        assert np.array_equal(img, np.rint(heat * 255).astype(np.uint8))
        overlay = read_pgm(paths["overlay"])
        assert overlay.max() == 255 and overlay.min() >= 0

    def test_zero_heatmap_is_black(self, tmp_path):
        paths = export_heatmap(np.zeros((8, 8)), np.zeros((8, 8)), str(tmp_path), "z")
        assert not read_pgm(paths["heatmap"]).any()
        assert not read_pgm(paths["overlay"]).any()

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            export_heatmap(np.zeros((8, 8)), np.zeros((4, 4)), str(tmp_path), "x")

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "f"
        blocker.write_text("")
        with pytest.raises(OSError):
            export_heatmap(np.zeros((4, 4)), np.zeros((4, 4)), str(blocker / "d"), "x")
