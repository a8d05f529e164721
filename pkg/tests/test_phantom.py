from dataclasses import replace

import numpy as np
import pytest

from shapefat.formats import load_dataset, read_manifest
from shapefat.phantom import (
    COHORT_GRADE_COUNTS,
    PHANTOM_CALIB,
    PhantomParams,
    generate_dataset,
    generate_phantom,
    generative_fat,
    grade_counts,
    sample_subject_params,
)
from shapefat.pipeline import body_mask, depth_profile, raw_depth_maps

COHORT_MIX = np.array(COHORT_GRADE_COUNTS) / sum(COHORT_GRADE_COUNTS)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    manifest, records = generate_dataset(315, 11, COHORT_MIX, str(out))
    return manifest, records


class TestGeneratePhantom:
    def test_zero_adiposity(self):
        vol, label = generate_phantom(PhantomParams(adiposity=0.0, sigma=0.0))
        assert label.fat_pct == 0.0 and label.grade == 0
        assert label.mean_hu == pytest.approx(65.0, abs=0.5)

    def test_full_adiposity(self):
        p = PhantomParams(adiposity=1.0, sigma=0.0)
        vol, label = generate_phantom(p)
        assert label.fat_pct == pytest.approx(40.0, abs=0.5)
        assert label.grade == 3
        a, b = p.half_axes()
        z = p.waist_slice
        assert a[z] == pytest.approx(1.6 * p.waist[0]) and b[z] == pytest.approx(1.6 * p.waist[1])

    def test_waist_depth_matches_half_axis(self):
        p = PhantomParams(adiposity=1.0, sigma=0.0)
        vol, _ = generate_phantom(p)
        mask = body_mask(vol.voxels[p.waist_slice])
        sx, sy, _ = p.spacing
        assert abs(depth_profile(mask, "frontal", sy).max() - 2 * 1.6 * p.waist[1]) <= sy
        assert abs(depth_profile(mask, "lateral", sx).max() - 2 * 1.6 * p.waist[0]) <= sx

    def test_narrow_waist_at_zero(self):
        lean = PhantomParams(adiposity=0.0, sigma=0.0)
        a, _ = lean.half_axes()
        assert a[lean.waist_slice] < a[lean.torso_slices[0]]
        assert a[lean.waist_slice] < a[lean.torso_slices[1]]

    def test_deterministic(self):
        p = PhantomParams(adiposity=0.37, seed=99)
        v1, l1 = generate_phantom(p)
        v2, l2 = generate_phantom(p)
        np.testing.assert_array_equal(v1.voxels, v2.voxels)
        assert (l1.fat_pct, l1.grade, l1.mean_hu) == (l2.fat_pct, l2.grade, l2.mean_hu)

    def test_label_noise_is_seeded(self):
        fats = {generative_fat(PhantomParams(adiposity=0.5, seed=s)) for s in range(5)}
        assert len(fats) == 5
        assert all(abs(f - 20.0) < 10 for f in fats)

    @pytest.mark.parametrize("v", [0.05, 0.3, 0.61, 0.99])
    def test_recovers_generative_fat(self, v):
        p = PhantomParams(adiposity=v, seed=int(v * 100))
        _, label = generate_phantom(p)
        assert abs(label.fat_pct - generative_fat(p)) < 0.5

    def test_air_outside_torso(self):
        p = PhantomParams()
        vol, _ = generate_phantom(p)
        lo, hi = p.torso_slices
        assert vol.voxels[: lo].max() < -300 and vol.voxels[hi + 1:].max() < -300

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            PhantomParams(adiposity=1.5)
        with pytest.raises(ValueError):
            PhantomParams(sigma=-1)
        with pytest.raises(ValueError):
            PhantomParams(hip=(0.0, 10.0))
        with pytest.raises(ValueError):
            PhantomParams(z_shift=99)


class TestCoupling:
    def test_waist_mass_sorts_fat(self):
        subjects = [sample_subject_params(5, i, g, sigma=0.0) for i, g in enumerate([0, 1, 2, 3] * 3)]
        mass, fat = [], []
        for p in subjects:
            vol, label = generate_phantom(p)
            frontal, _ = raw_depth_maps(vol)
            mass.append(frontal[vol.voxels.shape[0] - 1 - p.waist_slice].sum())
            fat.append(label.fat_pct)
        order = np.argsort(mass, kind="stable")
        assert np.all(np.diff(np.asarray(fat)[order]) >= 0)

    def test_nuisance_uncorrelated_with_adiposity(self):
        ps = [sample_subject_params(3, i, i % 4) for i in range(400)]
        v = np.array([p.adiposity for p in ps])
        for nuisance in ([p.offset[0] for p in ps], [p.z_shift for p in ps],
                         [p.hip[0] for p in ps], [p.waist_frac for p in ps]):
            assert abs(np.corrcoef(v, nuisance)[0, 1]) < 0.15

    def test_subject_stream_depends_on_seed_and_index(self):
        assert sample_subject_params(1, 7, 2) == sample_subject_params(1, 7, 2)
        assert sample_subject_params(1, 7, 2) != sample_subject_params(1, 8, 2)
        assert sample_subject_params(1, 7, 2) != sample_subject_params(2, 7, 2)


class TestGradeCounts:
    def test_cohort_mix(self):
        assert grade_counts(315, COHORT_MIX).tolist() == [122, 107, 42, 44]

    def test_uniform_four(self):
        assert grade_counts(4, [0.25] * 4).tolist() == [1, 1, 1, 1]

    @pytest.mark.parametrize("n", [1, 7, 50, 316, 999])
    def test_within_one(self, n):
        counts = grade_counts(n, COHORT_MIX)
        assert counts.sum() == n
        assert np.all(np.abs(counts - n * COHORT_MIX) <= 1)

    def test_bad_mix(self):
        with pytest.raises(ValueError):
            grade_counts(10, [0.5, 0.5, 0.5, 0.5])
        with pytest.raises(ValueError):
            grade_counts(10, [1.0, 0.0, 0.0])


class TestGenerateDataset:
    def test_cohort_counts(self, cohort):
        manifest, records = cohort
        rows = read_manifest(manifest)
        assert len(rows) == 315
        assert np.bincount([r.grade for r in rows], minlength=4).tolist() == [122, 107, 42, 44]

    def test_label_recoverability(self, cohort):
        _, records = cohort
        err = np.array([abs(r.row.fat_pct - r.fat_generative) for r in records])
        assert err.max() < 0.5

    def test_maps_load(self, cohort):
        manifest, records = cohort
        data = load_dataset(manifest)
        assert data.frontal.shape == (315, 64, 64)
        assert 0.0 <= data.frontal.min() and data.lateral.max() <= 1.0
        assert data.frontal[:, 0, :].max() == 0.0  # empty slices above the torso

    def test_uniform_four(self, tmp_path):
        _, records = generate_dataset(4, 0, [0.25] * 4, str(tmp_path), size=16)
        assert sorted(r.row.grade for r in records) == [0, 1, 2, 3]

    def test_seeds_differ_counts_match(self, tmp_path):
        _, a = generate_dataset(12, 1, [0.25] * 4, str(tmp_path / "a"), size=16)
        _, b = generate_dataset(12, 2, [0.25] * 4, str(tmp_path / "b"), size=16)
        assert [r.row.fat_pct for r in a] != [r.row.fat_pct for r in b]
        assert np.bincount([r.row.grade for r in a]).tolist() == np.bincount([r.row.grade for r in b]).tolist()

    def test_parallel_matches_serial(self, tmp_path):
        m1, _ = generate_dataset(6, 4, [0.25] * 4, str(tmp_path / "s"), size=16, jobs=1)
        m2, _ = generate_dataset(6, 4, [0.25] * 4, str(tmp_path / "p"), size=16, jobs=2)
        assert open(m1).read() == open(m2).read()
        for i in range(6):
            assert (tmp_path / "s" / "maps" / f"s{i:04d}.bsm").read_bytes() == \
                (tmp_path / "p" / "maps" / f"s{i:04d}.bsm").read_bytes()

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_dataset(4, 0, [0.25] * 4, str(blocker / "sub"), size=16)

    def test_phantom_calibration_closes_loop(self):
        assert PHANTOM_CALIB.c0 == 65.0 and PHANTOM_CALIB.c1 == -1.0
