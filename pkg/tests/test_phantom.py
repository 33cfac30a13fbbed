"""Phantom generator and resegmentation properties.

Thresholds here are the contract the downstream fidelity metrics rely on:
resegment must invert generate exactly at the default noise level for the
default 3-class taxonomy, and degrade gracefully at higher noise. The 8-class
taxonomy subdivides organs into 0.06-wide intensity bands, so per-subclass
recovery under noise is limited by band width; its guarantees are stated on
the noiseless volume and on class unions.
"""

import numpy as np
import pytest

from pairvol import phantom as ph
from pairvol.errors import ConfigError
from pairvol.volio import Volume


def dice(a, b):
    inter = np.logical_and(a, b).sum()
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else 2.0 * inter / s


class TestClassBands:
    def test_taxonomies(self):
        assert set(ph.class_bands(2)) == {1}
        assert set(ph.class_bands(3)) == {1, 2}
        assert set(ph.class_bands(8)) == {1, 2, 3, 4, 5, 6, 7}

    def test_bands_disjoint_and_ordered(self):
        for n in (2, 3, 8):
            bands = sorted(ph.class_bands(n).values())
            for (lo1, hi1), (lo2, hi2) in zip(bands, bands[1:]):
                assert hi1 <= lo2
            for lo, hi in bands:
                assert lo < hi

    def test_organ_subbands_tile_organ_range(self):
        bands = ph.class_bands(8)
        assert bands[2][0] == pytest.approx(ph.ORGAN_BAND[0])
        assert bands[7][1] == pytest.approx(0.96)
        for c in range(2, 7):
            assert bands[c][1] == pytest.approx(bands[c + 1][0])

    def test_band_center_is_in_band(self):
        for n in (2, 3, 8):
            for lo, hi in ph.class_bands(n).values():
                assert lo <= ph.band_center((lo, hi)) < hi

    def test_unknown_taxonomy_rejected(self):
        with pytest.raises(ConfigError):
            ph.class_bands(4)


class TestSpecValidation:
    def test_dims_must_be_multiple_of_four(self):
        with pytest.raises(ConfigError):
            ph.PhantomSpec(h=30, w=32)
        with pytest.raises(ConfigError):
            ph.PhantomSpec(h=32, w=17)

    def test_depth_min_bound(self):
        with pytest.raises(ConfigError):
            ph.PhantomSpec(depth_range=(4, 16))
        with pytest.raises(ConfigError):
            ph.PhantomSpec(depth_range=(24, 16))

    def test_negative_noise_rejected(self):
        with pytest.raises(ConfigError):
            ph.PhantomSpec(noise_level=-0.1)

    def test_bad_class_count_rejected(self):
        with pytest.raises(ConfigError):
            ph.PhantomSpec(n_classes=5)


class TestGenerate:
    def test_deterministic_triple(self):
        spec = ph.PhantomSpec(seed=3)
        v1, m1, r1 = ph.generate_phantom(spec, 12)
        v2, m2, r2 = ph.generate_phantom(spec, 12)
        assert np.array_equal(v1.voxels, v2.voxels)
        assert np.array_equal(m1.labels, m2.labels)
        assert r1 == r2

    def test_different_indices_differ(self):
        spec = ph.PhantomSpec(seed=3)
        v1, _, _ = ph.generate_phantom(spec, 0)
        v2, _, _ = ph.generate_phantom(spec, 1)
        assert v1.voxels.shape != v2.voxels.shape or not np.array_equal(v1.voxels, v2.voxels)

    def test_labels_within_taxonomy(self):
        for n in (2, 3, 8):
            spec = ph.PhantomSpec(seed=5, n_classes=n)
            for idx in range(5):
                _, msk, _ = ph.generate_phantom(spec, idx)
                assert set(np.unique(msk.labels)) <= set(range(n))
                assert msk.n_classes == n

    def test_foreground_fraction_bounds(self):
        spec = ph.PhantomSpec(seed=42)
        fracs = []
        for idx in range(100):
            _, msk, _ = ph.generate_phantom(spec, idx)
            fracs.append((msk.labels > 0).mean())
        assert min(fracs) >= 0.1
        assert max(fracs) <= 0.6

    def test_adjacent_slice_foreground_dice(self):
        spec = ph.PhantomSpec(seed=42)
        worst = 1.0
        for idx in range(50):
            _, msk, _ = ph.generate_phantom(spec, idx)
            fg = msk.labels > 0
            for z in range(fg.shape[0] - 1):
                worst = min(worst, dice(fg[z], fg[z + 1]))
        assert worst >= 0.8

    def test_depths_span_range(self):
        spec = ph.PhantomSpec(seed=42, depth_range=(16, 48))
        depths = set()
        for idx in range(100):
            vol, _, _ = ph.generate_phantom(spec, idx)
            depths.add(vol.depth)
        assert min(depths) == 16
        assert max(depths) == 48
        assert all(16 <= d <= 48 for d in depths)

    def test_volume_range_and_dtype(self):
        spec = ph.PhantomSpec(seed=9, noise_level=0.05)
        vol, _, _ = ph.generate_phantom(spec, 0)
        assert vol.voxels.dtype == np.float32
        assert vol.voxels.min() >= 0.0
        assert vol.voxels.max() <= 1.0

    def test_mask_volume_band_consistency_noiseless(self):
        # every labeled voxel's clean intensity lies in its class band, and
        # background voxels lie in no band of the taxonomy
        for n in (2, 3, 8):
            spec = ph.PhantomSpec(seed=1, n_classes=n, noise_level=0.0)
            bands = ph.class_bands(n)
            for idx in range(5):
                vol, msk, _ = ph.generate_phantom(spec, idx)
                for c, (lo, hi) in bands.items():
                    sel = msk.labels == c
                    if sel.any():
                        assert vol.voxels[sel].min() >= lo
                        assert vol.voxels[sel].max() < hi
                bg = vol.voxels[msk.labels == 0]
                for lo, hi in bands.values():
                    assert not np.any((bg >= lo) & (bg < hi))

    def test_two_class_taxonomy_keeps_organs_unlabeled(self):
        spec = ph.PhantomSpec(seed=1, n_classes=2, noise_level=0.0)
        saw_organ_texture = False
        for idx in range(10):
            vol, msk, _ = ph.generate_phantom(spec, idx)
            organ_voxels = vol.voxels >= ph.ORGAN_BAND[0]
            if organ_voxels.any():
                saw_organ_texture = True
                assert np.all(msk.labels[organ_voxels] == 0)
        assert saw_organ_texture

    def test_report_shape(self):
        spec = ph.PhantomSpec(seed=4)
        for idx in range(20):
            _, _, report = ph.generate_phantom(spec, idx)
            age = int(report.split()[0])
            assert 18 <= age <= 88
            assert "habitus" in report
            assert "lungs patent" in report
            assert ("1 focal soft-tissue nodule" in report) or ("nodules" in report)


class TestResegment:
    def test_exact_inverse_at_default_noise(self):
        # the fidelity oracle: for the default 3-class taxonomy, resegment
        # recovers the generating mask bitwise at the default noise level
        bands = ph.class_bands(3)
        for noise in (0.0, 0.01):
            spec = ph.PhantomSpec(seed=7, noise_level=noise)
            for idx in range(10):
                vol, msk, _ = ph.generate_phantom(spec, idx)
                rs = ph.resegment(vol, bands)
                assert np.array_equal(rs.labels, msk.labels), f"noise={noise} idx={idx}"

    def test_noiseless_per_class_dice(self):
        for n in (2, 3, 8):
            spec = ph.PhantomSpec(seed=7, n_classes=n, noise_level=0.0)
            bands = ph.class_bands(n)
            for idx in range(10):
                vol, msk, _ = ph.generate_phantom(spec, idx)
                rs = ph.resegment(vol, bands)
                for c in range(n):
                    if (msk.labels == c).any() or (rs.labels == c).any():
                        assert dice(rs.labels == c, msk.labels == c) >= 0.95

    def test_high_noise_per_class_dice(self):
        # sigma=0.05 per-class recovery for the 2- and 3-class taxonomies
        for n in (2, 3):
            spec = ph.PhantomSpec(seed=7, n_classes=n, noise_level=0.05)
            bands = ph.class_bands(n)
            for idx in range(10):
                vol, msk, _ = ph.generate_phantom(spec, idx)
                rs = ph.resegment(vol, bands)
                for c in range(n):
                    assert dice(rs.labels == c, msk.labels == c) >= 0.9

    def test_high_noise_eight_class_unions(self):
        # 0.06-wide organ subbands cannot be told apart at sigma=0.05, but
        # the lung class and the organ union must still come back
        spec = ph.PhantomSpec(seed=7, n_classes=8, noise_level=0.05)
        bands = ph.class_bands(8)
        for idx in range(10):
            vol, msk, _ = ph.generate_phantom(spec, idx)
            rs = ph.resegment(vol, bands)
            assert dice(rs.labels > 0, msk.labels > 0) >= 0.9
            assert dice(rs.labels == 1, msk.labels == 1) >= 0.9

    def test_open_air_never_labeled_lung(self):
        # air sits 1 sigma below the lung band at sigma=0.05; without the
        # enclosure rule it would flood the lung class
        spec = ph.PhantomSpec(seed=7, noise_level=0.05)
        bands = ph.class_bands(3)
        vol, msk, _ = ph.generate_phantom(spec, 0)
        rs = ph.resegment(vol, bands)
        air = vol.voxels < ph.LUNG_BAND[0]  # noise pushed nothing below 0 except air
        outside = (msk.labels == 0) & air
        assert (rs.labels[outside] == 1).mean() < 0.01

    def test_idempotent_on_banded_volume(self):
        bands = ph.class_bands(3)
        for noise in (0.0, 0.05):
            spec = ph.PhantomSpec(seed=11, noise_level=noise)
            for idx in range(5):
                vol, _, _ = ph.generate_phantom(spec, idx)
                m1 = ph.resegment(vol, bands)
                painted = np.full(m1.labels.shape, ph.INTENSITY_BODY, dtype=np.float32)
                for c, band in bands.items():
                    painted[m1.labels == c] = ph.band_center(band)
                m2 = ph.resegment(Volume(voxels=painted), bands)
                assert np.array_equal(m1.labels, m2.labels)

    def test_constant_zero_volume_is_all_background(self):
        vol = Volume(voxels=np.zeros((8, 8, 8), dtype=np.float32))
        rs = ph.resegment(vol, ph.class_bands(3))
        assert np.all(rs.labels == 0)

    def test_overlapping_bands_rejected(self):
        vol = Volume(voxels=np.zeros((4, 4, 4), dtype=np.float32))
        with pytest.raises(ConfigError, match="overlap"):
            ph.resegment(vol, {1: (0.1, 0.5), 2: (0.4, 0.9)})

    def test_touching_bands_allowed(self):
        vol = Volume(voxels=np.full((4, 4, 4), 0.45, dtype=np.float32))
        rs = ph.resegment(vol, {1: (0.1, 0.4), 2: (0.4, 0.9)})
        assert np.all(rs.labels == 2)


class TestSplit:
    def test_eight_two(self):
        train, test = ph.split(10, 0.8, seed=0)
        assert len(train) == 8 and len(test) == 2

    def test_disjoint_exhaustive(self):
        train, test = ph.split(37, 0.7, seed=5)
        assert set(train).isdisjoint(test)
        assert sorted(train + test) == list(range(37))

    def test_seed_deterministic(self):
        assert ph.split(20, 0.5, seed=9) == ph.split(20, 0.5, seed=9)
        assert ph.split(20, 0.5, seed=9) != ph.split(20, 0.5, seed=10)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            ph.split(10, 0.0, seed=0)
        with pytest.raises(ConfigError):
            ph.split(10, 1.0, seed=0)
