"""Procedural generator: invariants, determinism, speed."""

import time

import numpy as np
import pytest

from partfactor import synthdata as sd
from partfactor import voxel as vx


def template(i, family="chair", arm_prob=0.5):
    return sd.sample_template(np.random.default_rng([99, i]), family, arm_prob)


class TestGenerateShape:
    def test_four_legs_no_arms_part_presence(self):
        t = template(0)
        t.leg_count = 4
        t.has_arms = False
        lg = sd.generate_shape(t, 16)
        present = {lg.schema.names[k - 1] for k in np.unique(lg.labels) if k}
        assert present == {"back", "seat", "leg"}

    def test_deterministic_for_fixed_template(self):
        t = template(3)
        a = sd.generate_shape(t, 16)
        b = sd.generate_shape(t, 16)
        assert a == b

    @pytest.mark.parametrize("family", ["chair", "table"])
    def test_single_connected_component(self, family):
        for i in range(30):
            lg = sd.generate_shape(template(i, family), 16)
            assert vx.connected_components(lg.occupancy()) == 1

    def test_chairs_are_mirror_symmetric(self):
        for i in range(30):
            lg = sd.generate_shape(template(i), 16)
            assert vx.symmetry_score(lg.occupancy()) >= 0.99

    def test_present_parts_survive_extraction(self):
        for i in range(15):
            lg = sd.generate_shape(template(i), 16)
            parts = vx.extract_parts(lg)
            for k in range(lg.schema.K):
                if parts.present[k]:
                    assert (parts.parts[k] >= 0.5).any()

    def test_degenerate_template_rejected(self):
        t = template(0)
        t.seat_thickness = 0.0
        with pytest.raises(ValueError):
            sd.generate_shape(t, 16)
        t = template(0)
        t.leg_count = 5
        with pytest.raises(ValueError):
            sd.generate_shape(t, 16)

    def test_tables_have_no_back_or_arms(self):
        for i in range(10):
            lg = sd.generate_shape(template(i, "table"), 16)
            labels = set(np.unique(lg.labels))
            assert lg.schema.label_of("back") not in labels
            assert lg.schema.label_of("arm") not in labels


class TestSampling:
    def test_arm_rate_within_binomial_3_sigma(self):
        n = 1000
        arms = sum(template(i, arm_prob=0.5).has_arms for i in range(n))
        sigma = np.sqrt(n * 0.25)
        assert abs(arms - 0.5 * n) <= 3 * sigma

    def test_three_sigma_leg_counts(self):
        counts = {3: 0, 4: 0}
        for i in range(300):
            counts[template(i).leg_count] += 1
        assert counts[4] > counts[3] > 0


class TestDataset:
    def test_regeneration_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        sd.generate_dataset(8, 2, 2, seed=5, resolution=16, out_dir=a)
        sd.generate_dataset(8, 2, 2, seed=5, resolution=16, out_dir=b)
        for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_different_seed_differs(self):
        a = sd.generate_dataset(4, 1, 1, seed=5, resolution=16)
        b = sd.generate_dataset(4, 1, 1, seed=6, resolution=16)
        assert any(x != y for x, y in zip(a.shapes, b.shapes))

    def test_splits_disjoint_exhaustive(self):
        ds = sd.generate_dataset(6, 3, 2, seed=1, resolution=16)
        all_idx = sorted(ds.splits["train"] + ds.splits["val"] + ds.splits["test"])
        assert all_idx == list(range(11))

    def test_save_load_roundtrip(self, tmp_path):
        ds = sd.generate_dataset(5, 2, 2, seed=3, resolution=16, out_dir=tmp_path / "d")
        back = sd.load_dataset(tmp_path / "d")
        assert back.seed == 3 and back.resolution == 16
        assert back.splits == ds.splits
        assert all(x == y for x, y in zip(back.shapes, ds.shapes))

    def test_positive_sizes_required(self):
        with pytest.raises(ValueError):
            sd.generate_dataset(0, 1, 1, seed=0, resolution=16)

    def test_generation_speed_1000_shapes(self):
        start = time.perf_counter()
        sd.generate_dataset(960, 20, 20, seed=2, resolution=16)
        assert time.perf_counter() - start < 60.0

    def test_mixed_family(self):
        ds = sd.generate_dataset(20, 2, 2, seed=4, resolution=16, family="mixed")
        families = {fam for _, fam in ds.shape_meta}
        assert families == {"chair", "table"}
