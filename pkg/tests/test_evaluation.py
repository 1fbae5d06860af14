"""Experiments, baselines, and the plausibility classifier."""

import numpy as np
import pytest

from partfactor import evaluation as ev
from partfactor import synthdata as sd
from partfactor import voxel as vx
from partfactor.model import DecomposerComposer

SCHEMA = vx.CHAIR_SCHEMA


@pytest.fixture(scope="module")
def dataset():
    return sd.generate_dataset(30, 6, 10, seed=2, resolution=16)


@pytest.fixture(scope="module")
def oracle():
    return ev.OracleModel(SCHEMA)


class TestOracleReconstruction:
    def test_high_miou_and_connectivity(self, dataset, oracle):
        row, outputs = ev.run_reconstruction(oracle, dataset.subset("test"))
        assert row.miou >= 0.8
        assert row.miou_parts >= 0.8
        conn = np.mean(
            [1.0 if vx.connected_components(o.occupancy()) == 1 else 0.0 for o in outputs]
        )
        assert row.connectivity == pytest.approx(conn)

    def test_symmetric_inputs_give_symmetric_outputs(self, dataset, oracle):
        row, _ = ev.run_reconstruction(oracle, dataset.subset("test"))
        assert row.symmetry >= 0.99

    def test_empty_test_set_rejected(self, oracle):
        with pytest.raises(ValueError):
            ev.run_reconstruction(oracle, [])

    def test_threads_match_serial(self, dataset, oracle):
        serial, _ = ev.run_reconstruction(oracle, dataset.subset("test"), threads=1)
        parallel, _ = ev.run_reconstruction(oracle, dataset.subset("test"), threads=4)
        assert serial.as_csv() == parallel.as_csv()
        assert serial.miou == parallel.miou


class TestSwap:
    def test_self_swap_is_reconstruction(self, dataset, oracle):
        lg = dataset.subset("test")[0]
        codes = oracle.embed_parts(lg)
        swapped = list(codes)
        swapped[2] = codes[2]
        out, _, _ = oracle.compose_parts(swapped)
        rec, _, _ = oracle.compose_parts(codes)
        assert out == rec

    def test_pair_produces_two_outputs_with_exchanged_parts(self, dataset, oracle):
        shapes = dataset.subset("test")
        rng = np.random.default_rng(0)
        row, outputs = ev.run_swap(oracle, shapes, rng)
        assert len(outputs) == 2 * (len(shapes) // 2)
        assert 0.0 <= row.connectivity <= 1.0

    def test_needs_two_shapes(self, dataset, oracle):
        with pytest.raises(ValueError):
            ev.run_swap(oracle, dataset.subset("test")[:1], np.random.default_rng(0))


class TestMix:
    def test_identity_permutations_equal_reconstruction(self, dataset, oracle):
        shapes = dataset.subset("test")

        class IdentityRng:
            def permutation(self, m):
                return np.arange(m)

        codes = [oracle.embed_parts(lg) for lg in shapes]
        from partfactor.training import cycle_mix

        mixed, _ = cycle_mix(codes, IdentityRng())
        for mixed_codes, lg in zip(mixed, shapes):
            out = oracle.compose_parts(mixed_codes)[0]
            rec = oracle.compose_parts(oracle.embed_parts(lg))[0]
            assert out == rec

    def test_mix_row_and_naive_row(self, dataset, oracle):
        shapes = dataset.subset("test")
        row, naive_row, outputs, naive_outputs = ev.run_mix(
            oracle, shapes, np.random.default_rng(1)
        )
        assert row.experiment == "mix" and naive_row.method == "naive"
        assert len(outputs) == len(shapes) == len(naive_outputs)
        assert np.isnan(row.miou)  # mIoU is reconstruction-only


class TestInterpolation:
    def test_endpoints_match_reconstructions(self, dataset):
        model = ev.ModelAdapter(DecomposerComposer(resolution=16, schema=SCHEMA, n=16, seed=1))
        a, b = dataset.subset("test")[:2]
        seq = ev.run_interpolation(model, a, b, steps=10)
        assert len(seq) == 10
        rec_a = model.compose_parts(model.embed_parts(a))[0]
        rec_b = model.compose_parts(model.embed_parts(b))[0]
        assert seq[0] == rec_a
        assert seq[-1] == rec_b

    def test_partial_mode_keeps_other_codes(self, dataset):
        model = ev.ModelAdapter(DecomposerComposer(resolution=16, schema=SCHEMA, n=16, seed=3))
        a, b = dataset.subset("test")[:2]
        codes_a = model.embed_parts(a)
        seq = ev.run_interpolation(model, a, b, part=1, steps=3)
        # at alpha = 0.5 only part 1 differs from a pure-A composition
        blend = [c if k != 1 else None for k, c in enumerate(codes_a)]
        assert seq[1] is not None and len(blend) == 4

    def test_alpha_grid(self):
        alphas = [i / 9 for i in range(10)]
        assert alphas[0] == 0.0 and alphas[-1] == 1.0
        assert alphas[1] == pytest.approx(1 / 9)

    def test_bad_part_index(self, dataset):
        model = ev.ModelAdapter(DecomposerComposer(resolution=16, schema=SCHEMA, n=16, seed=1))
        a, b = dataset.subset("test")[:2]
        with pytest.raises(ValueError):
            ev.run_interpolation(model, a, b, part=7)


class TestNaivePlacement:
    def test_same_donor_reproduces_shape(self, dataset):
        lg = dataset.subset("test")[0]
        out = ev.naive_placement([lg] * SCHEMA.K)
        assert out == lg

    def test_identical_geometry_connected(self, dataset):
        lg = dataset.subset("test")[0]
        out = ev.naive_placement([lg] * SCHEMA.K)
        assert vx.connected_components(out.occupancy()) == 1

    def test_lowest_index_wins_overlap(self):
        a = np.zeros((4, 4, 4), dtype=int)
        a[0, 0, 0] = 1
        b = np.zeros((4, 4, 4), dtype=int)
        b[0, 0, 0] = 2
        donors = [vx.LabeledGrid(a, SCHEMA), vx.LabeledGrid(b, SCHEMA),
                  vx.LabeledGrid(np.zeros((4, 4, 4), dtype=int), SCHEMA),
                  vx.LabeledGrid(np.zeros((4, 4, 4), dtype=int), SCHEMA)]
        out = ev.naive_placement(donors)
        assert out.labels[0, 0, 0] == 1


class TestClassifier:
    def test_single_donor_negatives_excluded(self, dataset):
        shapes = dataset.subset("test")[:1] * 4  # only identical donors available
        with pytest.raises(ValueError):
            ev.sample_negative(shapes, np.random.default_rng(0), max_tries=10)

    def test_scores_in_unit_interval(self, dataset):
        clf = ev.ShapeClassifier(16, seed=0)
        for lg in dataset.subset("test")[:4]:
            s = clf.score(lg.occupancy().data.astype(float))
            assert 0.0 <= s <= 1.0

    @pytest.mark.slow
    def test_training_separates_real_from_scrambled(self, dataset):
        rng = np.random.default_rng(5)
        clf, held_out = ev.train_classifier(dataset, rng, epochs=10)
        assert held_out > 0.5
        train_scores = ev.classifier_accuracy(
            clf, [lg.occupancy() for lg in dataset.subset("train")]
        )
        assert train_scores > 0.5
        # deliberately disconnected garbage scores below ground truth
        junk = np.zeros((16, 16, 16), dtype=int)
        junk[1:3, 1:3, 1:3] = 1
        junk[12:14, 12:14, 12:14] = 2
        junk_score = ev.classifier_accuracy(clf, [vx.LabeledGrid(junk, SCHEMA).occupancy()])
        assert junk_score < train_scores


class TestMetricsTable:
    def test_csv_shape(self):
        rows = [
            ev.MetricsRow("rec", "model", miou=0.5, miou_parts=0.6,
                          connectivity=0.7, classifier_accuracy=0.8, symmetry=0.9),
            ev.MetricsRow("mix", "naive", connectivity=0.5, classifier_accuracy=0.4, symmetry=0.3),
        ]
        table = ev.metrics_table(rows)
        lines = table.strip().split("\n")
        assert lines[0] == ev.CSV_HEADER
        assert lines[1] == "rec,model,0.5000,0.6000,0.7000,0.8000,0.9000"
        assert lines[2] == "mix,naive,,,0.5000,0.4000,0.3000"

    def test_export_roundtrip_metrics_equal(self, dataset, oracle, tmp_path):
        shapes = dataset.subset("test")[:4]
        row, outputs = ev.run_reconstruction(oracle, shapes, out_dir=tmp_path)
        for i, out in enumerate(outputs[:4]):
            back = vx.load_pflg(tmp_path / f"rec_{i:03d}.pflg")
            assert back == out
            assert vx.symmetry_score(back.occupancy()) == vx.symmetry_score(out.occupancy())
