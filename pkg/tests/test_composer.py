"""Part decoder, localization, assembly, and the composed pipeline."""

import numpy as np
import pytest

from partfactor import autodiff as ad
from partfactor import composer as cp
from partfactor import synthdata as sd
from partfactor import voxel as vx
from partfactor.model import DecomposerComposer
from partfactor.sampling import affine_sample

SCHEMA = vx.CHAIR_SCHEMA


def micro_model(seed=0, monolithic=False):
    return DecomposerComposer(resolution=16, schema=SCHEMA, n=32, seed=seed, monolithic=monolithic)


class TestPartDecoder:
    def test_deterministic_and_in_unit_interval(self):
        net = cp.PartDecoderNet(16, n=16, rng=np.random.default_rng(0))
        e = ad.DiffValue(np.random.default_rng(1).standard_normal(16))
        a = cp.decode_part(e, net)
        b = cp.decode_part(e, net)
        assert np.array_equal(a.data, b.data)
        assert a.data.min() > 0.0 and a.data.max() < 1.0
        assert a.shape == (16, 16, 16)

    def test_resolution_base_grid(self):
        for r, steps in ((8, 1), (16, 2), (32, 3)):
            net = cp.PartDecoderNet(r, n=8, rng=np.random.default_rng(0))
            assert net.base == 4 and net._steps == steps
            e = ad.DiffValue(np.zeros(8))
            assert cp.decode_part(e, net).shape == (r, r, r)


class TestLocalizer:
    def test_fresh_net_outputs_exact_identities(self):
        net = cp.LocalizationNet(16, k=4, n=16, rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        vols = [ad.DiffValue(rng.random((16, 16, 16))) for _ in range(4)]
        e_sum = ad.DiffValue(rng.standard_normal(16))
        thetas = cp.localize(vols, e_sum, net)
        for theta in thetas:
            assert np.array_equal(theta.data, cp.IDENTITY_THETA)

    def test_no_cross_shape_coupling(self):
        net = cp.LocalizationNet(16, k=2, n=8, rng=np.random.default_rng(2))
        net.params["stn.out.W"].data += 0.01  # leave the identity point
        rng = np.random.default_rng(3)
        inputs = []
        for _ in range(3):
            vols = [ad.DiffValue(rng.random((16, 16, 16))) for _ in range(2)]
            e = ad.DiffValue(rng.standard_normal(8))
            inputs.append((vols, e))
        solo = [np.stack([t.data for t in cp.localize(v, e, net)]) for v, e in inputs]
        for order in ([2, 0, 1], [1, 2, 0]):
            for idx in order:
                v, e = inputs[idx]
                again = np.stack([t.data for t in cp.localize(v, e, net)])
                assert np.array_equal(again, solo[idx])

    def test_wrong_part_count_rejected(self):
        net = cp.LocalizationNet(16, k=4, n=8, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            cp.localize([ad.DiffValue(np.zeros((16, 16, 16)))], ad.DiffValue(np.zeros(8)), net)


class TestAssemble:
    def test_single_strong_part(self):
        vols = [np.full((4, 4, 4), 0.9)] + [np.zeros((4, 4, 4))] * 3
        lg = cp.assemble(vols, SCHEMA)
        assert (lg.labels == 1).all()

    def test_all_below_threshold_empty(self):
        vols = [np.full((4, 4, 4), 0.4)] * 4
        assert not cp.assemble(vols, SCHEMA).occupancy().data.any()

    def test_argmax_wins_overlap(self):
        a = np.full((4, 4, 4), 0.6)
        b = np.full((4, 4, 4), 0.8)
        lg = cp.assemble([a, b, np.zeros_like(a), np.zeros_like(a)], SCHEMA)
        assert (lg.labels == 2).all()

    def test_tie_goes_to_lowest_index(self):
        a = np.full((4, 4, 4), 0.7)
        lg = cp.assemble([a, a.copy(), a.copy(), a.copy()], SCHEMA)
        assert (lg.labels == 1).all()

    def test_occupancy_subset_of_support(self):
        rng = np.random.default_rng(0)
        vols = [rng.random((6, 6, 6)) * (rng.random((6, 6, 6)) > 0.5) for _ in range(4)]
        lg = cp.assemble(vols, SCHEMA)
        support = np.stack(vols).max(axis=0) > 0
        assert not (lg.occupancy().data & ~support).any()


class TestCompose:
    def test_identity_thetas_equal_raw_assembly(self):
        # a fresh localizer emits exact identities, and identity sampling is exact
        model = micro_model(seed=4)
        rng = np.random.default_rng(5)
        codes = [ad.DiffValue(rng.standard_normal(32)) for _ in range(4)]
        lg, canonicals, thetas = cp.compose(codes, model.part_decoder, model.localizer, SCHEMA)
        assert all(t.is_identity() for t in thetas)
        direct = cp.assemble(canonicals, SCHEMA)
        assert lg == direct

    def test_compose_deterministic(self):
        model = micro_model(seed=6)
        rng = np.random.default_rng(7)
        codes = [ad.DiffValue(rng.standard_normal(32)) for _ in range(4)]
        a = cp.compose(codes, model.part_decoder, model.localizer, SCHEMA)[0]
        b = cp.compose(codes, model.part_decoder, model.localizer, SCHEMA)[0]
        assert a == b

    @pytest.mark.parametrize("resolution", [16, 32])
    def test_oracle_plumbing_reconstruction(self, resolution):
        # GT canonicals + GT transforms through the sampler and assembler
        scores = []
        for i in range(6):
            t = sd.sample_template(np.random.default_rng([41, i]), "chair")
            lg = sd.generate_shape(t, resolution)
            parts = vx.extract_parts(lg)
            placed = [
                affine_sample(parts.parts[k], parts.transforms[k].matrix, parts.transforms[k].translation)
                for k in range(4)
            ]
            out = cp.assemble(placed, SCHEMA)
            scores.append(vx.miou(lg, out))
        assert np.mean(scores) >= 0.8

    def test_end_to_end_gradients_on_micro_config(self):
        # every parameter group through the full composed loss on 8^3 grids
        from partfactor.decomposer import EncoderNet, ProjectionSet, pi_loss, project

        rng = np.random.default_rng(12)
        encoder = EncoderNet(8, n=12, channels=(8, 16, 32), rng=rng)
        projections = ProjectionSet(12, 4)
        decoder = cp.PartDecoderNet(8, n=12, rng=rng)
        localizer = cp.LocalizationNet(8, k=4, n=12, rng=rng)
        # move the localizer off the identity point so sample coordinates
        # sit away from interpolation-cell boundaries
        localizer.params["stn.out.b"].data += rng.uniform(0.011, 0.023, 48)
        params = {**encoder.params, **projections.params, **decoder.params, **localizer.params}
        occ = (rng.random((8, 8, 8)) > 0.6).astype(float)
        targets = (rng.random((4, 8, 8, 8)) > 0.7).astype(float)
        gt_thetas = np.tile(cp.IDENTITY_THETA, (4, 1)) + rng.uniform(-0.1, 0.1, (4, 12))

        def loss():
            codes = project(encoder.forward(occ), projections)
            graph = cp.compose_graph(codes, decoder, localizer)
            out = pi_loss(projections)[0]
            for k in range(4):
                term = ad.add(
                    ad.bce(graph["canonicals"][k], targets[k]),
                    ad.l2(graph["thetas"][k], gt_thetas[k]),
                )
                out = ad.add(out, term)
            return ad.add(out, ad.scale(ad.bce(graph["occupancy"], occ), 0.01))

        ad.zero_grads(params)
        ad.backward(loss())
        h = 1e-6
        coord_rng = np.random.default_rng(13)
        for name, p in params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.ravel()
            for j in map(int, coord_rng.integers(0, flat.size, size=3)):
                orig = flat[j]
                flat[j] = orig + h
                up = float(loss().data)
                flat[j] = orig - h
                dn = float(loss().data)
                flat[j] = orig
                numeric = (up - dn) / (2 * h)
                analytic = grad.ravel()[j]
                denom = max(abs(numeric), abs(analytic), 1.0)
                assert abs(numeric - analytic) / denom < 1e-3, (name, j)


class TestMonolithic:
    def test_softmax_normalized_and_deterministic(self):
        model = micro_model(seed=8, monolithic=True)
        rng = np.random.default_rng(9)
        codes = [ad.DiffValue(rng.standard_normal(32)) for _ in range(4)]
        lg, logits, probs = cp.compose_monolithic(codes, model.mono, SCHEMA)
        assert np.allclose(probs.data.sum(axis=0), 1.0, atol=1e-12)
        assert logits.shape == (5, 16, 16, 16)
        again = cp.compose_monolithic(codes, model.mono, SCHEMA)[0]
        assert lg == again

    def test_gradients(self):
        model = DecomposerComposer(resolution=16, schema=SCHEMA, n=12, seed=10, monolithic=True)
        rng = np.random.default_rng(11)
        occ = (rng.random((16, 16, 16)) > 0.6).astype(float)
        labels = rng.integers(0, 5, size=(16, 16, 16))

        def loss():
            codes = model.embed_parts(occ)
            e_sum = codes[0]
            for c in codes[1:]:
                e_sum = ad.add(e_sum, c)
            return ad.softmax_ce(model.mono.forward(e_sum), labels)

        ad.zero_grads(model.params)
        ad.backward(loss())
        h = 1e-5
        coord_rng = np.random.default_rng(12)
        for name in ("mono.fc1.W", "mono.d0.W", "mono.d1.b", "encoder.c0.W"):
            p = model.params[name]
            flat = p.data.ravel()
            for j in map(int, coord_rng.integers(0, flat.size, size=3)):
                orig = flat[j]
                flat[j] = orig + h
                up = float(loss().data)
                flat[j] = orig - h
                dn = float(loss().data)
                flat[j] = orig
                numeric = (up - dn) / (2 * h)
                analytic = p.grad.ravel()[j]
                denom = max(abs(numeric), abs(analytic), 1.0)
                assert abs(numeric - analytic) / denom < 1e-4, name


class TestModelPersistence:
    def test_save_load_bit_exact(self, tmp_path):
        model = micro_model(seed=13)
        path = tmp_path / "model.pfck"
        model.save(path)
        back = DecomposerComposer.load(path)
        assert back.schema.names == model.schema.names
        assert back.resolution == model.resolution and not back.monolithic
        for name, p in model.params.items():
            assert np.array_equal(back.params[name].data, p.data)

    def test_monolithic_roundtrip(self, tmp_path):
        model = micro_model(seed=14, monolithic=True)
        model.save(tmp_path / "m.pfck")
        back = DecomposerComposer.load(tmp_path / "m.pfck")
        assert back.monolithic
        assert set(back.params) == set(model.params)
