"""Finite-difference validation suite for every differentiable operation.

Each op gets a batch of random micro-instances; analytic gradients from
backward() are compared against central differences of the forward pass.
grid_sample3's transform gradient is piecewise linear, so its check masks
away output cells whose sample coordinates fall within a small margin of an
interpolation-cell boundary (the kink set) and uses a looser tolerance.
"""

import time

import numpy as np

from . import autodiff as ad
from .sampling import voxel_centers

DEFAULT_TOL = 1e-4
SAMPLER_TOL = 1e-3
_BOUNDARY_MARGIN = 2e-3  # in interpolation-cell units


def _probe(rng, shape):
    return rng.uniform(-1.5, 1.5, size=shape)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(-1.5, 1.5, size=shape)
    x += np.sign(x) * gap
    return x


def _sampler_instance(rng, r=6):
    vol = rng.uniform(0.0, 1.0, size=(r, r, r))
    mat = np.eye(3) + rng.uniform(-0.15, 0.15, size=(3, 3))
    trans = rng.uniform(-0.2, 0.2, size=3)
    theta = np.concatenate([mat.ravel(), trans])
    # mask cells whose sample coordinates sit near an interpolation boundary,
    # where the left-cell subgradient and finite differences legitimately differ
    c = voxel_centers(r)
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    u = (coords @ mat.T + trans + 1.0) * (r / 2.0) - 0.5
    frac = u - np.floor(u)
    safe = (np.minimum(frac, 1.0 - frac) > _BOUNDARY_MARGIN).all(axis=1)
    weights = rng.standard_normal((r, r, r)) * safe.reshape(r, r, r)
    return vol, theta, weights


def op_checks(seed=0, instances=20):
    """Yields (name, callable) pairs; each callable returns the max rel error."""
    rng = np.random.default_rng(seed)

    def simple(name, build, arrays_fn, h=1e-4):
        def run():
            worst = 0.0
            for _ in range(instances):
                arrays = arrays_fn(rng)
                worst = max(worst, ad.gradient_error(build, arrays, h=h))
            return worst

        return name, run

    def probe_scalar(op):
        # wraps a tensor op into a scalar via a fixed random weighting
        def build_factory(weights):
            def build(*leaves):
                return ad.weighted_sum(op(*leaves), weights)

            return build

        return build_factory

    n = 5

    yield simple("relu", lambda x: ad.vsum(ad.relu(x)), lambda r: [_away_from_zero(r, (7,))])
    yield simple("sigmoid", lambda x: ad.vsum(ad.sigmoid(x)), lambda r: [_probe(r, (7,))])
    yield simple("add", lambda x, y: ad.frob_sq(ad.add(x, y)), lambda r: [_probe(r, (4, 3)), _probe(r, (4, 3))])
    yield simple("sub", lambda x, y: ad.frob_sq(ad.sub(x, y)), lambda r: [_probe(r, (4, 3)), _probe(r, (4, 3))])
    yield simple("scale", lambda x: ad.vsum(ad.scale(x, 1.7)), lambda r: [_probe(r, (6,))])
    yield simple("vsum", lambda x: ad.vsum(x), lambda r: [_probe(r, (3, 2, 2))])
    yield simple("frob_sq", lambda x: ad.frob_sq(x), lambda r: [_probe(r, (4, 4))])
    yield simple("l2", lambda x: ad.l2(x, np.linspace(-1, 1, 12).reshape(4, 3)), lambda r: [_probe(r, (4, 3))])
    yield simple(
        "bce",
        lambda p: ad.bce(p, (np.arange(9) % 2).astype(float)),
        lambda r: [r.uniform(0.05, 0.95, size=9)],
    )
    yield simple(
        "dense",
        lambda x, w, b: ad.vsum(ad.relu(ad.dense(x, w, b))),
        lambda r: [_probe(r, (n,)), _probe(r, (n, 4)), _probe(r, (4,))],
    )
    yield simple(
        "dense_nobias",
        lambda x, w: ad.frob_sq(ad.dense_nobias(x, w)),
        lambda r: [_probe(r, (n,)), _probe(r, (n, 4))],
    )
    yield simple(
        "matmul",
        lambda x, y: ad.frob_sq(ad.matmul(x, y)),
        lambda r: [_probe(r, (3, 4)), _probe(r, (4, 2))],
    )
    yield simple(
        "matmul_vec",
        lambda x, y: ad.vsum(ad.matmul(x, y)),
        lambda r: [_probe(r, (3, 4)), _probe(r, (4,))],
    )

    def conv_build(weights):
        def build(x, w, b):
            return ad.weighted_sum(ad.conv3(x, w, b, stride=2, padding=1), weights)

        return build

    def conv_arrays(r):
        return [_probe(r, (2, 4, 4, 4)), _probe(r, (3, 2, 4, 4, 4)), _probe(r, (3,))]

    def conv_run():
        worst = 0.0
        for _ in range(instances):
            arrays = conv_arrays(rng)
            weights = rng.standard_normal((3, 2, 2, 2))
            worst = max(worst, ad.gradient_error(conv_build(weights), arrays))
        return worst

    yield "conv3", conv_run

    def convt_run():
        worst = 0.0
        for _ in range(instances):
            arrays = [_probe(rng, (2, 2, 2, 2)), _probe(rng, (2, 3, 4, 4, 4)), _probe(rng, (3,))]
            weights = rng.standard_normal((3, 4, 4, 4))

            def build(x, w, b):
                return ad.weighted_sum(ad.conv3_transpose(x, w, b, stride=2, padding=1), weights)

            worst = max(worst, ad.gradient_error(build, arrays))
        return worst

    yield "conv3_transpose", convt_run

    yield simple(
        "reshape_concat_narrow",
        lambda x, y: ad.vsum(ad.narrow(ad.concat([ad.reshape(x, (6,)), y]), 2, 7)),
        lambda r: [_probe(r, (2, 3)), _probe(r, (5,))],
    )
    yield simple(
        "vmax",
        lambda x, y: ad.vsum(ad.vmax(x, y)),
        lambda r: [_probe(r, (8,)), _probe(r, (8,)) + 0.01],
    )
    yield simple(
        "slice0",
        lambda x: ad.vsum(ad.slice0(x, 1)),
        lambda r: [_probe(r, (3, 4))],
    )
    yield simple(
        "softmax",
        lambda x: ad.weighted_sum(ad.softmax(x, axis=0), np.linspace(-1, 1, 12).reshape(3, 4)),
        lambda r: [_probe(r, (3, 4))],
    )
    yield simple(
        "softmax_ce",
        lambda x: ad.softmax_ce(x, np.array([0, 2, 1, 2])),
        lambda r: [_probe(r, (3, 4))],
    )
    yield simple(
        "weighted_sum",
        lambda x: ad.weighted_sum(x, np.linspace(0.5, 2.0, 6)),
        lambda r: [_probe(r, (6,))],
    )

    def sampler_vol_run():
        # output is exactly linear in the volume, so plain FD applies
        worst = 0.0
        for _ in range(instances):
            vol, theta, weights = _sampler_instance(rng)

            def build(v):
                return ad.weighted_sum(ad.grid_sample3(v, ad.DiffValue(theta)), weights)

            worst = max(worst, ad.gradient_error(build, [vol]))
        return worst

    yield "grid_sample3_volume", sampler_vol_run

    def sampler_theta_run():
        worst = 0.0
        for _ in range(instances):
            vol, theta, weights = _sampler_instance(rng)

            def build(th):
                return ad.weighted_sum(ad.grid_sample3(ad.DiffValue(vol), th), weights)

            worst = max(worst, ad.gradient_error(build, [theta], h=1e-5))
        return worst

    yield "grid_sample3_theta", sampler_theta_run


def run_suite(seed=0, instances=20, verbose=False):
    """Run every op check; returns (all_passed, [(name, err, tol, elapsed)])."""
    results = []
    ok = True
    for name, run in op_checks(seed=seed, instances=instances):
        t0 = time.perf_counter()
        err = run()
        elapsed = time.perf_counter() - t0
        tol = SAMPLER_TOL if name.startswith("grid_sample3") else DEFAULT_TOL
        passed = err <= tol
        ok = ok and passed
        results.append((name, err, tol, elapsed))
        if verbose:
            status = "ok" if passed else "FAIL"
            print(f"  {name:24s} max rel err {err:.3e}  (tol {tol:.0e})  {elapsed:5.2f}s  {status}")
    return ok, results
