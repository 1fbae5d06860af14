"""Trilinear affine resampling of cubic volumes.

Single source of truth for the sampling convention used everywhere in this
package: a 12-parameter affine map (A, t) is applied in *gather* direction,
i.e. the output volume at voxel-center coordinate o reads the input volume
at p = A @ o + t. Coordinates are normalized to [-1, 1]^3 with the center
of voxel i at (2*i + 1) / R - 1. Reads outside the volume return zero.

The interpolation kernel is piecewise linear; at cell boundaries (sample
coordinate exactly on a voxel center) the left cell is used, so the forward
value is unchanged but derivatives are taken from the left. That makes the
identity transform reproduce the input bit-for-bit and keeps gradients
deterministic.
"""

import numpy as np

_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


def voxel_centers(resolution):
    """Normalized [-1, 1] coordinates of the R voxel centers along one axis."""
    return (2.0 * np.arange(resolution) + 1.0) / resolution - 1.0


def output_coords(resolution):
    """(R^3, 3) array of output voxel-center coordinates, x-major order."""
    c = voxel_centers(resolution)
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


_COORD_CACHE = {}


def _coords(resolution):
    if resolution not in _COORD_CACHE:
        _COORD_CACHE[resolution] = output_coords(resolution)
    return _COORD_CACHE[resolution]


def sample_with_cache(volume, matrix, translation):
    """Forward resample; also returns the geometry needed for the backward."""
    volume = np.asarray(volume, dtype=np.float64)
    r = volume.shape[0]
    coords = _coords(r)
    p = coords @ np.asarray(matrix, dtype=np.float64).T + np.asarray(
        translation, dtype=np.float64
    )
    u = (p + 1.0) * (r / 2.0) - 0.5
    # snap almost-integer coordinates so grid-aligned transforms (identity,
    # whole-voxel translations) reproduce inputs exactly at any resolution
    snapped = np.rint(u)
    u = np.where(np.abs(u - snapped) < 1e-9, snapped, u)
    # left cell at exact voxel centers: i0 = ceil(u) - 1, frac in (0, 1]
    i0 = np.ceil(u).astype(np.int64) - 1
    frac = u - i0

    # separable per-axis pieces, indexed by the corner bit (0: low, 1: high)
    axis_idx, axis_ok, axis_w = [], [], []
    for ax in range(3):
        lo = i0[:, ax]
        hi = lo + 1
        axis_idx.append((np.clip(lo, 0, r - 1), np.clip(hi, 0, r - 1)))
        axis_ok.append(((lo >= 0) & (lo < r), (hi >= 0) & (hi < r)))
        f = frac[:, ax]
        axis_w.append((1.0 - f, f))

    flat = volume.ravel()
    n = coords.shape[0]
    ii = np.empty((8, n), dtype=np.int64)
    inside = np.empty((8, n), dtype=bool)
    w = np.empty((8, n))
    v = np.empty((8, n))
    for ci, (cx, cy, cz) in enumerate(_CORNERS):
        np.multiply(axis_w[0][cx], axis_w[1][cy], out=w[ci])
        w[ci] *= axis_w[2][cz]
        ok = axis_ok[0][cx] & axis_ok[1][cy] & axis_ok[2][cz]
        inside[ci] = ok
        fi = (axis_idx[0][cx] * r + axis_idx[1][cy]) * r + axis_idx[2][cz]
        ii[ci] = fi
        v[ci] = flat[fi] * ok
    out = (w * v).sum(axis=0).reshape(r, r, r)
    cache = (r, coords, axis_w, ii, inside, w, v)
    return out, cache


def affine_sample(volume, matrix, translation):
    """Resample a cubic volume under p = A @ o + t with trilinear weights."""
    return sample_with_cache(volume, matrix, translation)[0]


def sample_backward(cache, grad_out):
    """Gradients of sum(grad_out * output) w.r.t. (volume, matrix, translation)."""
    r, coords, axis_w, ii, inside, w, v = cache
    go = np.asarray(grad_out, dtype=np.float64).ravel()

    sel = inside.ravel()
    grad_vol = np.bincount(
        ii.ravel()[sel], weights=(go[None, :] * w).ravel()[sel], minlength=r * r * r
    ).reshape(r, r, r)

    # d(weight)/d(u_ax) = sign * product of the other two axis weights
    gp = np.zeros((3, len(go)))
    for ci, corner in enumerate(_CORNERS):
        vc = v[ci]
        wx, wy, wz = (axis_w[ax][corner[ax]] for ax in range(3))
        for ax, others in ((0, wy * wz), (1, wx * wz), (2, wx * wy)):
            if corner[ax]:
                gp[ax] += others * vc
            else:
                gp[ax] -= others * vc
    gp *= (r / 2.0) * go[None, :]
    grad_matrix = gp @ coords
    grad_translation = gp.sum(axis=1)
    return grad_vol, grad_matrix, grad_translation


def affine_sample_vjp(volume, matrix, translation, grad_out):
    """One-shot convenience wrapper: forward setup plus backward."""
    _, cache = sample_with_cache(volume, matrix, translation)
    return sample_backward(cache, grad_out)
