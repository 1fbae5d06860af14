"""Shape encoder and learned projection layers (the Decomposer).

An unlabeled occupancy grid is encoded to an n-vector, then K bias-free
linear projections split that vector into per-part embedding coordinates.
Training pulls the projection matrices toward a partition of the identity
(idempotent, mutually annihilating, summing to I), which makes part
composition a plain sum in the embedding space.
"""

import numpy as np

from . import autodiff as ad

EMBED_DIM = 128
ENCODER_CHANNELS = (16, 32, 64, 128)


def he_init(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def xavier_init(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class EncoderNet:
    """Conv3 stack (kernel 4, stride 2, relu) plus a linear head to n."""

    def __init__(self, resolution, n=EMBED_DIM, channels=ENCODER_CHANNELS, rng=None):
        rng = rng or np.random.default_rng(0)
        if resolution % (2 ** len(channels)) != 0:
            raise ValueError(
                f"resolution {resolution} not divisible by 2^{len(channels)}"
            )
        self.resolution = resolution
        self.n = n
        self.channels = tuple(channels)
        self.params = {}
        cin = 1
        for i, cout in enumerate(self.channels):
            fan = cin * 64
            self.params[f"encoder.c{i}.W"] = ad.DiffValue(
                he_init(rng, (cout, cin, 4, 4, 4), fan)
            )
            self.params[f"encoder.c{i}.b"] = ad.DiffValue(np.zeros(cout))
            cin = cout
        spatial = resolution // (2 ** len(self.channels))
        flat = cin * spatial**3
        self.params["encoder.head.W"] = ad.DiffValue(xavier_init(rng, (flat, n), flat, n))
        self.params["encoder.head.b"] = ad.DiffValue(np.zeros(n))
        self._flat = flat

    def forward(self, grid):
        """grid: (R, R, R) array or DiffValue -> embedding DiffValue (n,)."""
        if not isinstance(grid, ad.DiffValue):
            grid = ad.DiffValue(np.asarray(grid, dtype=np.float64))
        if grid.shape != (self.resolution,) * 3:
            raise ValueError(f"expected {(self.resolution,)*3} grid, got {grid.shape}")
        x = ad.reshape(grid, (1, *grid.shape))
        for i in range(len(self.channels)):
            x = ad.relu(
                ad.conv3(x, self.params[f"encoder.c{i}.W"], self.params[f"encoder.c{i}.b"])
            )
        x = ad.reshape(x, (self._flat,))
        return ad.dense(x, self.params["encoder.head.W"], self.params["encoder.head.b"])


def block_sizes(n, k):
    """Split n coordinates into k contiguous blocks, remainder spread left."""
    base = n // k
    sizes = [base + (1 if i < n % k else 0) for i in range(k)]
    return sizes


def block_diagonal_projections(n, k):
    """Exact partition of the identity: coordinate-slice selector matrices."""
    mats = []
    start = 0
    for size in block_sizes(n, k):
        p = np.zeros((n, n))
        p[start : start + size, start : start + size] = np.eye(size)
        mats.append(p)
        start += size
    return mats


class ProjectionSet:
    """K trainable n x n projection matrices, no biases."""

    def __init__(self, n=EMBED_DIM, k=4, matrices=None):
        self.n = n
        self.k = k
        if matrices is None:
            matrices = block_diagonal_projections(n, k)
        self.mats = [ad.DiffValue(m) for m in matrices]
        self.params = {f"proj.P{i}": m for i, m in enumerate(self.mats)}


def encode(grid, net):
    return net.forward(grid)


def project(embedding, projections):
    """Whole-shape embedding -> K part embeddings, part_k = P_k @ e."""
    if embedding.shape != (projections.n,):
        raise ValueError(f"embedding shape {embedding.shape} vs n={projections.n}")
    return [ad.matmul(p, embedding) for p in projections.mats]


def pi_loss(projections):
    """Partition-of-identity residuals as (total, idempotence, orthogonality,
    completeness), each a scalar DiffValue.

    total = sum_i ||P_i^2 - P_i||_F^2 + sum_{i != j} ||P_i P_j||_F^2
            + ||sum_i P_i - I||_F^2
    """
    mats = projections.mats
    idem = None
    for p in mats:
        term = ad.frob_sq(ad.sub(ad.matmul(p, p), p))
        idem = term if idem is None else ad.add(idem, term)
    orth = ad.DiffValue(0.0)
    for i, pi in enumerate(mats):
        for j, pj in enumerate(mats):
            if i != j:
                orth = ad.add(orth, ad.frob_sq(ad.matmul(pi, pj)))
    total_mat = None
    for p in mats:
        total_mat = p if total_mat is None else ad.add(total_mat, p)
    eye = ad.DiffValue(np.eye(projections.n))
    comp = ad.frob_sq(ad.sub(total_mat, eye))
    total = ad.add(ad.add(idem, orth), comp)
    return total, idem, orth, comp


# ---------------------------------------------------------------------------
# projection-matrix rank analysis


def jacobi_singular_values(matrix, sweep_tol=1e-12, max_sweeps=60):
    """Singular values by one-sided Jacobi: rotate column pairs until all
    are mutually orthogonal, then the column norms are the singular values."""
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[1]
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha * beta == 0.0:
                    continue
                ratio = abs(gamma) / np.sqrt(alpha * beta)
                off = max(off, ratio)
                if ratio <= sweep_tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
        if off <= sweep_tol:
            break
    sigma = np.linalg.norm(a, axis=0)
    return np.sort(sigma)[::-1]


def effective_rank_report(projections, tol=1e-3):
    """Per-part (effective rank, singular values); rank counts sigma >= tol * sigma_max."""
    report = []
    for p in projections.mats:
        sigma = jacobi_singular_values(p.data)
        smax = sigma[0] if len(sigma) else 0.0
        rank = int((sigma >= tol * smax).sum()) if smax > 0 else 0
        report.append((rank, sigma))
    return report
