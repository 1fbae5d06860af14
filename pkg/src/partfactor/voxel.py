"""Voxel occupancy grids, semantic part labels, file formats, and metrics.

Grids are cubic, resolution R, stored as numpy arrays indexed [x, y, z].
The serialized voxel order (binvox and the PFLG labeled-grid format) is
x-major with y fastest: flat index = x*R^2 + z*R + y.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

from .sampling import affine_sample, voxel_centers


class FormatError(ValueError):
    """Malformed byte stream; `offset` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class PartSchema:
    """Names of the K semantic parts; label k corresponds to names[k-1]."""

    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("schema needs at least two parts")
        if len(set(names)) != len(names):
            raise ValueError("part names must be unique")
        for n in names:
            if not n or " " in n:
                raise ValueError(f"bad part name: {n!r}")

    @property
    def K(self):
        return len(self.names)

    def label_of(self, name):
        return self.names.index(name) + 1


CHAIR_SCHEMA = PartSchema(("back", "seat", "leg", "arm"))


class OccupancyGrid:
    """Binary R^3 voxel volume."""

    def __init__(self, data):
        data = np.asarray(data)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise ValueError(f"expected cubic 3-d array, got shape {data.shape}")
        if data.dtype != bool and not np.isin(data, (0, 1)).all():
            raise ValueError("occupancy values must be 0 or 1")
        self.data = data.astype(bool)
        self.resolution = data.shape[0]

    def count(self):
        return int(self.data.sum())

    def __eq__(self, other):
        return (
            isinstance(other, OccupancyGrid)
            and self.resolution == other.resolution
            and bool(np.array_equal(self.data, other.data))
        )


class LabeledGrid:
    """Per-voxel semantic labels in {0..K}; 0 is empty."""

    def __init__(self, labels, schema):
        labels = np.asarray(labels)
        if labels.ndim != 3 or len(set(labels.shape)) != 1:
            raise ValueError(f"expected cubic 3-d array, got shape {labels.shape}")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() > schema.K:
            raise ValueError("labels must lie in {0..K}")
        self.labels = labels
        self.schema = schema
        self.resolution = labels.shape[0]

    def occupancy(self):
        return OccupancyGrid(self.labels > 0)

    def part_mask(self, label):
        return self.labels == label

    def __eq__(self, other):
        return (
            isinstance(other, LabeledGrid)
            and self.schema == other.schema
            and bool(np.array_equal(self.labels, other.labels))
        )


@dataclass
class AffineParams:
    """12-DOF transform; the sampler reads the source at A @ o + t."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.matrix).all() and np.isfinite(self.translation).all()):
            raise ValueError("affine parameters must be finite")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64).reshape(12)
        return cls(vec[:9].reshape(3, 3), vec[9:])

    def as_vector(self):
        return np.concatenate([self.matrix.ravel(), self.translation])

    def is_identity(self, tol=0.0):
        return bool(
            np.allclose(self.matrix, np.eye(3), atol=tol)
            and np.allclose(self.translation, 0.0, atol=tol)
        )


@dataclass
class PartSet:
    """Canonical (centered, scaled) part volumes plus placement transforms."""

    parts: np.ndarray  # (K, R, R, R) values in [0, 1]
    present: np.ndarray  # (K,) bool
    transforms: list = field(default_factory=list)  # K AffineParams
    schema: PartSchema = CHAIR_SCHEMA


# ---------------------------------------------------------------------------
# binvox byte format


def _serial_order(volume):
    # serialized order: y fastest, then z, then x
    return np.ascontiguousarray(np.transpose(volume, (0, 2, 1))).ravel()


def _from_serial_order(flat, r):
    return np.transpose(flat.reshape(r, r, r), (0, 2, 1))


def _read_line(blob, pos):
    end = blob.find(b"\n", pos)
    if end < 0:
        raise FormatError("unterminated header line", pos)
    return blob[pos:end].decode("ascii", errors="replace"), end + 1


def _decode_rle(blob, pos, total, value_max):
    """Decode (value, count) byte pairs covering exactly `total` cells."""
    payload = blob[pos:]
    if len(payload) % 2 == 1:
        raise FormatError("dangling RLE byte", pos + len(payload) - 1)
    pairs = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 2)
    values, counts = pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64)
    if (values > value_max).any():
        bad = int(np.argmax(values > value_max))
        raise FormatError(f"RLE value {values[bad]} out of range", pos + 2 * bad)
    if (counts == 0).any():
        bad = int(np.argmax(counts == 0))
        raise FormatError("RLE count of zero", pos + 2 * bad + 1)
    cum = np.cumsum(counts)
    if len(cum) == 0 or cum[-1] < total:
        raise FormatError(
            f"RLE underrun: {int(cum[-1]) if len(cum) else 0} of {total} cells",
            pos + len(payload),
        )
    stop = int(np.searchsorted(cum, total))
    if cum[stop] != total:
        raise FormatError("RLE overrun: run crosses the end of the volume", pos + 2 * stop)
    if stop + 1 != len(pairs):
        raise FormatError("trailing data after final run", pos + 2 * (stop + 1))
    return np.repeat(values, counts)


def _encode_rle(flat):
    """Canonical RLE: maximal runs greedily chunked to counts <= 255."""
    flat = np.asarray(flat)
    out = bytearray()
    if len(flat) == 0:
        return bytes(out)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [len(flat)]))
    for s, e in zip(starts, ends):
        v, n = int(flat[s]), int(e - s)
        while n > 255:
            out += bytes((v, 255))
            n -= 255
        out += bytes((v, n))
    return bytes(out)


def read_binvox(blob):
    """Parse a binvox byte stream into an OccupancyGrid."""
    pos = 0
    line, pos = _read_line(blob, 0)
    if not line.startswith("#binvox"):
        raise FormatError("missing #binvox magic", 0)
    dim = None
    while True:
        line_start = pos
        line, pos = _read_line(blob, pos)
        words = line.split()
        if not words:
            continue
        if words[0] == "data":
            break
        if words[0] == "dim":
            if len(words) != 4:
                raise FormatError("dim line needs three sizes", line_start)
            try:
                sizes = [int(w) for w in words[1:]]
            except ValueError:
                raise FormatError("non-integer dim", line_start) from None
            if len(set(sizes)) != 1 or sizes[0] <= 0:
                raise FormatError(f"non-cubic dim {sizes}", line_start)
            dim = sizes[0]
        elif words[0] in ("translate", "scale"):
            pass
        else:
            raise FormatError(f"unknown header keyword {words[0]!r}", line_start)
    if dim is None:
        raise FormatError("missing dim line", pos)
    flat = _decode_rle(blob, pos, dim**3, value_max=1)
    return OccupancyGrid(_from_serial_order(flat, dim))


def write_binvox(grid):
    """Canonical binvox bytes for a grid; read_binvox inverts this exactly."""
    r = grid.resolution
    header = f"#binvox 1\ndim {r} {r} {r}\ntranslate 0 0 0\nscale 1\ndata\n"
    return header.encode("ascii") + _encode_rle(_serial_order(grid.data.astype(np.uint8)))


# ---------------------------------------------------------------------------
# PFLG labeled-grid format

PFLG_MAGIC = b"PFLG1\n"


def write_pflg(lg):
    """Serialize a LabeledGrid: magic, R and K, part names, then label RLE."""
    if lg.schema.K > 255:
        raise ValueError("PFLG labels are single bytes; K must be <= 255")
    head = PFLG_MAGIC + f"{lg.resolution} {lg.schema.K}\n".encode("ascii")
    head += (" ".join(lg.schema.names) + "\n").encode("ascii")
    return head + _encode_rle(_serial_order(lg.labels.astype(np.uint8)))


def read_pflg(blob):
    if not blob.startswith(PFLG_MAGIC):
        raise FormatError("missing PFLG1 magic", 0)
    pos = len(PFLG_MAGIC)
    line, pos = _read_line(blob, pos)
    try:
        r, k = (int(w) for w in line.split())
    except ValueError:
        raise FormatError("bad resolution/part-count line", len(PFLG_MAGIC)) from None
    names_at = pos
    line, pos = _read_line(blob, pos)
    names = tuple(line.split())
    if len(names) != k:
        raise FormatError(f"expected {k} part names, got {len(names)}", names_at)
    flat = _decode_rle(blob, pos, r**3, value_max=k)
    return LabeledGrid(_from_serial_order(flat, r), PartSchema(names))


def save_pflg(lg, path):
    with open(path, "wb") as fh:
        fh.write(write_pflg(lg))


def load_pflg(path):
    with open(path, "rb") as fh:
        return read_pflg(fh.read())


# ---------------------------------------------------------------------------
# proximity labeling with graph-cut smoothing

_INT_SCALE = 2**24  # fixed-point scale for max-flow capacities
_HARD = 2**40  # effectively infinite capacity


def _potts_energy(labels, unary, edges, lam):
    e = unary[np.arange(len(labels)), labels].sum()
    if len(edges):
        e += lam * np.count_nonzero(labels[edges[:, 0]] != labels[edges[:, 1]])
    return float(e)


def _expansion_move(labels, unary, edges, lam, alpha):
    """One alpha-expansion step solved as an exact s-t min-cut.

    Binary variable per node: x = 1 means the node switches to alpha (it
    ends on the source side of the cut), x = 0 keeps its current label.
    For a pairwise term with costs A = E(0,0), B = E(0,1), C = E(1,0),
    D = E(1,1) = 0, the identity

        E = A + (B - A) x_v + (D - B) x_u + (B + C - A - D) x_u (1 - x_v)

    maps onto one directed edge u->v of capacity B + C - A (cut exactly
    when u is on the source side and v on the sink side) plus take-side
    t-link adjustments; Potts terms are submodular so the capacity is
    nonnegative.
    """
    n = len(labels)
    keep_cost = unary[np.arange(n), labels].copy()
    keep_cost[labels == alpha] = _HARD / _INT_SCALE  # already alpha: forced to take
    take_link = unary[:, alpha] * _INT_SCALE  # v -> t, pays when x_v = 1
    keep_link = keep_cost * _INT_SCALE  # s -> v, pays when x_v = 0

    rows = cols = caps = np.empty(0, dtype=np.int64)
    if len(edges):
        u, v = edges[:, 0], edges[:, 1]
        lu, lv = labels[u], labels[v]
        a = lam * (lu != lv)
        b = lam * (lu != alpha)  # E(keep_u, take_v)
        c = lam * (alpha != lv)  # E(take_u, keep_v)
        w = np.rint((b + c - a) * _INT_SCALE).astype(np.int64)
        pos = w > 0
        rows, cols, caps = u[pos], v[pos], w[pos]
        np.add.at(take_link, u, -b * _INT_SCALE)
        np.add.at(take_link, v, (b - a) * _INT_SCALE)

    # per-node constant shift so both t-links are nonnegative
    shift = np.minimum(take_link, keep_link)
    take_link = np.rint(take_link - shift).astype(np.int64)
    keep_link = np.rint(keep_link - shift).astype(np.int64)

    source, sink = n, n + 1
    rows = np.concatenate([rows, np.full(n, source, dtype=np.int64), np.arange(n)])
    cols = np.concatenate([cols, np.arange(n), np.full(n, sink, dtype=np.int64)])
    caps = np.concatenate([caps, keep_link, take_link])
    graph = csr_matrix((caps, (rows, cols)), shape=(n + 2, n + 2))
    result = maximum_flow(graph, source, sink)
    residual = (graph - result.flow) > 0
    reach = breadth_first_order(residual, source, directed=True, return_predecessors=False)
    take = np.zeros(n, dtype=bool)
    take[reach[reach < n]] = True

    new_labels = labels.copy()
    new_labels[take] = alpha
    new_labels[labels == alpha] = alpha
    return new_labels


def label_from_points(grid, points, lam, schema=CHAIR_SCHEMA):
    """Assign part labels to occupied voxels from labeled guide points.

    Unary cost of giving voxel v label k is the distance from v's center to
    the nearest point labeled k; a Potts penalty lam is paid per 6-neighbor
    pair of occupied voxels with differing labels. Minimized by repeated
    alpha-expansion sweeps, each move an exact min-cut; a move is accepted
    only if it strictly lowers the true energy, so sweeps terminate.
    """
    if not points:
        raise ValueError("need at least one labeled point")
    if lam < 0:
        raise ValueError("smoothness weight must be nonnegative")
    pts = {}
    for xyz, label in points:
        xyz = np.asarray(xyz, dtype=np.float64)
        if xyz.shape != (3,) or not np.isfinite(xyz).all():
            raise ValueError(f"bad point coordinates {xyz}")
        if not 1 <= int(label) <= schema.K:
            raise ValueError(f"label {label} outside 1..{schema.K}")
        pts.setdefault(int(label), []).append(xyz)

    r = grid.resolution
    occ_idx = np.argwhere(grid.data)
    labels_out = np.zeros((r, r, r), dtype=np.int64)
    if len(occ_idx) == 0:
        return LabeledGrid(labels_out, schema)
    centers = voxel_centers(r)
    vox_xyz = centers[occ_idx]  # (n, 3)

    active = sorted(pts)
    unary = np.full((len(occ_idx), len(active)), np.inf)
    for j, k in enumerate(active):
        cloud = np.stack(pts[k])
        d = np.linalg.norm(vox_xyz[:, None, :] - cloud[None, :, :], axis=2)
        unary[:, j] = d.min(axis=1)

    labels = np.argmin(unary, axis=1)  # ties -> lowest label
    if lam > 0 and len(active) > 1:
        flat_of = -np.ones((r, r, r), dtype=np.int64)
        flat_of[tuple(occ_idx.T)] = np.arange(len(occ_idx))
        edges = []
        for axis in range(3):
            shifted = occ_idx.copy()
            shifted[:, axis] += 1
            ok = shifted[:, axis] < r
            nbr = np.full(len(occ_idx), -1, dtype=np.int64)
            nbr[ok] = flat_of[tuple(shifted[ok].T)]
            pair_ok = nbr >= 0
            edges.append(np.stack([np.arange(len(occ_idx))[pair_ok], nbr[pair_ok]], axis=1))
        edges = np.concatenate(edges, axis=0)

        energy = _potts_energy(labels, unary, edges, lam)
        improved = True
        while improved:
            improved = False
            for alpha in range(len(active)):
                candidate = _expansion_move(labels, unary, edges, lam, alpha)
                cand_energy = _potts_energy(candidate, unary, edges, lam)
                if cand_energy < energy - 1e-12:
                    labels, energy = candidate, cand_energy
                    improved = True

    labels_out[tuple(occ_idx.T)] = np.asarray(active, dtype=np.int64)[labels]
    return LabeledGrid(labels_out, schema)


# ---------------------------------------------------------------------------
# part canonicalization

CANONICAL_EXTENT = 0.9  # canonical parts span this fraction of the grid


def extract_parts(lg):
    """Crop, center, and uniformly scale each part to the canonical frame.

    The recorded transform is exactly the inverse of the canonicalization
    map: feeding (canonical volume, transform) to the sampler reproduces
    the part at its original location, up to interpolation loss.
    """
    r = lg.resolution
    k = lg.schema.K
    parts = np.zeros((k, r, r, r))
    present = np.zeros(k, dtype=bool)
    transforms = [AffineParams.identity() for _ in range(k)]
    for label in range(1, k + 1):
        mask = lg.part_mask(label)
        if not mask.any():
            continue
        idx = np.argwhere(mask)
        lo, hi = idx.min(axis=0), idx.max(axis=0)
        center = (lo + hi + 1) / r - 1.0  # midpoint of the voxel-boundary box
        half = (hi - lo + 1) / r
        scale = CANONICAL_EXTENT / half.max()
        # canonical <- original gather map: p = o / scale + center
        canonical = affine_sample(mask.astype(np.float64), np.eye(3) / scale, center)
        parts[label - 1] = canonical
        present[label - 1] = True
        transforms[label - 1] = AffineParams(scale * np.eye(3), -scale * center)
    return PartSet(parts, present, transforms, lg.schema)


# ---------------------------------------------------------------------------
# metrics

_SIX = ndimage.generate_binary_structure(3, 1)


def connected_components(grid):
    """Number of 6-connected components of occupied voxels."""
    _, count = ndimage.label(grid.data, structure=_SIX)
    return int(count)


def symmetry_score(grid):
    """Fraction of voxels matching their mirror across the x = center plane."""
    return float(np.mean(grid.data == grid.data[::-1]))


def miou(a, b, per_part=False):
    """Mean per-label IoU over labels present in either grid.

    With per_part=True returns the K-vector of per-label IoUs (NaN where a
    label is absent from both grids). Two grids with no labels at all are
    identical, so the mean is defined as 1.0.
    """
    if a.resolution != b.resolution or a.schema != b.schema:
        raise ValueError("grids must share resolution and schema")
    ious = np.full(a.schema.K, np.nan)
    for label in range(1, a.schema.K + 1):
        ma, mb = a.part_mask(label), b.part_mask(label)
        union = np.count_nonzero(ma | mb)
        if union:
            ious[label - 1] = np.count_nonzero(ma & mb) / union
    if per_part:
        return ious
    present = ~np.isnan(ious)
    return float(ious[present].mean()) if present.any() else 1.0


def binary_iou(a, b):
    """Plain IoU of two boolean masks; empty vs empty counts as 1."""
    union = np.count_nonzero(a | b)
    return float(np.count_nonzero(a & b) / union) if union else 1.0


# ---------------------------------------------------------------------------
# OBJ mesh export

_FACE_CORNERS = {
    # direction -> four cube corners, counter-clockwise seen from outside
    (-1, 0, 0): ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
    (1, 0, 0): ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
    (0, -1, 0): ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
    (0, 1, 0): ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
    (0, 0, -1): ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
    (0, 0, 1): ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
}

_PALETTE = [
    (0.85, 0.33, 0.31),
    (0.35, 0.55, 0.85),
    (0.42, 0.72, 0.38),
    (0.93, 0.70, 0.25),
    (0.62, 0.45, 0.78),
    (0.45, 0.75, 0.75),
]


def mesh_faces(lg):
    """Per-label boundary quads: {label: [((x,y,z)*4 corner coords)]}.

    A face is emitted where a voxel's neighbor is empty, differently
    labeled, or outside the grid, so faces between same-label neighbors
    are culled from both sides.
    """
    r = lg.resolution
    faces = {}
    occ = lg.labels
    for label in range(1, lg.schema.K + 1):
        quads = []
        for x, y, z in np.argwhere(occ == label):
            for direction, corners in _FACE_CORNERS.items():
                nx, ny, nz = x + direction[0], y + direction[1], z + direction[2]
                if 0 <= nx < r and 0 <= ny < r and 0 <= nz < r and occ[nx, ny, nz] == label:
                    continue
                quads.append(tuple((x + c[0], y + c[1], z + c[2]) for c in corners))
        if quads:
            faces[label] = quads
    return faces


def export_obj(lg, path):
    """Write a voxel surface mesh with one `g part_<name>` group per label."""
    faces = mesh_faces(lg)
    verts = sorted({v for quads in faces.values() for q in quads for v in q})
    index = {v: i + 1 for i, v in enumerate(verts)}

    path = str(path)
    mtl_path = path[: -len(".obj")] + ".mtl" if path.endswith(".obj") else path + ".mtl"
    mtl_name = mtl_path.rsplit("/", 1)[-1]
    lines = [f"mtllib {mtl_name}"]
    lines += [f"v {v[0]} {v[1]} {v[2]}" for v in verts]
    mtl_lines = []
    for label in sorted(faces):
        name = lg.schema.names[label - 1]
        lines.append(f"g part_{name}")
        lines.append(f"usemtl part_{name}")
        lines += [
            "f " + " ".join(str(index[v]) for v in quad) for quad in faces[label]
        ]
        red, green, blue = _PALETTE[(label - 1) % len(_PALETTE)]
        mtl_lines += [f"newmtl part_{name}", f"Kd {red} {green} {blue}", ""]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(mtl_path, "w") as fh:
        fh.write("\n".join(mtl_lines))
