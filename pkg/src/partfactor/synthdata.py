"""Procedural chair/table generator: a self-contained, part-labeled dataset.

Shapes are built from axis-aligned boxes and (optionally splayed) leg prisms
in normalized [-1, 1]^3 coordinates, mirrored across the x = 0 plane by
construction, and rasterized at voxel centers. Parts always overlap their
structural neighbors by more than one voxel pitch, so every shape is a
single 6-connected component. All geometry uses the chair part schema
(back, seat, leg, arm); tables are "seat" tops plus legs with back and arm
absent.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .sampling import voxel_centers
from .voxel import CHAIR_SCHEMA, LabeledGrid, load_pflg, save_pflg

FLOOR_Y = -0.92
_OVERLAP_VOXELS = 2.5  # structural overlap between touching parts, in voxels

FAMILIES = ("chair", "table")

# sampling ranges, all in normalized units
_RANGES = {
    "chair": {
        "seat_half_x": (0.50, 0.80),
        "seat_half_z": (0.45, 0.70),
        "seat_top_y": (-0.25, 0.05),
        "seat_thickness": (0.14, 0.24),
        "back_height": (0.55, 0.90),
        "back_thickness": (0.14, 0.22),
        "leg_half_width": (0.085, 0.125),
        "leg_splay": (0.05, 0.15),
        "arm_half_width": (0.080, 0.105),
        "arm_height": (0.28, 0.45),
        "arm_thickness": (0.14, 0.19),
    },
    "table": {
        "seat_half_x": (0.60, 0.90),
        "seat_half_z": (0.55, 0.85),
        "seat_top_y": (0.15, 0.50),
        "seat_thickness": (0.14, 0.22),
        "leg_half_width": (0.085, 0.130),
        "leg_splay": (0.05, 0.15),
    },
}
_THREE_LEG_PROB = {"chair": 0.15, "table": 0.10}
_SPLAYED_PROB = 0.5
_MAX_EXTENT = 0.97  # splayed leg feet stay inside this radius
_BACK_TOP_MAX = 0.95


@dataclass
class ShapeTemplate:
    """Resolution-independent parameters of one procedural shape."""

    family: str
    seat_half_x: float
    seat_half_z: float
    seat_top_y: float
    seat_thickness: float
    leg_count: int
    leg_style: str  # "straight" or "splayed"
    leg_half_width: float
    leg_splay: float
    back_height: float = 0.0
    back_thickness: float = 0.0
    has_arms: bool = False
    arm_half_width: float = 0.0
    arm_height: float = 0.0
    arm_thickness: float = 0.0

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        positive = [
            self.seat_half_x,
            self.seat_half_z,
            self.seat_thickness,
            self.leg_half_width,
        ]
        if self.family == "chair":
            positive += [self.back_height, self.back_thickness]
        if self.has_arms:
            positive += [self.arm_half_width, self.arm_height, self.arm_thickness]
        if any(p <= 0 for p in positive):
            raise ValueError("degenerate template: zero-size part")
        if self.leg_count not in (3, 4):
            raise ValueError(f"leg count must be 3 or 4, got {self.leg_count}")
        if self.leg_style not in ("straight", "splayed"):
            raise ValueError(f"unknown leg style {self.leg_style!r}")
        if self.seat_top_y - self.seat_thickness <= FLOOR_Y:
            raise ValueError("seat bottom at or below the floor leaves no legs")


def sample_template(rng, family="chair", arm_prob=0.5):
    """Draw one template from the documented ranges with the given rng."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    r = _RANGES[family]
    u = lambda key: float(rng.uniform(*r[key]))
    t = ShapeTemplate(
        family=family,
        seat_half_x=u("seat_half_x"),
        seat_half_z=u("seat_half_z"),
        seat_top_y=u("seat_top_y"),
        seat_thickness=u("seat_thickness"),
        leg_count=3 if rng.random() < _THREE_LEG_PROB[family] else 4,
        leg_style="splayed" if rng.random() < _SPLAYED_PROB else "straight",
        leg_half_width=u("leg_half_width"),
        leg_splay=u("leg_splay"),
    )
    if family == "chair":
        t.back_height = min(u("back_height"), _BACK_TOP_MAX - t.seat_top_y)
        t.back_thickness = u("back_thickness")
        if rng.random() < arm_prob:
            t.has_arms = True
            t.arm_half_width = u("arm_half_width")
            t.arm_height = u("arm_height")
            t.arm_thickness = u("arm_thickness")
    t.validate()
    return t


def _box(X, Y, Z, x0, x1, y0, y1, z0, z1):
    return (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1) & (Z >= z0) & (Z <= z1)


def _leg_mask(X, Y, Z, top_cx, top_cz, bot_cx, bot_cz, w, y0, y1):
    """Prism with square cross-section whose center lerps bottom -> top."""
    s = np.clip((Y - y0) / (y1 - y0), 0.0, 1.0)
    cx = bot_cx + (top_cx - bot_cx) * s
    cz = bot_cz + (top_cz - bot_cz) * s
    return (
        (Y >= y0)
        & (Y <= y1)
        & (np.abs(X - cx) <= w)
        & (np.abs(Z - cz) <= w)
    )


def generate_shape(template, resolution):
    """Rasterize a template to a labeled grid; deterministic per template."""
    template.validate()
    t = template
    r = resolution
    c = voxel_centers(r)
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    pitch = 2.0 / r
    overlap = _OVERLAP_VOXELS * pitch
    schema = CHAIR_SCHEMA
    labels = np.zeros((r, r, r), dtype=np.int64)

    seat_bottom = t.seat_top_y - t.seat_thickness
    sx, sz = t.seat_half_x, t.seat_half_z
    # thin features are clamped to ~2 voxels so parts survive the trilinear
    # canonicalize/reassemble round trip at coarse resolutions
    w = max(t.leg_half_width, pitch)

    # legs first; structurally later parts overwrite the overlap voxels
    leg_top = seat_bottom + overlap
    top_centers = [(sx - w, sz - w), (-(sx - w), sz - w)]
    if t.leg_count == 4:
        top_centers += [(sx - w, -(sz - w)), (-(sx - w), -(sz - w))]
    else:
        top_centers += [(0.0, -(sz - w))]
    leg = np.zeros_like(labels, dtype=bool)
    for cx, cz in top_centers:
        if t.leg_style == "splayed":
            reach = _MAX_EXTENT - w
            bot_cx = float(np.sign(cx)) * min(abs(cx) + t.leg_splay, reach)
            bot_cz = float(np.sign(cz)) * min(abs(cz) + t.leg_splay, reach)
        else:
            bot_cx, bot_cz = cx, cz
        leg |= _leg_mask(X, Y, Z, cx, cz, bot_cx, bot_cz, w, FLOOR_Y, leg_top)
    labels[leg] = schema.label_of("leg")

    if t.has_arms:
        aw = max(t.arm_half_width, pitch)
        at = max(t.arm_thickness, 2 * pitch)
        arm_y = t.seat_top_y + t.arm_height
        ax = sx - aw
        post_cz = -sz + 2 * aw
        rail_z1 = sz - t.back_thickness + overlap
        arm = np.zeros_like(labels, dtype=bool)
        for sign in (1.0, -1.0):
            arm |= _box(
                X, Y, Z, sign * ax - aw, sign * ax + aw,
                arm_y - at, arm_y, post_cz - aw, rail_z1,
            )
            arm |= _box(
                X, Y, Z, sign * ax - aw, sign * ax + aw,
                t.seat_top_y - overlap, arm_y, post_cz - aw, post_cz + aw,
            )
        labels[arm] = schema.label_of("arm")

    if t.family == "chair":
        back = _box(
            X, Y, Z, -sx, sx,
            t.seat_top_y - overlap, t.seat_top_y + t.back_height,
            sz - t.back_thickness, sz,
        )
        labels[back] = schema.label_of("back")

    seat = _box(X, Y, Z, -sx, sx, seat_bottom, t.seat_top_y, -sz, sz)
    labels[seat] = schema.label_of("seat")

    lg = LabeledGrid(labels, schema)
    expected = {"seat", "leg"}
    if t.family == "chair":
        expected.add("back")
    if t.has_arms:
        expected.add("arm")
    got = {schema.names[k - 1] for k in np.unique(labels) if k > 0}
    if got != expected:
        raise ValueError(
            f"template rasterized to parts {sorted(got)}, expected {sorted(expected)}; "
            f"resolution {r} is too coarse for these dimensions"
        )
    return lg


# ---------------------------------------------------------------------------
# dataset generation

MANIFEST_NAME = "manifest.txt"
SHAPES_DIR = "shapes"


@dataclass
class Dataset:
    shapes: list
    splits: dict
    seed: int
    resolution: int
    family: str = "chair"
    arm_prob: float = 0.5
    shape_meta: list = field(default_factory=list)  # (index, family) per shape

    @property
    def schema(self):
        return self.shapes[0].schema if self.shapes else CHAIR_SCHEMA

    def subset(self, split):
        return [self.shapes[i] for i in self.splits[split]]


def _shape_rng(seed, index):
    # per-shape stream derived from (seed, index): parallel == serial
    return np.random.default_rng([seed, index])


def generate_dataset(
    n_train, n_val, n_test, seed, resolution, family="chair", arm_prob=0.5, out_dir=None
):
    """Generate a split dataset; bit-identical for identical arguments."""
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError("split sizes must be positive")
    total = n_train + n_val + n_test
    shapes, meta = [], []
    for i in range(total):
        rng = _shape_rng(seed, i)
        fam = family
        if family == "mixed":
            fam = FAMILIES[int(rng.random() < 0.5)]
        shapes.append(generate_shape(sample_template(rng, fam, arm_prob), resolution))
        meta.append((i, fam))
    splits = {
        "train": list(range(n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, total)),
    }
    ds = Dataset(shapes, splits, seed, resolution, family, arm_prob, meta)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds, out_dir):
    os.makedirs(os.path.join(out_dir, SHAPES_DIR), exist_ok=True)
    lines = [
        "partfactor-dataset v1",
        f"seed {ds.seed}",
        f"resolution {ds.resolution}",
        f"family {ds.family}",
        f"arm_prob {ds.arm_prob}",
    ]
    for name in ("train", "val", "test"):
        lines.append(f"split {name} " + " ".join(str(i) for i in ds.splits[name]))
    for i, fam in ds.shape_meta:
        lines.append(f"shape {i:05d} entropy {ds.seed},{i} family {fam}")
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for i, lg in enumerate(ds.shapes):
        save_pflg(lg, os.path.join(out_dir, SHAPES_DIR, f"{i:05d}.pflg"))


def load_dataset(path):
    with open(os.path.join(path, MANIFEST_NAME)) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines[0] != "partfactor-dataset v1":
        raise ValueError(f"not a dataset directory: {path}")
    fields, splits, meta = {}, {}, []
    for ln in lines[1:]:
        words = ln.split()
        if words[0] == "split":
            splits[words[1]] = [int(w) for w in words[2:]]
        elif words[0] == "shape":
            meta.append((int(words[1]), words[5]))
        else:
            fields[words[0]] = words[1]
    count = sum(len(v) for v in splits.values())
    shapes = [
        load_pflg(os.path.join(path, SHAPES_DIR, f"{i:05d}.pflg")) for i in range(count)
    ]
    return Dataset(
        shapes,
        splits,
        int(fields["seed"]),
        int(fields["resolution"]),
        fields["family"],
        float(fields["arm_prob"]),
        meta,
    )
