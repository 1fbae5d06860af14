"""Experiment battery: reconstruction, part exchange, random part assembly,
embedding interpolation, the naive-placement baseline, and the learned
plausibility classifier behind the metric table.

Every experiment consumes a "model" through two methods only —
embed_parts(labeled grid) -> per-part codes, and compose_parts(codes) ->
(LabeledGrid, canonicals, transforms) — so the trained network, ablations,
and the learning-free oracle used in tests are interchangeable.
"""

import os
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import composer as cp
from .decomposer import he_init, xavier_init
from .training import cycle_mix
from .voxel import (
    binary_iou,
    connected_components,
    export_obj,
    extract_parts,
    miou,
    save_pflg,
    symmetry_score,
)

SIMILARITY_EXCLUSION_MIOU = 0.7


@dataclass
class MetricsRow:
    """One table row; mIoU columns apply to reconstruction only."""

    experiment: str
    method: str
    miou: float = float("nan")
    miou_parts: float = float("nan")
    connectivity: float = float("nan")
    classifier_accuracy: float = float("nan")
    symmetry: float = float("nan")

    def as_csv(self):
        def fmt(x):
            return "" if np.isnan(x) else f"{x:.4f}"

        return ",".join(
            [self.experiment, self.method]
            + [fmt(v) for v in (self.miou, self.miou_parts, self.connectivity,
                                self.classifier_accuracy, self.symmetry)]
        )


CSV_HEADER = "experiment,method,mIoU,mIoU_parts,connectivity,classifier_accuracy,symmetry"


class ModelAdapter:
    """Evaluation-facing view of a trained DecomposerComposer.

    The network consumes unlabeled occupancy, so embed_parts binarizes the
    ground-truth grid before encoding.
    """

    def __init__(self, model):
        self.model = model
        self.schema = model.schema

    def embed_parts(self, lg):
        return self.model.embed_parts(lg.occupancy().data.astype(np.float64))

    def compose_parts(self, codes):
        return self.model.compose_parts(codes)


class OracleModel:
    """Learning-free pipeline plumbing: codes are (canonical, transform,
    present) triples taken from ground truth; composition resamples and
    assembles them exactly like the trained composer."""

    def __init__(self, schema):
        self.schema = schema

    def embed_parts(self, lg):
        parts = extract_parts(lg)
        return [
            (parts.parts[k], parts.transforms[k], bool(parts.present[k]))
            for k in range(self.schema.K)
        ]

    def compose_parts(self, codes):
        placed = []
        canonicals = []
        transforms = []
        for canon, theta, present in codes:
            canonicals.append(canon)
            transforms.append(theta)
            if present:
                vol = ad.DiffValue(canon)
                placed.append(ad.grid_sample3(vol, ad.DiffValue(theta.as_vector())).data)
            else:
                placed.append(np.zeros_like(canon))
        return cp.assemble(placed, self.schema), canonicals, transforms


def _mean_or_nan(values):
    return float(np.mean(values)) if len(values) else float("nan")


def _output_metrics(outputs, classifier):
    conn = [1.0 if connected_components(lg.occupancy()) == 1 else 0.0 for lg in outputs]
    sym = [symmetry_score(lg.occupancy()) for lg in outputs]
    acc = float("nan")
    if classifier is not None:
        acc = classifier_accuracy(classifier, [lg.occupancy() for lg in outputs])
    return _mean_or_nan(conn), acc, _mean_or_nan(sym)


def _export_samples(outputs, out_dir, prefix, limit=8):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    for i, lg in enumerate(outputs[:limit]):
        save_pflg(lg, os.path.join(out_dir, f"{prefix}_{i:03d}.pflg"))
        export_obj(lg, os.path.join(out_dir, f"{prefix}_{i:03d}.obj"))


def _parallel_map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_reconstruction(model, shapes, classifier=None, out_dir=None, threads=1):
    """Decompose and recompose each test shape; average the metrics."""
    if not shapes:
        raise ValueError("reconstruction needs a non-empty test set")

    def one(lg):
        codes = model.embed_parts(lg)
        out, canonicals, _ = model.compose_parts(codes)
        score = miou(lg, out)
        gt_parts = extract_parts(lg)
        part_ious = []
        for k in range(lg.schema.K):
            pred = canonicals[k] >= 0.5 if len(canonicals) else np.zeros(1, dtype=bool)
            gt = gt_parts.parts[k] >= 0.5
            if pred.any() or gt.any():
                part_ious.append(binary_iou(pred, gt))
        return out, score, _mean_or_nan(part_ious)

    results = _parallel_map(one, shapes, threads)
    outputs = [r[0] for r in results]
    conn, acc, sym = _output_metrics(outputs, classifier)
    row = MetricsRow(
        "rec", "model",
        miou=_mean_or_nan([r[1] for r in results]),
        miou_parts=_mean_or_nan([r[2] for r in results]),
        connectivity=conn, classifier_accuracy=acc, symmetry=sym,
    )
    _export_samples(outputs, out_dir, "rec")
    return row, outputs


def run_swap(model, shapes, rng, classifier=None, out_dir=None, threads=1):
    """Exchange one random part embedding within random pairs and compose."""
    if len(shapes) < 2:
        raise ValueError("part exchange needs at least two shapes")
    order = rng.permutation(len(shapes))
    k = shapes[0].schema.K
    jobs = []
    for a, b in zip(order[0::2], order[1::2]):
        part = int(rng.integers(k))
        jobs.append((int(a), int(b), part))

    def one(job):
        a, b, part = job
        codes_a = model.embed_parts(shapes[a])
        codes_b = model.embed_parts(shapes[b])
        swapped_a = list(codes_a)
        swapped_b = list(codes_b)
        swapped_a[part], swapped_b[part] = codes_b[part], codes_a[part]
        return model.compose_parts(swapped_a)[0], model.compose_parts(swapped_b)[0]

    outputs = []
    for out_a, out_b in _parallel_map(one, jobs, threads):
        outputs += [out_a, out_b]
    conn, acc, sym = _output_metrics(outputs, classifier)
    row = MetricsRow("swap", "model", connectivity=conn, classifier_accuracy=acc, symmetry=sym)
    _export_samples(outputs, out_dir, "swap")
    return row, outputs


def run_mix(model, shapes, rng, classifier=None, out_dir=None, threads=1):
    """Random part assembly: mix part codes across the batch and compose.

    Also produces the naive-placement baseline row for the same donor
    assignments (donor parts copied at their original grid locations).
    """
    if len(shapes) < 2:
        raise ValueError("part mixing needs at least two shapes")
    codes = [model.embed_parts(lg) for lg in shapes]
    mixed, perms = cycle_mix(codes, rng)

    outputs = _parallel_map(lambda c: model.compose_parts(c)[0], mixed, threads)
    conn, acc, sym = _output_metrics(outputs, classifier)
    row = MetricsRow("mix", "model", connectivity=conn, classifier_accuracy=acc, symmetry=sym)

    naive_outputs = []
    for j in range(len(shapes)):
        donors = [shapes[perms[k][j]] for k in range(shapes[0].schema.K)]
        naive_outputs.append(naive_placement(donors))
    nconn, nacc, nsym = _output_metrics(naive_outputs, classifier)
    naive_row = MetricsRow(
        "mix", "naive", connectivity=nconn, classifier_accuracy=nacc, symmetry=nsym
    )
    _export_samples(outputs, out_dir, "mix")
    return row, naive_row, outputs, naive_outputs


def run_interpolation(model, shape_a, shape_b, part=None, steps=10):
    """Linear embedding interpolation; alpha = i / (steps - 1).

    Whole-shape mode interpolates every part code; partial mode moves only
    the requested part index, keeping the others fixed at shape A's codes.
    """
    if steps < 2:
        raise ValueError("need at least two interpolation steps")
    codes_a = model.embed_parts(shape_a)
    codes_b = model.embed_parts(shape_b)
    k = len(codes_a)
    if part is not None and not 0 <= part < k:
        raise ValueError(f"part index {part} out of range 0..{k - 1}")
    outputs = []
    for i in range(steps):
        alpha = i / (steps - 1)
        blend = []
        for kk in range(k):
            if part is None or kk == part:
                mixed = ad.add(
                    ad.scale(codes_a[kk], 1.0 - alpha), ad.scale(codes_b[kk], alpha)
                )
            else:
                mixed = codes_a[kk]
            blend.append(mixed)
        outputs.append(model.compose_parts(blend)[0])
    return outputs


def naive_placement(donors, parts=None):
    """Copy each donor's part voxels at their original locations.

    donors[i] contributes part label parts[i] (defaults to part i+1);
    overlaps resolve to the lowest part index.
    """
    schema = donors[0].schema
    if parts is None:
        parts = list(range(1, schema.K + 1))
    if len(donors) != len(parts):
        raise ValueError("need one donor per part")
    r = donors[0].resolution
    out = np.zeros((r, r, r), dtype=np.int64)
    for donor, label in sorted(zip(donors, parts), key=lambda dp: dp[1]):
        if donor.resolution != r or donor.schema != schema:
            raise ValueError("donors must share resolution and schema")
        mask = (donor.labels == label) & (out == 0)
        out[mask] = label
    from .voxel import LabeledGrid

    return LabeledGrid(out, schema)


# ---------------------------------------------------------------------------
# plausibility classifier


class ShapeClassifier:
    """Small conv net scoring how plausible a whole (binarized) shape is."""

    def __init__(self, resolution, seed=0):
        rng = np.random.default_rng(seed)
        self.resolution = resolution
        self.params = {}
        cin = 1
        for i, cout in enumerate((8, 16)):
            self.params[f"clf.c{i}.W"] = ad.DiffValue(he_init(rng, (cout, cin, 4, 4, 4), cin * 64))
            self.params[f"clf.c{i}.b"] = ad.DiffValue(np.zeros(cout))
            cin = cout
        spatial = resolution // 4
        self._flat = cin * spatial**3
        self.params["clf.fc1.W"] = ad.DiffValue(xavier_init(rng, (self._flat, 32), self._flat, 32))
        self.params["clf.fc1.b"] = ad.DiffValue(np.zeros(32))
        self.params["clf.fc2.W"] = ad.DiffValue(xavier_init(rng, (32, 1), 32, 1))
        self.params["clf.fc2.b"] = ad.DiffValue(np.zeros(1))

    def forward(self, occ):
        if not isinstance(occ, ad.DiffValue):
            occ = ad.DiffValue(np.asarray(occ, dtype=np.float64))
        x = ad.reshape(occ, (1, *occ.shape))
        for i in range(2):
            x = ad.relu(ad.conv3(x, self.params[f"clf.c{i}.W"], self.params[f"clf.c{i}.b"]))
        x = ad.relu(ad.dense(ad.reshape(x, (self._flat,)), self.params["clf.fc1.W"], self.params["clf.fc1.b"]))
        return ad.sigmoid(ad.dense(x, self.params["clf.fc2.W"], self.params["clf.fc2.b"]))

    def score(self, occ):
        return float(self.forward(np.asarray(occ, dtype=np.float64)).data[0])


def sample_negative(shapes, rng, max_tries=50):
    """One naive random assembly whose donors are mutually dissimilar.

    Donor tuples containing any pair with whole-shape mIoU >= 0.7 are
    rejected (they could assemble into a plausible shape).
    """
    k = shapes[0].schema.K
    for _ in range(max_tries):
        donors_idx = [int(rng.integers(len(shapes))) for _ in range(k)]
        ok = True
        for a in range(k):
            for b in range(a + 1, k):
                pair_miou = (
                    1.0
                    if donors_idx[a] == donors_idx[b]
                    else miou(shapes[donors_idx[a]], shapes[donors_idx[b]])
                )
                if pair_miou >= SIMILARITY_EXCLUSION_MIOU:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return naive_placement([shapes[i] for i in donors_idx])
    raise ValueError("could not sample enough dissimilar donor tuples")


def train_classifier(dataset, rng, epochs=12, lr=1e-3, batch_size=16):
    """Positives: ground-truth shapes; negatives: dissimilar naive
    assemblies. Returns (classifier, held-out accuracy on the test split)."""
    train_shapes = dataset.subset("train")
    test_shapes = dataset.subset("test")

    def build(shapes):
        pos = [lg.occupancy().data.astype(np.float64) for lg in shapes]
        neg = [
            sample_negative(shapes, rng).occupancy().data.astype(np.float64)
            for _ in range(len(shapes))
        ]
        x = pos + neg
        y = [1.0] * len(pos) + [0.0] * len(neg)
        return x, np.array(y)

    x_train, y_train = build(train_shapes)
    x_test, y_test = build(test_shapes)

    clf = ShapeClassifier(dataset.resolution, seed=int(rng.integers(2**31)))
    opt = ad.AdamState(clf.params, lr=lr, decay_every=10**9)
    order_rng = np.random.default_rng(rng.integers(2**31))
    for _ in range(epochs):
        order = order_rng.permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            ad.zero_grads(clf.params)
            for i in idx:
                out = clf.forward(x_train[i])
                ad.backward(ad.scale(ad.bce(out, np.array([y_train[i]])), 1.0 / len(idx)))
            ad.adam_step(clf.params, opt)
    scores = np.array([clf.score(x) for x in x_test])
    accuracy = float(((scores >= 0.5) == (y_test == 1.0)).mean())
    return clf, accuracy


def classifier_accuracy(classifier, grids):
    """Mean classifier score over binarized input shapes."""
    scores = [classifier.score(g.data.astype(np.float64)) for g in grids]
    return _mean_or_nan(scores)


# ---------------------------------------------------------------------------
# table assembly


def metrics_table(rows):
    return "\n".join([CSV_HEADER] + [r.as_csv() for r in rows]) + "\n"
