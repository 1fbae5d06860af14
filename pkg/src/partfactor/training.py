"""Composite loss, cycle-consistency mixing, and the staged training loop.

Training runs three stages: (A) encoder, projections, and part decoder
under the part-reconstruction and partition-of-identity losses; (B) the
localization net alone under direct transform supervision; (C) everything
jointly, adding the cycle-consistency loss, where part embeddings are
randomly mixed across the batch, composed, re-decomposed, de-mixed, and
recomposed, and the result must reproduce the original shapes.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import composer as cp
from .model import DecomposerComposer
from .decomposer import pi_loss
from .voxel import extract_parts, miou

LOG_HEADER = "epoch,stage,L_PI,L_part,L_trans,L_cycle,total,val_mIoU"


@dataclass
class LossWeights:
    w_pi: float = 0.1
    w_part: float = 100.0
    w_trans: float = 0.1
    w_cycle: float = 0.1

    def __post_init__(self):
        if min(self.w_pi, self.w_part, self.w_trans, self.w_cycle) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    stage_epochs: tuple = (50, 20, 30)
    batch_size: int = 16
    lr: float = 2e-3
    lr_decay: float = 0.8
    lr_decay_every: int = 40
    seed: int = 0
    fixed_projection: bool = False
    no_stn: bool = False
    no_cycle: bool = False
    resolution: int = 0  # 0 means: take from the dataset
    embed_dim: int = 128
    proj_lr_scale: float = 0.003  # projections move slower, staying near a partition
    stage_lr_scale: tuple = (1.0, 1.0, 0.1)  # stage C resumes as a fine-tune
    init_from: str = ""  # optional checkpoint to warm-start from
    weights: LossWeights = field(default_factory=LossWeights)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(f"{message}; last good checkpoint at {checkpoint}")
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# loss terms


def part_loss(pred_canonicals, target_canonicals):
    """BCE summed over parts and voxels, averaged over the batch.

    pred_canonicals: per shape, a list of K decoded volumes (DiffValues);
    target_canonicals: per shape, a (K, R, R, R) indicator array. Absent
    parts carry all-zero targets and still contribute.
    """
    m = len(pred_canonicals)
    total = None
    for preds, targets in zip(pred_canonicals, target_canonicals):
        for k, vol in enumerate(preds):
            term = ad.bce(vol, targets[k])
            total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / m)


def trans_loss(pred_thetas, gt_thetas, present_masks):
    """Squared L2 between predicted and true 12-vectors, summed over present
    parts, averaged over the batch; absent parts are masked out."""
    m = len(pred_thetas)
    total = ad.DiffValue(0.0)
    for preds, gts, present in zip(pred_thetas, gt_thetas, present_masks):
        for k, theta in enumerate(preds):
            if present[k]:
                total = ad.add(total, ad.l2(theta, gts[k]))
    return ad.scale(total, 1.0 / m)


def total_loss(terms, weights):
    """Weighted sum of the four loss terms; None terms are dropped."""
    pairs = [
        (terms.get("pi"), weights.w_pi),
        (terms.get("part"), weights.w_part),
        (terms.get("trans"), weights.w_trans),
        (terms.get("cycle"), weights.w_cycle),
    ]
    out = ad.DiffValue(0.0)
    for term, w in pairs:
        if term is not None:
            out = ad.add(out, ad.scale(term, w))
    return out


# ---------------------------------------------------------------------------
# cycle machinery


def cycle_mix(codes_batch, rng):
    """Permute part codes across the batch, one permutation per part.

    Returns (mixed, perms) where mixed[j][k] = codes[perms[k][j]][k]; every
    mixed set holds exactly one code per part index.
    """
    m = len(codes_batch)
    if m < 2:
        raise ValueError("cycle mixing needs a batch of at least 2 shapes")
    k = len(codes_batch[0])
    perms = [rng.permutation(m) for _ in range(k)]
    mixed = [[codes_batch[perms[kk][j]][kk] for kk in range(k)] for j in range(m)]
    return mixed, perms


def cycle_demix(codes_batch, perms):
    """Inverse of cycle_mix: restore the original code-to-shape association."""
    m = len(codes_batch)
    inv = []
    for p in perms:
        ip = np.empty_like(p)
        ip[p] = np.arange(m)
        inv.append(ip)
    k = len(perms)
    return [[codes_batch[inv[kk][i]][kk] for kk in range(k)] for i in range(m)]


def _stn_occupancy(model, codes, canonicals=None):
    """Soft occupancy (max over placed parts) for the full pipeline."""
    if canonicals is None:
        canonicals = [cp.decode_part(c, model.part_decoder) for c in codes]
    e_sum = codes[0]
    for c in codes[1:]:
        e_sum = ad.add(e_sum, c)
    thetas = cp.localize(canonicals, e_sum, model.localizer)
    placed = [ad.grid_sample3(c, t) for c, t in zip(canonicals, thetas)]
    occ = placed[0]
    for p in placed[1:]:
        occ = ad.vmax(occ, p)
    return occ, thetas


def _mono_occupancy(model, codes):
    """Soft occupancy (1 - empty-channel probability) for the ablation."""
    e_sum = codes[0]
    for c in codes[1:]:
        e_sum = ad.add(e_sum, c)
    logits = model.mono.forward(e_sum)
    p_empty = ad.slice0(ad.softmax(logits, axis=0), 0)
    ones = ad.DiffValue(np.ones(p_empty.shape))
    return ad.sub(ones, p_empty)


def _soft_occupancy(model, codes, canonicals=None):
    if model.monolithic:
        return _mono_occupancy(model, codes)
    return _stn_occupancy(model, codes, canonicals)[0]


def cycle_loss(occ_batch, model, rng, codes=None, canonicals=None, tau=0.5):
    """Two passes through the network with mixing and de-mixing.

    Decompose -> mix -> Compose -> binarize (straight-through) ->
    Decompose -> demix -> Compose; BCE between the final soft occupancies
    and the original binary grids, averaged over the batch. Precomputed
    codes/canonicals from the reconstruction pass may be shared in.
    """
    if codes is None:
        codes = [model.embed_parts(occ) for occ in occ_batch]
    mixed, perms = cycle_mix(codes, rng)
    m = len(codes)
    total = None
    second_codes = []
    for j in range(m):
        mixed_canon = None
        if canonicals is not None and not model.monolithic:
            mixed_canon = [canonicals[perms[kk][j]][kk] for kk in range(len(perms))]
        occ1 = _soft_occupancy(model, mixed[j], mixed_canon)
        hard = ad.st_binarize(occ1, tau)
        second_codes.append(model.embed_parts(hard))
    demixed = cycle_demix(second_codes, perms)
    for i in range(m):
        occ2 = _soft_occupancy(model, demixed[i])
        term = ad.bce(occ2, occ_batch[i])
        total = term if total is None else ad.add(total, term)
    # per-voxel mean keeps this term commensurate with the transform loss
    voxels = occ_batch[0].size
    return ad.scale(total, 1.0 / (m * voxels)), perms


# ---------------------------------------------------------------------------
# dataset preparation


def prepare_shape(lg):
    """Everything the trainer needs for one labeled grid."""
    parts = extract_parts(lg)
    return {
        "lg": lg,
        "occ": lg.occupancy().data.astype(np.float64),
        "targets": (parts.parts >= 0.5).astype(np.float64),
        "thetas": np.stack([t.as_vector() for t in parts.transforms]),
        "present": parts.present.copy(),
    }


def prepare_split(dataset, split):
    return [prepare_shape(lg) for lg in dataset.subset(split)]


# ---------------------------------------------------------------------------
# the staged trainer


@dataclass
class TrainResult:
    model: DecomposerComposer
    log_rows: list
    checkpoints: dict
    out_dir: str


def _epoch_row(epoch, stage, sums, batches, val_miou):
    row = {
        "epoch": epoch,
        "stage": stage,
        "L_PI": sums["pi"] / batches,
        "L_part": sums["part"] / batches,
        "L_trans": sums["trans"] / batches,
        "L_cycle": sums["cycle"] / batches,
        "total": sums["total"] / batches,
        "val_mIoU": val_miou,
    }
    return row


def _format_row(row):
    return (
        f"{row['epoch']},{row['stage']},{row['L_PI']:.6g},{row['L_part']:.6g},"
        f"{row['L_trans']:.6g},{row['L_cycle']:.6g},{row['total']:.6g},{row['val_mIoU']:.4f}"
    )


def validation_miou(model, val_data):
    scores = []
    for item in val_data:
        out = model.reconstruct(item["occ"])
        scores.append(miou(item["lg"], out))
    return float(np.mean(scores)) if scores else float("nan")


def train(dataset, config, out_dir, verbose=False):
    """Run the three-stage schedule; returns checkpoints plus the epoch log.

    Stage A: part/PI losses over encoder, projections, part decoder (the
    reconstruction loss over the monolithic composer in the no-STN
    ablation). Stage B: transform loss over the localization net only,
    skipped for no-STN. Stage C: the full weighted loss, cycle included
    unless ablated. Deterministic for a fixed (dataset, config).
    """
    resolution = dataset.resolution
    if config.resolution and config.resolution != resolution:
        raise ValueError(
            f"config resolution {config.resolution} != dataset resolution {resolution}"
        )
    os.makedirs(out_dir, exist_ok=True)
    model = DecomposerComposer(
        resolution=resolution,
        schema=dataset.schema,
        n=config.embed_dim,
        seed=config.seed,
        monolithic=config.no_stn,
    )
    if config.init_from:
        start = ad.load_checkpoint(config.init_from)
        for name, value in model.params.items():
            if name in start:
                value.data = start[name].copy()
    train_data = prepare_split(dataset, "train")
    val_data = prepare_split(dataset, "val")
    weights = config.weights
    rng = np.random.default_rng([config.seed, 316])

    groups = model.param_groups()
    stage_params = {
        "A": {**groups["encoder"], **({} if config.fixed_projection else groups["proj"]),
              **(groups["mono"] if config.no_stn else groups["partdec"])},
        "B": None if config.no_stn else dict(groups["stn"]),
        "C": {k: v for k, v in model.params.items()
              if not (config.fixed_projection and k.startswith("proj."))},
    }

    log_rows = []
    checkpoints = {}
    best_val = -1.0
    last_good = {k: v.data.copy() for k, v in model.params.items()}
    global_epoch = 0
    log_path = os.path.join(out_dir, "train_log.csv")
    log_fh = open(log_path, "w")
    log_fh.write(LOG_HEADER + "\n")

    def run_stage(stage, epochs):
        nonlocal global_epoch, best_val, last_good
        if epochs <= 0 or stage_params[stage] is None:
            return
        stage_lr = config.lr * config.stage_lr_scale["ABC".index(stage)]
        opt = ad.AdamState(
            stage_params[stage], lr=stage_lr,
            decay_rate=config.lr_decay, decay_every=config.lr_decay_every,
            lr_scales={"proj.": config.proj_lr_scale},
        )
        for _ in range(epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_data))
            sums = {"pi": 0.0, "part": 0.0, "trans": 0.0, "cycle": 0.0, "total": 0.0}
            batches = 0
            for start in range(0, len(order), config.batch_size):
                batch = [train_data[i] for i in order[start : start + config.batch_size]]
                ad.zero_grads(model.params)
                try:
                    sums_update = _run_batch(model, batch, stage, config, weights, rng)
                except ad.DiffError as err:
                    _abort(model, last_good, out_dir, log_fh)
                    raise TrainingDiverged(str(err), os.path.join(out_dir, "aborted.pfck"))
                if not np.isfinite(sums_update["total"]):
                    _abort(model, last_good, out_dir, log_fh)
                    raise TrainingDiverged("non-finite loss", os.path.join(out_dir, "aborted.pfck"))
                adam_epoch = global_epoch
                ad.adam_step(stage_params[stage], opt, epoch=adam_epoch)
                for key in sums:
                    sums[key] += sums_update[key]
                batches += 1
            global_epoch += 1
            val = validation_miou(model, val_data)
            row = _epoch_row(global_epoch, stage, sums, batches, val)
            log_rows.append(row)
            log_fh.write(_format_row(row) + "\n")
            log_fh.flush()
            if verbose:
                print(f"[{time.perf_counter() - t0:5.1f}s] {_format_row(row)}")
            if val > best_val:
                best_val = val
                model.save(os.path.join(out_dir, "best.pfck"))
                checkpoints["best"] = os.path.join(out_dir, "best.pfck")
            last_good = {k: v.data.copy() for k, v in model.params.items()}
        path = os.path.join(out_dir, f"stage_{stage.lower()}.pfck")
        model.save(path)
        checkpoints[f"stage_{stage.lower()}"] = path

    try:
        run_stage("A", config.stage_epochs[0])
        run_stage("B", config.stage_epochs[1])
        run_stage("C", config.stage_epochs[2])
    finally:
        log_fh.close()
    checkpoints["final"] = checkpoints[
        "stage_c" if config.stage_epochs[2] > 0 else
        ("stage_b" if config.stage_epochs[1] > 0 and not config.no_stn else "stage_a")
    ]
    return TrainResult(model, log_rows, checkpoints, out_dir)


def _abort(model, last_good, out_dir, log_fh):
    for k, v in model.params.items():
        v.data = last_good[k].copy()
    model.save(os.path.join(out_dir, "aborted.pfck"))
    log_fh.flush()


def _run_batch(model, batch, stage, config, weights, rng):
    """Forward/backward for one batch; returns the logged loss values."""
    m = len(batch)
    sums = {"pi": 0.0, "part": 0.0, "trans": 0.0, "cycle": 0.0, "total": 0.0}

    if stage == "A":
        # per-shape graphs are independent; backward each, then the PI term
        for item in batch:
            codes = model.embed_parts(item["occ"])
            if model.monolithic:
                term = _mono_reconstruction_ce(model, codes, item["lg"].labels)
                sums["part"] += float(term.data) / m
                ad.backward(ad.scale(term, weights.w_part / m))
            else:
                preds = [cp.decode_part(c, model.part_decoder) for c in codes]
                term = part_loss([preds], [item["targets"]])
                sums["part"] += float(term.data) / m
                ad.backward(ad.scale(term, weights.w_part / m))
        if not config.fixed_projection:
            pi_total = pi_loss(model.projections)[0]
            sums["pi"] = float(pi_total.data)
            ad.backward(ad.scale(pi_total, weights.w_pi))
        else:
            sums["pi"] = float(pi_loss(model.projections)[0].data)
        sums["total"] = weights.w_pi * sums["pi"] + weights.w_part * sums["part"]
        return sums

    if stage == "B":
        for item in batch:
            codes = model.embed_parts(item["occ"])
            canon = [cp.decode_part(c, model.part_decoder).detach() for c in codes]
            e_sum = codes[0]
            for c in codes[1:]:
                e_sum = ad.add(e_sum, c)
            thetas = cp.localize(canon, e_sum.detach(), model.localizer)
            term = trans_loss([thetas], [item["thetas"]], [item["present"]])
            sums["trans"] += float(term.data) / m
            ad.backward(ad.scale(term, weights.w_trans / m))
        sums["total"] = weights.w_trans * sums["trans"]
        return sums

    # stage C: one batch-wide graph (the cycle couples shapes)
    codes_batch = [model.embed_parts(item["occ"]) for item in batch]
    terms = {}
    if model.monolithic:
        ce = None
        for codes, item in zip(codes_batch, batch):
            t = _mono_reconstruction_ce(model, codes, item["lg"].labels)
            ce = t if ce is None else ad.add(ce, t)
        terms["part"] = ad.scale(ce, 1.0 / m)
        canonicals = None
    else:
        canonicals = [
            [cp.decode_part(c, model.part_decoder) for c in codes] for codes in codes_batch
        ]
        terms["part"] = part_loss(canonicals, [item["targets"] for item in batch])
        pred_thetas = []
        for codes, canon in zip(codes_batch, canonicals):
            e_sum = codes[0]
            for c in codes[1:]:
                e_sum = ad.add(e_sum, c)
            pred_thetas.append(cp.localize(canon, e_sum, model.localizer))
        terms["trans"] = trans_loss(
            pred_thetas, [item["thetas"] for item in batch], [item["present"] for item in batch]
        )
    if not config.fixed_projection:
        terms["pi"] = pi_loss(model.projections)[0]
    else:
        sums["pi"] = float(pi_loss(model.projections)[0].data)
    if not config.no_cycle and weights.w_cycle > 0 and m >= 2:
        terms["cycle"], _ = cycle_loss(
            [item["occ"] for item in batch], model, rng, codes=codes_batch, canonicals=canonicals
        )
    total = total_loss(terms, weights)
    ad.backward(total)
    for key in ("pi", "part", "trans", "cycle"):
        if key in terms and terms[key] is not None:
            sums[key] = float(terms[key].data)
    sums["total"] = float(total.data)
    return sums


def _mono_reconstruction_ce(model, codes, labels):
    """Per-voxel multiclass cross-entropy for the monolithic composer."""
    e_sum = codes[0]
    for c in codes[1:]:
        e_sum = ad.add(e_sum, c)
    logits = model.mono.forward(e_sum)
    return ad.softmax_ce(logits, labels)
