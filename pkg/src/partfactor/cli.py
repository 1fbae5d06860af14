"""Command-line entry point exposing every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run prints
the resolved configuration including the seed, so logged invocations are
reproducible. All randomness flows from --seed.
"""

import argparse
import os
import sys

import numpy as np

from . import evaluation as ev
from . import synthdata as sd
from . import training as tr
from .decomposer import effective_rank_report
from .gradcheck import run_suite
from .model import DecomposerComposer
from .voxel import export_obj, load_pflg


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _print_config(name, values):
    printable = " ".join(f"{k}={v}" for k, v in sorted(values.items()))
    print(f"[partfactor {name}] {printable}")


def _load_config_file(path):
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"bad config line (need key = value): {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def _coerce(value, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    return type(like)(value)


def build_parser():
    parser = Parser(prog="partfactor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--res", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=("chair", "table", "mixed"), default="chair")
    p.add_argument("--arm-prob", type=float, default=0.5)

    p = sub.add_parser("train", help="run the three-stage training schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stage-epochs", default=None, help="A,B,C e.g. 50,20,30")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-decay", type=float, default=None)
    p.add_argument("--lr-decay-every", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--proj-lr-scale", type=float, default=None)
    p.add_argument("--w-pi", type=float, default=None)
    p.add_argument("--w-part", type=float, default=None)
    p.add_argument("--w-trans", type=float, default=None)
    p.add_argument("--w-cycle", type=float, default=None)
    p.add_argument("--fixed-projection", action="store_true", default=None)
    p.add_argument("--no-stn", action="store_true", default=None)
    p.add_argument("--no-cycle", action="store_true", default=None)
    p.add_argument("--quiet", action="store_true")

    for name, extra in (
        ("reconstruct", ()),
        ("swap", ("seed",)),
        ("mix", ("seed",)),
    ):
        p = sub.add_parser(name, help=f"run the {name} experiment and export samples")
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--limit", type=int, default=0, help="0 = whole split")
        p.add_argument("--threads", type=int, default=1)
        if "seed" in extra:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("interpolate", help="embedding interpolation between two shapes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shape-a", type=int, required=True)
    p.add_argument("--shape-b", type=int, required=True)
    p.add_argument("--part", default=None, help="part name for partial interpolation")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("evaluate", help="metric table over experiments")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--experiments", default="rec,swap,mix")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--export-dir", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--all", action="store_true")
    p.add_argument("--op", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("export-mesh", help="PFLG labeled grid to OBJ mesh")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("rank-report", help="effective ranks of the projection matrices")
    p.add_argument("--model", required=True)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--top", type=int, default=8, help="singular values to print")

    return parser


def _cmd_gen_data(args):
    _print_config("gen-data", {
        "out": args.out, "train": args.train, "val": args.val, "test": args.test,
        "res": args.res, "seed": args.seed, "family": args.family, "arm_prob": args.arm_prob,
    })
    sd.generate_dataset(
        args.train, args.val, args.test, seed=args.seed, resolution=args.res,
        family=args.family, arm_prob=args.arm_prob, out_dir=args.out,
    )
    print(f"dataset written to {args.out}")
    return 0


def _cmd_train(args):
    base = tr.TrainConfig()
    values = {
        "stage_epochs": ",".join(str(e) for e in base.stage_epochs),
        "batch_size": base.batch_size,
        "lr": base.lr,
        "lr_decay": base.lr_decay,
        "lr_decay_every": base.lr_decay_every,
        "seed": base.seed,
        "embed_dim": base.embed_dim,
        "proj_lr_scale": base.proj_lr_scale,
        "fixed_projection": base.fixed_projection,
        "no_stn": base.no_stn,
        "no_cycle": base.no_cycle,
        "w_pi": base.weights.w_pi,
        "w_part": base.weights.w_part,
        "w_trans": base.weights.w_trans,
        "w_cycle": base.weights.w_cycle,
    }
    if args.config:
        for key, raw in _load_config_file(args.config).items():
            if key not in values:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = _coerce(raw, values[key]) if not isinstance(values[key], str) else raw
    for key in list(values):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    stage_epochs = tuple(int(e) for e in str(values["stage_epochs"]).split(","))
    if len(stage_epochs) != 3:
        raise UsageError("--stage-epochs needs three comma-separated values")
    config = tr.TrainConfig(
        stage_epochs=stage_epochs,
        batch_size=int(values["batch_size"]),
        lr=float(values["lr"]),
        lr_decay=float(values["lr_decay"]),
        lr_decay_every=int(values["lr_decay_every"]),
        seed=int(values["seed"]),
        fixed_projection=bool(values["fixed_projection"]),
        no_stn=bool(values["no_stn"]),
        no_cycle=bool(values["no_cycle"]),
        embed_dim=int(values["embed_dim"]),
        proj_lr_scale=float(values["proj_lr_scale"]),
        weights=tr.LossWeights(
            w_pi=float(values["w_pi"]), w_part=float(values["w_part"]),
            w_trans=float(values["w_trans"]), w_cycle=float(values["w_cycle"]),
        ),
    )
    _print_config("train", {**values, "data": args.data, "out": args.out})
    dataset = sd.load_dataset(args.data)
    result = tr.train(dataset, config, args.out, verbose=not args.quiet)
    for name, path in sorted(result.checkpoints.items()):
        print(f"checkpoint {name}: {path}")
    print(f"log: {os.path.join(args.out, 'train_log.csv')}")
    return 0


def _load_model_and_shapes(args):
    model = ev.ModelAdapter(DecomposerComposer.load(args.model))
    dataset = sd.load_dataset(args.data)
    shapes = dataset.subset(args.split)
    limit = getattr(args, "limit", 0)
    if limit:
        shapes = shapes[:limit]
    return model, dataset, shapes


def _cmd_reconstruct(args):
    _print_config("reconstruct", {"model": args.model, "data": args.data,
                                  "split": args.split, "out": args.out, "threads": args.threads})
    model, _, shapes = _load_model_and_shapes(args)
    row, _ = ev.run_reconstruction(model, shapes, out_dir=args.out, threads=args.threads)
    print(ev.metrics_table([row]))
    return 0


def _cmd_swap(args):
    _print_config("swap", {"model": args.model, "data": args.data, "split": args.split,
                           "out": args.out, "seed": args.seed, "threads": args.threads})
    model, _, shapes = _load_model_and_shapes(args)
    rng = np.random.default_rng(args.seed)
    row, _ = ev.run_swap(model, shapes, rng, out_dir=args.out, threads=args.threads)
    print(ev.metrics_table([row]))
    return 0


def _cmd_mix(args):
    _print_config("mix", {"model": args.model, "data": args.data, "split": args.split,
                          "out": args.out, "seed": args.seed, "threads": args.threads})
    model, _, shapes = _load_model_and_shapes(args)
    rng = np.random.default_rng(args.seed)
    row, naive_row, _, _ = ev.run_mix(model, shapes, rng, out_dir=args.out, threads=args.threads)
    print(ev.metrics_table([row, naive_row]))
    return 0


def _cmd_interpolate(args):
    _print_config("interpolate", {
        "model": args.model, "data": args.data, "a": args.shape_a, "b": args.shape_b,
        "part": args.part, "steps": args.steps, "out": args.out,
    })
    model, dataset, shapes = _load_model_and_shapes(args)
    part = None
    if args.part is not None:
        part = dataset.schema.label_of(args.part) - 1
    seq = ev.run_interpolation(model, shapes[args.shape_a], shapes[args.shape_b],
                               part=part, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    from .voxel import save_pflg

    for i, lg in enumerate(seq):
        save_pflg(lg, os.path.join(args.out, f"interp_{i:02d}.pflg"))
        export_obj(lg, os.path.join(args.out, f"interp_{i:02d}.obj"))
    print(f"wrote {len(seq)} interpolation frames to {args.out}")
    return 0


def _cmd_evaluate(args):
    _print_config("evaluate", {
        "model": args.model, "data": args.data, "experiments": args.experiments,
        "seed": args.seed, "split": args.split, "threads": args.threads, "out": args.out,
    })
    model, dataset, shapes = _load_model_and_shapes(args)
    wanted = [e.strip() for e in args.experiments.split(",") if e.strip()]
    unknown = set(wanted) - {"rec", "swap", "mix"}
    if unknown:
        raise UsageError(f"unknown experiments: {sorted(unknown)}")
    rng = np.random.default_rng(args.seed)
    print("training plausibility classifier...")
    classifier, held_out = ev.train_classifier(dataset, rng)
    print(f"classifier held-out accuracy: {held_out:.3f}")
    rows = []
    export = args.export_dir
    for experiment in wanted:
        exp_dir = os.path.join(export, experiment) if export else None
        if experiment == "rec":
            rows.append(ev.run_reconstruction(model, shapes, classifier, exp_dir, args.threads)[0])
        elif experiment == "swap":
            rows.append(ev.run_swap(model, shapes, rng, classifier, exp_dir, args.threads)[0])
        else:
            row, naive_row, _, _ = ev.run_mix(model, shapes, rng, classifier, exp_dir, args.threads)
            rows += [row, naive_row]
    table = ev.metrics_table(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
        print(f"metrics written to {args.out}")
    print(table)
    return 0


def _cmd_gradcheck(args):
    _print_config("gradcheck", {"all": args.all, "op": args.op,
                                "seed": args.seed, "instances": args.instances})
    if not args.all and not args.op:
        raise UsageError("choose --all or --op NAME")
    ok, results = run_suite(seed=args.seed, instances=args.instances, verbose=args.all and args.op is None)
    if args.op:
        matching = [r for r in results if r[0] == args.op]
        if not matching:
            raise UsageError(f"unknown op {args.op!r}; known: {[r[0] for r in results]}")
        name, err, tol, elapsed = matching[0]
        ok = err <= tol
        print(f"{name}: max rel err {err:.3e} (tol {tol:.0e}) {'ok' if ok else 'FAIL'}")
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 2


def _cmd_export_mesh(args):
    _print_config("export-mesh", {"input": args.input, "output": args.output})
    export_obj(load_pflg(args.input), args.output)
    print(f"mesh written to {args.output}")
    return 0


def _cmd_rank_report(args):
    _print_config("rank-report", {"model": args.model, "tol": args.tol})
    model = DecomposerComposer.load(args.model)
    report = effective_rank_report(model.projections, tol=args.tol)
    print("part,effective_rank,top_singular_values")
    for name, (rank, sigma) in zip(model.schema.names, report):
        top = ";".join(f"{s:.4g}" for s in sigma[: args.top])
        print(f"{name},{rank},{top}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "reconstruct": _cmd_reconstruct,
    "swap": _cmd_swap,
    "mix": _cmd_mix,
    "interpolate": _cmd_interpolate,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
    "export-mesh": _cmd_export_mesh,
    "rank-report": _cmd_rank_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except (tr.TrainingDiverged, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
