"""Command line entry point: ``bhaug <command> ...``.

Every command logs its full configuration and seed, writes tab-separated
results to stdout (and to files under ``--out`` where it has one) and renders
figures next to them.  The seed comes from ``--seed``, else the ``BHAUG_SEED``
environment variable, else the config file, else 0.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import advtune, coefnet, pipeline, plots
from .config import dump_config, load_config
from .data import (export_triplet, load_dataset, load_model, save_dataset, save_model,
                   synth_dataset)
from .errors import ParseError
from .losses import chamfer, symmetry_loss
from .nn import checksum
from .prototypenet import PrototypeConfig

log = logging.getLogger("bhaug")
run_log = logging.getLogger("bhaug.run")  # seed and config, always emitted

OFFSET_SIGMAS = (0.01, 0.02, 0.05, 0.1, 0.2)
COEF_SIGMAS = (0.1, 0.2, 0.3, 0.5, 0.7, 1.0)


def _floats(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _corruption(text):
    if text == "grid":
        return text
    try:
        return advtune.parse_corruption(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                        help="flat key = value file (TrainConfig keys, proto.* for PrototypeNet)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="bhaug", description="Biharmonic point cloud augmentation", parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset container")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--split", default="train")

    p = sub.add_parser("prep", parents=[common], help="biharmonic coordinates for every sample")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--controls", type=int, default=32)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--mass", choices=("unit", "degree"), default="unit")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train-prototypes", parents=[common], help="learn per-sample deformation prototypes")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--artifacts", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="where to store PrototypeNet weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--targets", type=int)
    p.add_argument("--m", type=int)

    p = sub.add_parser("augment", parents=[common], help="export original / recovered / deformed triplets")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--artifacts", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=advtune.AUGMENT_MODES, default="guided")
    p.add_argument("--sigma", type=float, help="sigma_a (coefficients) or offset sigma")
    p.add_argument("--checkpoint", type=Path, help="container holding a trained CoefNet (entry 'phi')")
    p.add_argument("--ids", help="comma-separated sample ids")
    p.add_argument("--count", type=int, default=3, help="number of samples when --ids is not given")
    p.add_argument("--format", choices=("ply", "csv"), default="ply")

    p = sub.add_parser("advtune", parents=[common], help="run the adversarial training schedule")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--test", type=Path)
    p.add_argument("--artifacts", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="test accuracy, optionally under corruptions")
    p.add_argument("--checkpoint", type=Path, required=True, help="container with a classifier entry")
    p.add_argument("--name", default="theta")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--corrupt", type=_corruption, action="append", default=[],
                   help="kind:level (jitter, dropout, scale); repeatable; 'grid' for the full grid")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("ablate", parents=[common], help="ablation sweeps")
    p.add_argument("study", choices=("offsets", "coefficients", "direct", "regularizers", "finetune"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--artifacts", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sigmas", type=_floats)
    return ap


def _settings(args):
    """(seed, TrainConfig, PrototypeConfig) after config file, env and flags."""
    train, proto = advtune.TrainConfig(), PrototypeConfig()
    seed = 0
    if getattr(args, "config", None):
        train, proto = load_config(args.config)
        seed = train.seed
    env = os.environ.get("BHAUG_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ValueError(f"BHAUG_SEED must be an integer, got {env!r}") from None
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    return seed, replace(train, seed=seed), replace(proto, seed=seed)


def _log_config(command, seed, train, proto, extra):
    run_log.info("command=%s seed=%d", command, seed)
    run_log.info("args %s", " ".join(f"{k}={v}" for k, v in sorted(extra.items())))
    run_log.info("config %s", " ".join(line.replace(" = ", "=") for line in dump_config(train, proto).splitlines()))


def _emit(rows, header, out_file=None):
    text = "\t".join(header) + "\n" + "".join("\t".join(str(v) for v in r) + "\n" for r in rows)
    sys.stdout.write(text)
    if out_file is not None:
        out_file.parent.mkdir(parents=True, exist_ok=True)
        out_file.write_text(text)
    return text


def _attach_labels(artifacts, dataset):
    labels = {c.id: c.label for c in dataset}
    for sid, art in artifacts.items():
        if art.label is None:
            art.label = labels.get(sid)
    return artifacts


# --- commands ----------------------------------------------------------------


def cmd_synth(args, seed, train, proto):
    ds = synth_dataset(args.classes, args.per_class, args.points, seed=seed, split=args.split)
    save_dataset(ds, args.out)
    counts = np.bincount(ds.labels, minlength=len(ds.classes))
    _emit([(name, int(n)) for name, n in zip(ds.classes, counts)], ("class", "samples"))


def cmd_prep(args, seed, train, proto):
    ds = load_dataset(args.data)
    arts = pipeline.prepare(ds, args.controls, args.k, args.mass, seed, args.workers)
    box = pipeline.write_artifacts(args.out, arts)
    box.commit([], {"controls": args.controls, "k": args.k, "mass": args.mass, "seed": seed})
    rows = []
    for sid, art in arts.items():
        # partition of unity and interpolation at the controls, as sanity columns
        pou = np.abs(art.W.sum(axis=1) - 1.0).max()
        interp = np.abs(art.W[art.indices] - np.eye(len(art.indices))).max()
        rows.append((sid, art.W.shape[0], len(art.indices), f"{pou:.3e}", f"{interp:.3e}"))
    _emit(rows, ("id", "points", "controls", "pou_error", "interp_error"), args.out.with_name(args.out.name + ".tsv"))


def cmd_train_prototypes(args, seed, train, proto):
    upd = {k: getattr(args, k) for k in ("epochs", "targets", "m") if getattr(args, k) is not None}
    proto = replace(proto, **upd)
    ds = load_dataset(args.data)
    arts = _attach_labels(pipeline.read_artifacts(args.artifacts), ds)
    params, history = pipeline.learn_prototypes(ds, arts, proto, log_every=10)
    pipeline.write_artifacts(args.artifacts, arts)
    ckpt = args.checkpoint or args.artifacts.with_name(args.artifacts.name + "-prototypenet")
    save_model(ckpt, "prototypenet", params, {"seed": seed})
    rows = [(h["epoch"], h["step"], repr(h["loss"]), repr(h["fit"]), repr(h["sym"]), repr(h["ortho"]),
             repr(h["sparse"])) for h in history]
    _emit(rows, ("epoch", "step", "loss", "fit", "sym", "ortho", "sparse"),
          args.artifacts.with_name(args.artifacts.name + "-prototypes.tsv"))


def _load_phi(path, seed):
    if path is None:
        log.warning("no CoefNet checkpoint given; using an untrained network")
        return coefnet.init_coefnet(advtune.rng_streams(seed)[1])
    return load_model(path, "phi")


def cmd_augment(args, seed, train, proto):
    ds = load_dataset(args.data)
    by_id = ds.by_id()
    ids = args.ids.split(",") if args.ids else [c.id for c in ds][: args.count]
    arts = _attach_labels(pipeline.read_artifacts(args.artifacts, ids), ds)
    rng = np.random.default_rng(seed)
    if args.mode == "guided":
        phi = _load_phi(args.checkpoint, seed)
        cfg = replace(train.coef, sigma_a=args.sigma if args.sigma is not None else train.sigma_a)
    rows = []
    for sid in ids:
        art = arts[sid]
        if args.mode == "guided":
            deformed = coefnet.biharmonic_augment(phi, cfg, art, rng)
        elif args.mode == "random-coef":
            deformed = coefnet.random_coefficient_augment(art, args.sigma if args.sigma is not None else train.sigma_a,
                                                          rng, train.mu_a)
        else:
            deformed = coefnet.random_offset_augment(art, args.sigma if args.sigma is not None else train.sigma_offset,
                                                     rng)
        rec = coefnet.recovered(art)
        export_triplet(args.out, sid, by_id[sid], rec, deformed, args.format)
        plots.cloud_triplet(by_id[sid], rec, deformed, args.out / sid / "triplet.png", f"{sid} ({args.mode})")
        rows.append((sid, args.mode, repr(chamfer(deformed.points, rec.points)),
                     repr(symmetry_loss(deformed.points, train.v))))
    _emit(rows, ("id", "mode", "r_cd", "r_sym"), args.out / "augment.tsv")


def _train(train, ds_path, test_path, art_path):
    ds = load_dataset(ds_path)
    test = load_dataset(test_path) if test_path else None
    arts = {}
    if train.outer > 0 and train.inner > 0:
        arts = _attach_labels(pipeline.read_artifacts(art_path), ds)
    return advtune.advtune_train(ds, arts, train, test=test)


def cmd_advtune(args, seed, train, proto):
    theta, phi, report = _train(train, args.data, args.test, args.artifacts)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv())
    (out / "summary.txt").write_text(report.summary())
    (out / "timing.tsv").write_text(report.timing_tsv())
    (out / "config.txt").write_text(dump_config(train))
    save_model(out / "checkpoints", "theta", theta, {"seed": seed})
    save_model(out / "checkpoints", "phi", phi, {"seed": seed})
    plots.training_curves(report.records, out / "training.png", f"AdvTune seed {seed}")
    sys.stdout.write(report.to_tsv())
    log.info("theta %s phi %s final_test_acc %s", checksum(theta)[:12], checksum(phi)[:12], report.final_test_acc)


def cmd_eval(args, seed, train, proto):
    theta = load_model(args.checkpoint, args.name)
    ds = load_dataset(args.data)
    grid = []
    for c in args.corrupt:
        grid.extend(advtune.CORRUPTION_GRID if c == "grid" else [c])
    rows = [("none", "-", repr(advtune.evaluate(theta, ds)))]
    rows += [(k, repr(lv), repr(acc)) for k, lv, acc in advtune.evaluate_corrupted(theta, ds, grid, seed)]
    out_file = args.out / "eval.tsv" if args.out else None
    _emit(rows, ("corruption", "level", "accuracy"), out_file)
    if args.out:
        plots.accuracy_bars([r[0] if r[1] == "-" else f"{r[0]} {r[1]}" for r in rows],
                            [float(r[2]) for r in rows], args.out / "eval.png", "accuracy under corruption")


def _ablation_variants(study, train, sigmas):
    """[(row label, column label, TrainConfig)]"""
    if study == "offsets":
        return [("random offsets", f"{s:g}", replace(train, augment="random-offset", sigma_offset=s))
                for s in sigmas or OFFSET_SIGMAS]
    if study == "coefficients":
        out = []
        for row, mode in (("random coefficients", "random-coef"), ("guided", "guided")):
            out += [(row, f"{s:g}", replace(train, augment=mode, sigma_a=s)) for s in sigmas or COEF_SIGMAS]
        return out
    if study == "direct":
        return [("direct coefficient", "accuracy", replace(train, direct=True)),
                ("coefficient offset", "accuracy", replace(train, direct=False))]
    if study == "regularizers":
        return [(f"sym={int(bool(ls))} cd={int(bool(lc))}", "accuracy",
                 replace(train, lambda_sym=ls, lambda_cd=lc))
                for ls, lc in ((0.0, 0.0), (train.lambda_sym, 0.0), (0.0, train.lambda_cd),
                               (train.lambda_sym, train.lambda_cd))]
    if study == "finetune":
        return [("w/o DF+FF", "accuracy", replace(train, distribution_tuning=False, final=0)),
                ("FF w/o DF", "accuracy", replace(train, distribution_tuning=False)),
                ("DF w/o FF", "accuracy", replace(train, final=0)),
                ("DF + FF", "accuracy", train)]
    raise ValueError(study)


def cmd_ablate(args, seed, train, proto):
    variants = _ablation_variants(args.study, train, args.sigmas)
    results = {}
    for row, col, cfg in variants:
        log.info("ablate %s: %s / %s", args.study, row, col)
        _, _, report = _train(cfg, args.data, args.test, args.artifacts)
        results.setdefault(row, {})[col] = report.final_test_acc
    cols = list(dict.fromkeys(col for _, col, _ in variants))
    rows = [(row, *(repr(results[row].get(c)) for c in cols)) for row in results]
    _emit(rows, (args.study, *cols), args.out / f"ablate-{args.study}.tsv")
    if cols == ["accuracy"]:
        plots.accuracy_bars(list(results), [results[r]["accuracy"] for r in results],
                            args.out / f"ablate-{args.study}.png", args.study)
    else:
        series = {row: [(float(c), results[row][c]) for c in cols] for row in results}
        plots.sweep_lines(series, args.out / f"ablate-{args.study}.png", title=args.study)


COMMANDS = {
    "synth": cmd_synth, "prep": cmd_prep, "train-prototypes": cmd_train_prototypes,
    "augment": cmd_augment, "advtune": cmd_advtune, "eval": cmd_eval, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    run_log.setLevel(logging.INFO)
    try:
        seed, train, proto = _settings(args)
    except (ParseError, ValueError) as exc:
        parser.error(str(exc))
    extra = {k: v for k, v in vars(args).items() if k not in ("command", "seed", "config", "verbose")}
    _log_config(args.command, seed, train, proto, extra)
    COMMANDS[args.command](args, seed, train, proto)
    return 0


if __name__ == "__main__":
    sys.exit(main())
