"""Command-line front end for the detection pipeline.

Subcommands: mask | synth | train | score | eval | report. All randomness
funnels through explicit --seed flags; identical inputs and seeds produce
byte-identical outputs (timestamps only appear in the training history
CSV, which is not part of the reproducibility contract).

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, flow as flowmod, sampling, scoring, trainer
from .numerics import make_rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(ValueError):
    pass


def _parse_dims(text: str):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3 or min(parts) <= 0:
        raise argparse.ArgumentTypeError("dims must be H,W,L with positive integers")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actdetect", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="draw a blue-noise sampling key")
    p.add_argument("--dims", type=_parse_dims, required=True, help="volume dims H,W,L")
    p.add_argument("--min-dist", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--k-attempts", type=int, default=30)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("synth", help="generate a synthetic activation dataset")
    p.add_argument("--dims", type=_parse_dims, required=True)
    p.add_argument("--n-regular", type=int, default=300)
    p.add_argument("--n-anomalous", type=int, default=100)
    p.add_argument("--shift", type=float, default=3.0)
    p.add_argument("--corr", type=float, default=0.5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--holdout", type=float, default=0.25, help="clean fraction held out as test negatives")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = sub.add_parser("train", help="train the flow on the manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--coupling", choices=flowmod.COUPLINGS, default="affine")
    p.add_argument("--mixing", choices=flowmod.MIXINGS, default="random_permutation")
    p.add_argument("--subnet", choices=flowmod.SUBNETS, default="linear")
    p.add_argument("--hidden-width", type=int, default=64)
    p.add_argument("--clamp", type=float, default=0.5)
    p.add_argument("--history", help="per-epoch history CSV path")
    p.add_argument("-o", "--output", required=True, help="model file path")

    p = sub.add_parser("score", help="score every record with all heads")
    p.add_argument("--manifest", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--hbos-k", type=int, default=30)
    p.add_argument("-o", "--output", required=True, help="scores CSV path")

    p = sub.add_parser("eval", help="ranking metrics per perturbation from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--head", choices=scoring.HEADS, default="hbos")
    p.add_argument("--fpr-budget", type=float, default=0.05)
    p.add_argument("-o", "--output", required=True, help="report JSON path")

    p = sub.add_parser("report", help="render a report JSON as an aligned table")
    p.add_argument("--report", required=True)
    return parser


def _load_features(manifest: dataio.Manifest, base: Path, key: sampling.SamplingKey, split=None):
    """Feature matrix plus (input_id, perturbation) rows, ordered by id."""
    entries = sorted(manifest.entries(split=split), key=lambda e: (e.input_id, e.perturbation))
    rows, feats = [], []
    for entry in entries:
        record = dataio.read_record(base / entry.path)
        volume = sampling.assemble_volume(record, manifest.volume_dims[:2], manifest.layer_selection)
        if volume.shape != tuple(manifest.volume_dims):
            raise dataio.SchemaMismatchError(
                f"record {entry.input_id} assembles to {volume.shape}, manifest says {manifest.volume_dims}"
            )
        feats.append(sampling.extract_features(volume, key, input_id=entry.input_id).values)
        rows.append(entry)
    return np.asarray(feats), rows


def cmd_mask(args) -> int:
    key = sampling.bridson_sample(args.dims, args.min_dist, args.seed, args.k_attempts)
    sampling.save_key(key, args.output)
    print(f"wrote {key.n_samples}-point key (r={args.min_dist}) to {args.output}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(args.seed)
    records, _ = dataio.synth_generate(rng, args.n_regular, args.n_anomalous, args.dims, args.shift, args.corr)
    paths = [f"{r.input_id}_{r.perturbation}.daac" for r in records]
    for record, path in zip(records, paths):
        dataio.write_record(record, out / path)
    manifest = dataio.build_manifest(
        records, f"clean_holdout:{args.holdout}", (args.dims[0], args.dims[1], args.dims[2]), paths=paths
    )
    dataio.save_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(records)} records and manifest to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    base = dataio.manifest_dir(args.manifest)
    for entry in manifest.entries(split=dataio.TRAIN):
        if entry.perturbation != dataio.CLEAN:
            raise DataError(f"train split contains perturbed record {entry.input_id} ({entry.perturbation})")
    key = sampling.load_key(args.key)

    cfg_doc = {}
    if args.config:
        with open(args.config) as f:
            cfg_doc = json.load(f)
    overrides = {
        "seed": args.seed,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "early_stop_patience": args.patience,
        "max_epochs": args.max_epochs,
    }
    cfg_doc.update({k: v for k, v in overrides.items() if v is not None})
    config = trainer.TrainConfig.from_dict(cfg_doc)

    spec = flowmod.FlowSpec(
        dim=key.n_samples,
        n_blocks=args.blocks,
        coupling=args.coupling,
        mixing=args.mixing,
        subnet=args.subnet,
        hidden_width=args.hidden_width,
        clamp=args.clamp,
    )
    features, _ = _load_features(manifest, base, key, split=dataio.TRAIN)
    params, history = trainer.train(features, config, spec)
    params.key_id = key.key_id
    flowmod.save_flow(params, args.output)
    if args.history:
        history.write_csv(args.history)
    best = history.epochs[history.best_epoch]
    print(f"trained {len(history.epochs)} epochs; best val NLL {best.val_nll:.4f} at epoch {best.epoch}")
    return EXIT_OK


def cmd_score(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    base = dataio.manifest_dir(args.manifest)
    key = sampling.load_key(args.key)
    params = flowmod.load_flow(args.model)
    if params.key_id and params.key_id != key.key_id:
        raise DataError(f"model was trained with key {params.key_id}, got {key.key_id}")

    train_feats, _ = _load_features(manifest, base, key, split=dataio.TRAIN)
    train_latents, _ = flowmod.forward_batch(params, train_feats)
    maha = scoring.fit_mahalanobis(train_latents)
    hbos = scoring.fit_hbos(train_latents, k=args.hbos_k)

    test_feats, rows = _load_features(manifest, base, key, split=dataio.TEST)
    latents, _ = flowmod.forward_batch(params, test_feats)

    with open(args.output, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["input_id", "perturbation", "tau_euclidean", "tau_harmonic", "tau_mahalanobis", "tau_hbos"])
        for entry, z in zip(rows, latents):
            writer.writerow(
                [
                    entry.input_id,
                    entry.perturbation,
                    f"{scoring.tau_euclidean(z):.8g}",
                    f"{scoring.tau_harmonic(z):.8g}",
                    f"{scoring.tau_mahalanobis(maha, z):.8g}",
                    f"{scoring.tau_hbos(hbos, z):.8g}",
                ]
            )
    print(f"scored {len(rows)} test records to {args.output}")
    return EXIT_OK


def _read_scores(path, head: str):
    col = f"tau_{head}"
    by_pert: dict[str, list[float]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            if col not in row:
                raise DataError(f"scores file missing column {col}")
            by_pert.setdefault(row["perturbation"], []).append(float(row[col]))
    return by_pert


def cmd_eval(args) -> int:
    by_pert = _read_scores(args.scores, args.head)
    clean = by_pert.pop(dataio.CLEAN, None)
    if not clean:
        raise DataError("scores file has no clean test records to use as negatives")
    report = evaluation.EvalReport(metadata={"head": args.head, "fpr_budget": args.fpr_budget})
    report.metadata["theta"] = scoring.choose_threshold(clean, args.fpr_budget)
    for pert in sorted(by_pert):
        report.per_perturbation[pert] = evaluation.evaluate_perturbation(clean, by_pert[pert])
    with open(args.output, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    print(f"evaluated {len(report.per_perturbation)} perturbations to {args.output}")
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.report, encoding="utf-8") as f:
        report = evaluation.EvalReport.from_json(f.read())
    sys.stdout.write(report.render_table())
    return EXIT_OK


_COMMANDS = {
    "mask": cmd_mask,
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except (trainer.DivergenceError, flowmod.NumericalOverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        DataError,
        dataio.FormatError,
        dataio.CorruptRecordError,
        dataio.SchemaMismatchError,
        sampling.SelectionError,
        FileNotFoundError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())
