"""Command-line interface.

Thin client over the library: dataset generation, training, embedding
extraction, scoring, metric evaluation, the gradient-curve simulator, and
the orchestrated experiment runs. The output root defaults to $OSRLAB_OUT
(falling back to ./out); run commands exit nonzero when an
acceptance-relevant invariant fails, so shell pipelines can gate on them.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, nn, osr, supcon, synthdata
from .errors import OsrlabError
from .metrics import EvaluationRecord, accuracy, auroc, oscr, write_curve_csv, write_metrics_csv

SCORES_MAGIC = "# osrlab-scores v1"


def _output_root() -> Path:
    return Path(os.environ.get("OSRLAB_OUT", "out"))


# ------------------------------------------------------------- data and models

def cmd_gen_data(args) -> int:
    if args.fill == "outline":
        ds = synthdata.generate_outline_set(args.protocol, args.seed)
    else:
        ds = synthdata.generate_protocol(args.protocol, args.seed)
    out = args.out or _output_root() / "datasets" / f"{args.protocol}-{args.fill}-seed{args.seed}"
    manifest = synthdata.write_dataset(ds, out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    ds = synthdata.load_dataset(args.dataset)
    cfg = nn.TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        loss=args.loss,
        tau=args.tau,
    )
    if args.loss == "supcon":
        params = supcon.train_supcon(ds, args.tau, cfg)
    else:
        params = nn.train_classifier(ds, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    nn.save_params(args.out, params)
    print(args.out)
    return 0


def cmd_finetune(args) -> int:
    ds = synthdata.load_dataset(args.dataset)
    # finetune_frozen retargets the head if the dataset's class count differs
    params = nn.load_params(args.model)
    cfg = nn.TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed)
    tuned = nn.finetune_frozen(params, args.freeze_until, ds, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    nn.save_params(args.out, tuned)
    print(args.out)
    return 0


def cmd_embed(args) -> int:
    ds = synthdata.load_dataset(args.dataset)
    params = nn.load_params(args.model)
    if args.role == "test":
        in_img, in_lab = ds.subset("test_inlier")
        out_img, _ = ds.subset("test_outlier")
        images = np.concatenate([in_img, out_img])
        labels = np.concatenate([in_lab, np.full(len(out_img), osr.UNLABELED)])
    else:
        images, labels = ds.subset(args.role)
        if args.role == "test_outlier":
            labels = np.full(len(images), osr.UNLABELED)
    if len(images) == 0:
        raise ValueError(f"dataset has no {args.role} images")
    rep = nn.extract_representation(params, images, args.layer, labels=labels)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    osr.write_embeddings(args.out, rep)
    print(args.out)
    return 0


# ----------------------------------------------------------- scoring pipeline

def cmd_score(args) -> int:
    if len(args.train_emb) != len(args.test_emb):
        raise ValueError("need one --test-emb per --train-emb (aligned per model)")
    if args.scorer == "msp":
        raise ValueError("msp scores logits; embedding files support norm or mahalanobis")
    trains = [osr.read_embeddings(p) for p in args.train_emb]
    tests = [osr.read_embeddings(p) for p in args.test_emb]

    def scorer_for(train):
        if args.scorer == "norm":
            return osr.score_norm
        model = osr.fit_gaussian_model(train)
        return lambda batch: osr.score_mahalanobis(batch, model)

    if args.aggregation == "socsum":
        agg_scorer = [scorer_for(t) for t in trains]
    elif args.scorer == "norm":
        agg_scorer = osr.score_norm
    elif args.aggregation == "repcat":
        agg_scorer = scorer_for(osr.concat_embeddings(trains))
    else:
        mean_train = osr.EmbeddingBatch(
            matrix=np.stack([b.matrix for b in trains]).mean(axis=0),
            labels=trains[0].labels.copy(),
            provenance="repsum",
        )
        agg_scorer = scorer_for(mean_train)
    scores = osr.aggregate(tests, args.aggregation, agg_scorer).scores
    preds = osr.knn_classify(trains, osr.concat_embeddings(tests).matrix, k=args.knn_k)
    labels = tests[0].labels

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(SCORES_MAGIC + "\n")
        fh.write("label,predicted,score\n")
        for lab, pred, score in zip(labels, preds, scores):
            pred_cell = "" if lab == osr.UNLABELED else str(int(pred))
            fh.write(f"{int(lab)},{pred_cell},{float(score)!r}\n")
    print(args.out)
    return 0


def _read_scores(path) -> tuple[np.ndarray, list[int | None], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != SCORES_MAGIC:
        raise ValueError(f"{path}: not a score file (missing '{SCORES_MAGIC}' header)")
    if len(lines) < 2 or lines[1].strip() != "label,predicted,score":
        raise ValueError(f"{path}: malformed score header row")
    labels, preds, scores = [], [], []
    for lineno, line in enumerate(lines[2:], 3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected label,predicted,score")
        labels.append(int(parts[0]))
        preds.append(int(parts[1]) if parts[1].strip() else None)
        scores.append(float(parts[2]))
    if not labels:
        raise ValueError(f"{path}: no score rows")
    return np.array(labels), preds, np.array(scores)


def cmd_eval(args) -> int:
    labels, preds, scores = _read_scores(args.scores)
    inlier = labels != osr.UNLABELED
    if not inlier.any() or inlier.all():
        raise ValueError("need both inlier rows (label >= 0) and outlier rows (label -1)")
    metrics = {"auroc": auroc(scores[inlier], scores[~inlier])}
    in_preds = [p for p, keep in zip(preds, inlier) if keep]
    if all(p is not None for p in in_preds):
        metrics["accuracy"] = accuracy(np.array(in_preds), labels[inlier])
        records = [
            EvaluationRecord(float(s), False, int(t), int(p))
            for s, t, p in zip(scores[inlier], labels[inlier], in_preds)
        ]
        records += [EvaluationRecord(float(s), True) for s in scores[~inlier]]
        area, points = oscr(records)
        metrics["oscr"] = area
        if args.curve:
            args.curve.parent.mkdir(parents=True, exist_ok=True)
            write_curve_csv(args.curve, points)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(args.out, metrics)
    print(" ".join(f"{k}={metrics[k]:.6f}" for k in sorted(metrics)))
    return 0


# ------------------------------------------------------------ experiment runs

_RUN_KEYS = (
    "dataset_seeds",
    "model_seeds",
    "temperatures",
    "scorer",
    "aggregation",
    "output_dir",
    "epochs",
    "finetune_epochs",
    "supcon_epochs",
    "knn_k",
    "workers",
)


def _build_cfg(kind: str, args, extra: dict | None = None) -> harness.ExperimentConfig:
    overrides: dict[str, object] = {k: getattr(args, k, None) for k in _RUN_KEYS}
    if overrides.get("output_dir") is None and "OSRLAB_OUT" in os.environ:
        overrides["output_dir"] = os.environ["OSRLAB_OUT"]
    overrides.update(extra or {})
    return harness.build_config(kind=kind, config_path=args.config, overrides=overrides)


def _print_medians(table: harness.ResultTable) -> None:
    for row in table.rows:
        if row.seed != harness.MEDIAN_SEED:
            continue
        cells = [
            f"{name}={getattr(row, name):.4f}"
            for name in ("accuracy", "auroc", "oscr")
            if getattr(row, name) is not None
        ]
        print(f"median {row.condition}: " + " ".join(cells))


def _fail(message: str) -> int:
    print(f"invariant violated: {message}", file=sys.stderr)
    return 1


def cmd_run_e1e2(args) -> int:
    cfg = _build_cfg("e1e2", args)
    table = harness.run_e1e2(cfg)
    _print_medians(table)
    status = 0
    for scorer in harness.SCORERS:
        e1 = table.cell(harness.MEDIAN_SEED, f"E1 {scorer}", "auroc")
        e2 = table.cell(harness.MEDIAN_SEED, f"E2 {scorer}", "auroc")
        if not e2 > e1:
            status = _fail(f"median AUROC E2 ({e2:.4f}) not above E1 ({e1:.4f}) for {scorer}")
    return status


def cmd_run_finetune(args) -> int:
    cfg = _build_cfg("finetune", args)
    table = harness.run_finetune(cfg)
    _print_medians(table)
    status = 0
    for freeze in harness.FREEZE_POINTS:
        e1 = table.cell(harness.MEDIAN_SEED, f"E1 freeze@{freeze}", "accuracy")
        e2 = table.cell(harness.MEDIAN_SEED, f"E2 freeze@{freeze}", "accuracy")
        if not e2 > e1:
            status = _fail(
                f"median accuracy E2 ({e2:.4f}) not above E1 ({e1:.4f}) at freeze@{freeze}"
            )
    return status


def cmd_run_ensemble(args) -> int:
    cfg = _build_cfg("ensemble", args)
    table = harness.run_ensemble(cfg)
    _print_medians(table)
    taus = cfg.temperatures or harness.DEFAULT_ENSEMBLE_TAUS
    singles = [table.cell(harness.MEDIAN_SEED, f"single tau={t:g}", "auroc") for t in taus]
    label = "+".join(f"{t:g}" for t in taus)
    triple = table.cell(harness.MEDIAN_SEED, f"socsum tau={label}", "auroc")
    floor = sum(singles) / len(singles) - 0.01
    if triple < floor:
        return _fail(
            f"socsum aggregation median AUROC {triple:.4f} fell more than one point "
            f"below the single-model mean {sum(singles) / len(singles):.4f}"
        )
    return 0


def cmd_simulate(args) -> int:
    cfg = _build_cfg("simulate", args)
    paths = harness.run_simulate(cfg)
    for path in paths:
        print(path)
    taus = cfg.temperatures or supcon.DEFAULT_TAUS
    if 0.01 in taus and 0.005 in taus:
        neg = {
            c.tau: c.grads
            for c in supcon.simulate_gradient_curves(taus=(0.01, 0.005))
            if c.kind == "negative"
        }
        if np.max(np.abs(neg[0.01] - neg[0.005])) >= 1e-3:
            return _fail("negative-pair curves for tau=0.01 and tau=0.005 failed to coincide")
    return 0


def cmd_score_external(args) -> int:
    extra = {
        "external_train": tuple(str(p) for p in args.train_emb),
        "external_test": tuple(str(p) for p in args.test_emb),
    }
    cfg = _build_cfg("score-external", args, extra)
    table = harness.run_score_external(cfg)
    for row in table.rows:
        cells = [
            f"{name}={getattr(row, name):.6f}"
            for name in ("accuracy", "auroc", "oscr")
            if getattr(row, name) is not None
        ]
        print(f"{row.condition}: " + " ".join(cells))
    return 0


# --------------------------------------------------------------------- parser

def _add_run_flags(sp, with_temps=True) -> None:
    sp.add_argument("--config", type=Path, default=None, help="key = value config file")
    sp.add_argument("--output-dir", dest="output_dir", default=None,
                    help="artifact root (default: $OSRLAB_OUT or ./out)")
    sp.add_argument("--dataset-seeds", dest="dataset_seeds", default=None,
                    help="comma-separated dataset seeds")
    sp.add_argument("--model-seeds", dest="model_seeds", default=None,
                    help="comma-separated model seeds (pairs with dataset seeds)")
    if with_temps:
        sp.add_argument("--temperatures", dest="temperatures", default=None,
                        help="comma-separated positive temperatures")
    sp.add_argument("--workers", type=int, default=None,
                    help="parallel worker processes for independent runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osrlab",
        description="Open set recognition laboratory: synthetic-shape protocols, "
        "a from-scratch network, contrastive training, outlier scoring, and metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a protocol dataset to PPM files")
    p.add_argument("--protocol", required=True, choices=sorted(synthdata.PROTOCOLS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--fill",
        choices=("filled", "outline"),
        default="filled",
        help="outline renders the colorless circle-vs-rectangle variant",
    )
    p.add_argument("--out", type=Path, default=None, help="dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="parameter file (.npz)")
    p.add_argument("--loss", choices=("cross-entropy", "supcon"), default="cross-entropy")
    p.add_argument("--tau", type=float, default=None, help="supcon temperature")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="finetune a trained model with frozen layers")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--freeze-until", dest="freeze_until", required=True,
                   choices=nn.LAYER_ORDER[:-1])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("embed", help="extract a layer representation to a text file")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--layer", default="linear2",
                   choices=("conv1", "pool", "linear1", "linear2", "logits"))
    p.add_argument("--role", default="test",
                   choices=("train", "test_inlier", "test_outlier", "test"),
                   help="'test' concatenates inliers and outliers (outliers labeled -1)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", help="score test embeddings against train embeddings")
    p.add_argument("--train-emb", dest="train_emb", type=Path, action="append", required=True)
    p.add_argument("--test-emb", dest="test_emb", type=Path, action="append", required=True)
    p.add_argument("--out", type=Path, required=True, help="per-sample score CSV")
    p.add_argument("--scorer", choices=("norm", "mahalanobis"), default="norm")
    p.add_argument("--aggregation", choices=osr.AGGREGATION_KINDS, default="socsum")
    p.add_argument("--knn-k", dest="knn_k", type=int, default=3)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute AUROC/OSCR/accuracy from a score CSV")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="metric summary CSV")
    p.add_argument("--curve", type=Path, default=None, help="OSCR curve CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="emit gradient-curve CSVs and a gnuplot stub")
    _add_run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run-e1e2", help="protocol experiment: accuracy and scorer AUROCs")
    _add_run_flags(p, with_temps=False)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_run_e1e2)

    p = sub.add_parser("run-finetune", help="frozen-layer finetuning on outline sets")
    _add_run_flags(p, with_temps=False)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=None)
    p.set_defaults(func=cmd_run_finetune)

    p = sub.add_parser("run-ensemble", help="temperature-ensemble study on E2")
    _add_run_flags(p)
    p.add_argument("--supcon-epochs", dest="supcon_epochs", type=int, default=None)
    p.add_argument("--knn-k", dest="knn_k", type=int, default=None)
    p.set_defaults(func=cmd_run_ensemble)

    p = sub.add_parser("score-external", help="full scoring pipeline over embedding files")
    _add_run_flags(p, with_temps=False)
    p.add_argument("--train-emb", dest="train_emb", type=Path, action="append", required=True)
    p.add_argument("--test-emb", dest="test_emb", type=Path, action="append", required=True)
    p.add_argument("--scorer", choices=("norm", "mahalanobis"), default=None)
    p.add_argument("--aggregation", choices=osr.AGGREGATION_KINDS, default=None)
    p.add_argument("--knn-k", dest="knn_k", type=int, default=None)
    p.set_defaults(func=cmd_score_external)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OsrlabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
