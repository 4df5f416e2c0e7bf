"""Experiment orchestration.

Reproduces the controlled studies end to end: the two-protocol classifier
experiment with its three outlier scorers, frozen-layer finetuning on the
outline sets, the temperature-ensemble study on contrastive models, the
gradient-curve simulation, and a scoring pipeline for externally produced
embedding files.

Every run is driven by an ExperimentConfig; rows land in a ResultTable whose
CSV serialization is byte-stable (the timestamp lives in a sidecar run log,
never in the CSV). Independent (seed, temperature) work units can execute in
parallel worker processes; table assembly stays single-writer in the parent.
"""

from __future__ import annotations

import hashlib
import itertools
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import nn, osr, supcon, synthdata
from .errors import ModelIOError
from .metrics import EvaluationRecord, accuracy, auroc, oscr

__all__ = [
    "ExperimentConfig",
    "ResultRow",
    "ResultTable",
    "build_config",
    "config_hash",
    "load_config_file",
    "run_e1e2",
    "run_ensemble",
    "run_finetune",
    "run_score_external",
    "run_simulate",
]

KINDS = ("e1e2", "toy-osr", "finetune", "ensemble", "simulate", "score-external")
SCORERS = ("msp", "mahalanobis", "norm")
FREEZE_POINTS = ("conv1", "linear1", "linear2")
PROTOCOLS = ("E1", "E2")
MEDIAN_SEED = "median"
# the temperature selection used for the toy ensemble study
DEFAULT_ENSEMBLE_TAUS = (0.5, 0.1, 0.05)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment invocation.

    Dataset and model seed lists pair positionally (run i uses
    dataset_seeds[i] with model_seeds[i]). An empty temperature list means
    "the experiment's default set": {0.5, 0.1, 0.05} for the ensemble study,
    all six simulated temperatures for `simulate`. `scorer` and `aggregation`
    select the scoring route for external embeddings; the toy experiments
    evaluate their fixed scorer sets regardless (all three for e1e2, feature
    norm for the contrastive ensemble). `toy-osr` is accepted as an alias
    kind for e1e2, which emits that table.
    """

    kind: str
    dataset_seeds: tuple[int, ...] = (0, 1, 2)
    model_seeds: tuple[int, ...] = (0, 1, 2)
    temperatures: tuple[float, ...] = ()
    scorer: str = "norm"
    aggregation: str = "socsum"
    output_dir: Path = Path("out")
    epochs: int = 30
    finetune_epochs: int = 30
    supcon_epochs: int = 100
    knn_k: int = 3
    workers: int = 1
    external_train: tuple[str, ...] = ()
    external_test: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", str(self.kind))
        object.__setattr__(self, "dataset_seeds", tuple(int(s) for s in self.dataset_seeds))
        object.__setattr__(self, "model_seeds", tuple(int(s) for s in self.model_seeds))
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        object.__setattr__(self, "external_train", tuple(str(p) for p in self.external_train))
        object.__setattr__(self, "external_test", tuple(str(p) for p in self.external_test))
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.dataset_seeds or not self.model_seeds:
            raise ValueError("seed lists cannot be empty")
        if len(self.dataset_seeds) != len(self.model_seeds):
            raise ValueError("dataset and model seed lists pair positionally; lengths must match")
        if any(t <= 0 for t in self.temperatures):
            raise ValueError("temperatures must be positive")
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")
        if self.aggregation not in osr.AGGREGATION_KINDS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        for name in ("epochs", "finetune_epochs", "supcon_epochs", "knn_k", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def runs(self) -> list[tuple[int, int]]:
        return list(zip(self.dataset_seeds, self.model_seeds))


# ------------------------------------------------------------ config plumbing

_INT_TUPLE_KEYS = ("dataset_seeds", "model_seeds")
_FLOAT_TUPLE_KEYS = ("temperatures",)
_STR_TUPLE_KEYS = ("external_train", "external_test")
_INT_KEYS = ("epochs", "finetune_epochs", "supcon_epochs", "knn_k", "workers")


def load_config_file(path) -> dict[str, str]:
    """Parse the plain-text config format: one `key = value` per line,
    `#` starts a comment, list values are comma-separated."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def _convert_value(key: str, value):
    if not isinstance(value, str):
        return value
    if key in _INT_TUPLE_KEYS:
        return tuple(int(x) for x in _split_list(value))
    if key in _FLOAT_TUPLE_KEYS:
        return tuple(float(x) for x in _split_list(value))
    if key in _STR_TUPLE_KEYS:
        return tuple(_split_list(value))
    if key in _INT_KEYS:
        return int(value)
    return value


def _split_list(value: str) -> list[str]:
    return [part for part in (p.strip() for p in value.split(",")) if part]


def build_config(kind=None, config_path=None, overrides=None) -> ExperimentConfig:
    """Defaults <- config file <- overrides. Every value accepts its string
    form, so CLI flags and config keys share one parser."""
    merged: dict[str, object] = {}
    if config_path is not None:
        merged.update(load_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    if kind is not None:
        merged["kind"] = kind
    if "kind" not in merged:
        raise ValueError("experiment kind missing (pass it or set `kind` in the config file)")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**{k: _convert_value(k, v) for k, v in merged.items()})


def config_hash(cfg: ExperimentConfig) -> str:
    """12-hex-digit digest of the canonical key=value serialization."""
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(x) for x in value)
        lines.append(f"{f.name}={value}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]


# --------------------------------------------------------------- result table

@dataclass(frozen=True)
class ResultRow:
    """One (experiment, seed, condition) cell group; unfilled metrics stay
    None and serialize as empty CSV cells."""

    experiment: str
    seed: str
    condition: str
    accuracy: float | None = None
    auroc: float | None = None
    oscr: float | None = None

    def __post_init__(self):
        for name in ("accuracy", "auroc", "oscr"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")


_METRICS = ("accuracy", "auroc", "oscr")


@dataclass
class ResultTable:
    """Accumulated rows plus config traceability metadata. The timestamp is
    recorded in the sidecar run log only, keeping write_csv byte-stable for
    identical configs."""

    experiment: str
    config_hash: str
    timestamp: str
    rows: list[ResultRow] = field(default_factory=list)

    def add(self, seed, condition, accuracy=None, auroc=None, oscr=None) -> None:
        self.rows.append(
            ResultRow(self.experiment, str(seed), condition, accuracy, auroc, oscr)
        )

    def conditions(self) -> list[str]:
        seen: dict[str, None] = {}
        for row in self.rows:
            if row.seed != MEDIAN_SEED:
                seen.setdefault(row.condition, None)
        return list(seen)

    def cell(self, seed, condition, metric: str) -> float | None:
        if metric not in _METRICS:
            raise KeyError(f"unknown metric {metric!r}")
        for row in self.rows:
            if row.seed == str(seed) and row.condition == condition:
                return getattr(row, metric)
        raise KeyError(f"no row for seed={seed!r} condition={condition!r}")

    def append_medians(self) -> None:
        """One seed='median' row per condition, metric-wise over seed rows."""
        for condition in self.conditions():
            group = [r for r in self.rows if r.seed != MEDIAN_SEED and r.condition == condition]
            med = {}
            for metric in _METRICS:
                values = [getattr(r, metric) for r in group if getattr(r, metric) is not None]
                med[metric] = statistics.median(values) if values else None
            self.add(MEDIAN_SEED, condition, **med)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# osrlab-results v1\n")
            fh.write(f"# experiment={self.experiment}\n")
            fh.write(f"# config={self.config_hash}\n")
            fh.write("experiment,seed,condition,accuracy,auroc,oscr\n")
            for row in self.rows:
                cells = [row.experiment, row.seed, row.condition] + [
                    "" if getattr(row, m) is None else repr(float(getattr(row, m)))
                    for m in _METRICS
                ]
                fh.write(",".join(cells) + "\n")

    def write_log(self, path, cfg: ExperimentConfig) -> None:
        with open(path, "w") as fh:
            fh.write(f"timestamp: {self.timestamp}\n")
            fh.write(f"experiment: {self.experiment}\n")
            fh.write(f"config_hash: {self.config_hash}\n")
            fh.write(f"rows: {len(self.rows)}\n")
            fh.write("config:\n")
            for f in sorted(fields(cfg), key=lambda f: f.name):
                value = getattr(cfg, f.name)
                if isinstance(value, tuple):
                    value = ",".join(str(x) for x in value)
                fh.write(f"  {f.name} = {value}\n")


def _new_table(experiment: str, cfg: ExperimentConfig) -> ResultTable:
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return ResultTable(experiment=experiment, config_hash=config_hash(cfg), timestamp=stamp)


def _finish_table(table: ResultTable, cfg: ExperimentConfig) -> ResultTable:
    table.append_medians()
    results = Path(cfg.output_dir) / "results"
    results.mkdir(parents=True, exist_ok=True)
    table.write_csv(results / f"{table.experiment}.csv")
    table.write_log(results / f"{table.experiment}.log", cfg)
    return table


# ------------------------------------------------------------- run plumbing

def _expect_kind(cfg: ExperimentConfig, allowed: tuple[str, ...]) -> None:
    if cfg.kind not in allowed:
        raise ValueError(f"config kind {cfg.kind!r} does not match this runner ({allowed})")


def _map_units(fn, units, workers: int):
    """Run independent work units, optionally in parallel processes. Results
    come back in submission order, so table assembly stays deterministic."""
    if workers <= 1 or len(units) <= 1:
        return [fn(unit) for unit in units]
    with ProcessPoolExecutor(max_workers=min(workers, len(units))) as pool:
        return list(pool.map(fn, units))


def classifier_path(cfg: ExperimentConfig, protocol: str, dseed: int, mseed: int) -> Path:
    return Path(cfg.output_dir) / "models" / f"classifier-{protocol}-d{dseed}-m{mseed}.npz"


def supcon_path(cfg: ExperimentConfig, tau: float, dseed: int, mseed: int) -> Path:
    return Path(cfg.output_dir) / "models" / f"supcon-E2-tau{tau:g}-d{dseed}-m{mseed}.npz"


def _seed_key(dseed: int, mseed: int) -> str:
    return str(dseed) if dseed == mseed else f"{dseed}:{mseed}"


def _oscr_records(scores_in, true_labels, predictions, scores_out):
    records = [
        EvaluationRecord(float(s), False, int(t), int(p))
        for s, t, p in zip(scores_in, true_labels, predictions)
    ]
    records += [EvaluationRecord(float(s), True) for s in scores_out]
    return records


# ----------------------------------------------------------------- e1e2 study

def _e1e2_unit(args):
    cfg, protocol, dseed, mseed = args
    ds = synthdata.generate_protocol(protocol, dseed)
    params = nn.train_classifier(ds, nn.TrainConfig(epochs=cfg.epochs, seed=mseed))
    model_path = classifier_path(cfg, protocol, dseed, mseed)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_params(model_path, params)

    train_img, train_lab = ds.subset("train")
    in_img, in_lab = ds.subset("test_inlier")
    out_img, _ = ds.subset("test_outlier")
    preds = nn.predict(params, in_img)
    acc = accuracy(preds, in_lab)

    logits_in = nn.extract_representation(params, in_img, "logits").matrix
    logits_out = nn.extract_representation(params, out_img, "logits").matrix
    rep_train = nn.extract_representation(params, train_img, "linear2", labels=train_lab)
    rep_in = nn.extract_representation(params, in_img, "linear2")
    rep_out = nn.extract_representation(params, out_img, "linear2")
    gaussian = osr.fit_gaussian_model(rep_train)
    score_pairs = {
        "msp": (osr.score_msp(logits_in).scores, osr.score_msp(logits_out).scores),
        "mahalanobis": (
            osr.score_mahalanobis(rep_in, gaussian).scores,
            osr.score_mahalanobis(rep_out, gaussian).scores,
        ),
        "norm": (osr.score_norm(rep_in).scores, osr.score_norm(rep_out).scores),
    }
    rows = []
    for scorer in SCORERS:
        s_in, s_out = score_pairs[scorer]
        area, _ = oscr(_oscr_records(s_in, in_lab, preds, s_out))
        rows.append((f"{protocol} {scorer}", acc, auroc(s_in, s_out), area))
    return rows


def run_e1e2(cfg: ExperimentConfig) -> ResultTable:
    """Train both protocols per seed, report inlier accuracy plus AUROC/OSCR
    for all three scorers, and persist the classifiers for later finetuning."""
    _expect_kind(cfg, ("e1e2", "toy-osr"))
    units = [
        (cfg, protocol, dseed, mseed)
        for dseed, mseed in cfg.runs()
        for protocol in PROTOCOLS
    ]
    results = _map_units(_e1e2_unit, units, cfg.workers)
    table = _new_table("e1e2", cfg)
    for (_, _, dseed, mseed), rows in zip(units, results):
        for condition, acc, area_auroc, area_oscr in rows:
            table.add(_seed_key(dseed, mseed), condition, acc, area_auroc, area_oscr)
    return _finish_table(table, cfg)


# ------------------------------------------------------------- finetune study

def _finetune_unit(args):
    cfg, protocol, dseed, mseed = args
    model_path = classifier_path(cfg, protocol, dseed, mseed)
    if not model_path.is_file():
        raise ModelIOError(
            f"missing trained classifier {model_path}; run the e1e2 experiment first"
        )
    outline = synthdata.generate_outline_set(protocol, dseed)
    protocol_classes = len(synthdata.PROTOCOLS[protocol][0])
    params = nn.load_params(model_path, expect_num_classes=protocol_classes)
    in_img, in_lab = outline.subset("test_inlier")
    rows = []
    for freeze in FREEZE_POINTS:
        tuned = nn.finetune_frozen(
            params, freeze, outline, nn.TrainConfig(epochs=cfg.finetune_epochs, seed=mseed)
        )
        acc = accuracy(nn.predict(tuned, in_img), in_lab)
        rows.append((f"{protocol} freeze@{freeze}", acc))
    return rows


def run_finetune(cfg: ExperimentConfig) -> ResultTable:
    """Load the persisted classifiers and finetune on the colorless outline
    sets (circle vs rectangle) with layers frozen through each cutoff;
    reports shape accuracy per protocol, a probe of how much shape
    information the frozen layers encode."""
    _expect_kind(cfg, ("finetune",))
    units = [
        (cfg, protocol, dseed, mseed)
        for dseed, mseed in cfg.runs()
        for protocol in PROTOCOLS
    ]
    results = _map_units(_finetune_unit, units, cfg.workers)
    table = _new_table("finetune", cfg)
    for (_, _, dseed, mseed), rows in zip(units, results):
        for condition, acc in rows:
            table.add(_seed_key(dseed, mseed), condition, accuracy=acc)
    return _finish_table(table, cfg)


# ------------------------------------------------------------- ensemble study

def _ensemble_unit(args):
    cfg, tau, dseed, mseed = args
    ds = synthdata.generate_protocol("E2", dseed)
    tcfg = nn.TrainConfig(epochs=cfg.supcon_epochs, seed=mseed, loss="supcon", tau=tau)
    params = supcon.train_supcon(ds, tau, tcfg)
    model_path = supcon_path(cfg, tau, dseed, mseed)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_params(model_path, params)

    train_img, train_lab = ds.subset("train")
    in_img, in_lab = ds.subset("test_inlier")
    out_img, _ = ds.subset("test_outlier")
    test_img = np.concatenate([in_img, out_img])
    test_lab = np.concatenate([in_lab, np.full(len(out_img), osr.UNLABELED)])
    # raw linear2 features: the norm score needs pre-normalization magnitudes
    train_rep = nn.extract_representation(params, train_img, "linear2", labels=train_lab)
    test_rep = nn.extract_representation(params, test_img, "linear2", labels=test_lab)
    return train_rep, test_rep


def run_ensemble(cfg: ExperimentConfig) -> ResultTable:
    """Per seed: one contrastive model per temperature on E2, then feature
    norm AUROC for singles and for every >=2 temperature combination under
    each aggregation strategy. kNN inlier accuracy and OSCR ride on the
    concatenated representation (singles: the model's own)."""
    _expect_kind(cfg, ("ensemble",))
    taus = cfg.temperatures or DEFAULT_ENSEMBLE_TAUS
    if len(taus) < 2:
        raise ValueError("ensemble study needs at least two temperatures")
    units = [
        (cfg, tau, dseed, mseed)
        for dseed, mseed in cfg.runs()
        for tau in taus
    ]
    results = _map_units(_ensemble_unit, units, cfg.workers)
    per_run = {}
    for (_, tau, dseed, mseed), reps in zip(units, results):
        per_run.setdefault((dseed, mseed), {})[tau] = reps

    table = _new_table("ensemble", cfg)
    for dseed, mseed in cfg.runs():
        reps = per_run[(dseed, mseed)]
        seed_key = _seed_key(dseed, mseed)
        inlier_mask = reps[taus[0]][1].labels != osr.UNLABELED

        def emit(condition, tr_list, te_list, scores):
            s_in, s_out = scores[inlier_mask], scores[~inlier_mask]
            preds = osr.knn_classify(tr_list, osr.concat_embeddings(te_list).matrix, k=cfg.knn_k)
            labels = te_list[0].labels[inlier_mask]
            acc = accuracy(preds[inlier_mask], labels)
            area, _ = oscr(_oscr_records(s_in, labels, preds[inlier_mask], s_out))
            table.add(seed_key, condition, acc, auroc(s_in, s_out), area)

        for tau in taus:
            train_rep, test_rep = reps[tau]
            scores = osr.score_norm(test_rep).scores
            emit(f"single tau={tau:g}", [train_rep], [test_rep], scores)
        for size in range(2, len(taus) + 1):
            for combo in itertools.combinations(taus, size):
                tr_list = [reps[t][0] for t in combo]
                te_list = [reps[t][1] for t in combo]
                label = "+".join(f"{t:g}" for t in combo)
                for strategy in osr.AGGREGATION_KINDS:
                    scores = osr.aggregate(te_list, strategy, osr.score_norm).scores
                    if strategy == "repcat":
                        emit(f"repcat tau={label}", tr_list, te_list, scores)
                    else:
                        s_in, s_out = scores[inlier_mask], scores[~inlier_mask]
                        table.add(
                            seed_key, f"{strategy} tau={label}", auroc=auroc(s_in, s_out)
                        )
    return _finish_table(table, cfg)


# ----------------------------------------------------------------- simulation

_GNUPLOT_STUB = """\
# Render the gradient curves: gnuplot plot.gp
set datafile separator ","
set terminal pngcairo size 1000,420
set output "gradient-curves.png"
set multiplot layout 1,2
set key outside
set xlabel "positive-pair similarity"
set ylabel "dL/ds"
plot {positive}
set xlabel "negative-pair similarity"
plot {negative}
unset multiplot
"""


def run_simulate(cfg: ExperimentConfig) -> list[Path]:
    """Emit one CSV per (pair kind, temperature) curve plus a gnuplot stub."""
    _expect_kind(cfg, ("simulate",))
    curves = supcon.simulate_gradient_curves(taus=cfg.temperatures or supcon.DEFAULT_TAUS)
    # defaults: six temperatures x two pair kinds = 12 curve files
    out = Path(cfg.output_dir) / "curves"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    plot_terms = {"positive": [], "negative": []}
    for curve in curves:
        path = out / f"{curve.kind}-tau{curve.tau:g}.csv"
        supcon.write_curves_csv(path, [curve])
        plot_terms[curve.kind].append(
            f'"{path.name}" every ::1 using 3:4 with lines title "tau={curve.tau:g}"'
        )
        paths.append(path)
    stub = out / "plot.gp"
    stub.write_text(
        _GNUPLOT_STUB.format(
            positive=", \\\n     ".join(plot_terms["positive"]),
            negative=", \\\n     ".join(plot_terms["negative"]),
        )
    )
    paths.append(stub)
    return paths


# ----------------------------------------------------------- external scoring

def _external_scorer(kind: str, train: osr.EmbeddingBatch):
    if kind == "norm":
        return osr.score_norm
    gaussian = osr.fit_gaussian_model(train)
    return lambda batch: osr.score_mahalanobis(batch, gaussian)


def run_score_external(cfg: ExperimentConfig) -> ResultTable:
    """Score externally produced embedding files (one train/test pair per
    model): per-model metrics plus the configured aggregation over all
    models. Deterministic, pure function of the files and the config."""
    _expect_kind(cfg, ("score-external",))
    if not cfg.external_train:
        raise ValueError("score-external needs at least one train/test embedding file pair")
    if len(cfg.external_train) != len(cfg.external_test):
        raise ValueError("external_train and external_test must pair up one file per model")
    if cfg.scorer == "msp":
        raise ValueError("msp scores logits; external embeddings support norm or mahalanobis")
    trains = [osr.read_embeddings(p) for p in cfg.external_train]
    tests = [osr.read_embeddings(p) for p in cfg.external_test]
    for path, train in zip(cfg.external_train, trains):
        if np.any(train.labels == osr.UNLABELED):
            raise ValueError(f"{path}: training embeddings must all carry class labels")
    labels = tests[0].labels
    inlier_mask = labels != osr.UNLABELED
    if not inlier_mask.any() or inlier_mask.all():
        raise ValueError(
            "test embeddings need both inlier rows (labeled) and outlier rows (label -1)"
        )
    scorers = [_external_scorer(cfg.scorer, train) for train in trains]

    table = _new_table("score-external", cfg)

    def emit(condition, tr_list, te_list, scores):
        s_in, s_out = scores[inlier_mask], scores[~inlier_mask]
        preds = osr.knn_classify(tr_list, osr.concat_embeddings(te_list).matrix, k=cfg.knn_k)
        acc = accuracy(preds[inlier_mask], labels[inlier_mask])
        area, _ = oscr(_oscr_records(s_in, labels[inlier_mask], preds[inlier_mask], s_out))
        table.add("-", condition, acc, auroc(s_in, s_out), area)

    for j, (train, test) in enumerate(zip(trains, tests)):
        emit(f"single {Path(cfg.external_test[j]).stem}", [train], [test], scorers[j](test).scores)
    if cfg.aggregation == "socsum":
        agg_scorer = scorers
    elif cfg.scorer == "norm":
        agg_scorer = osr.score_norm
    elif cfg.aggregation == "repcat":
        agg_scorer = _external_scorer("mahalanobis", osr.concat_embeddings(trains))
    else:  # repsum + mahalanobis: fit on the mean train representation
        mean_train = osr.EmbeddingBatch(
            matrix=np.stack([b.matrix for b in trains]).mean(axis=0),
            labels=trains[0].labels.copy(),
            provenance="repsum",
        )
        agg_scorer = _external_scorer("mahalanobis", mean_train)
    agg_scores = osr.aggregate(tests, cfg.aggregation, agg_scorer).scores
    emit(f"{cfg.aggregation} all", trains, tests, agg_scores)

    results = Path(cfg.output_dir) / "results"
    results.mkdir(parents=True, exist_ok=True)
    table.write_csv(results / "score-external.csv")
    table.write_log(results / "score-external.log", cfg)
    return table
