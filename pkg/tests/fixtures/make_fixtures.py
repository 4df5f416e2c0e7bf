"""Regenerate the external-embedding fixtures and their recorded metrics.

Run from the repository root:

    python3 tests/fixtures/make_fixtures.py

The ext-*-{train,test}.txt files are the checked-in pipeline inputs; the
expected-*.csv files record the result rows the scoring pipeline produced
when the fixtures were generated (comment lines stripped, since the config
hash depends on the output directory). The recorded floats depend on the
BLAS reduction order inside numpy matmul, so if a platform or library
change ever shifts them, rerun this script and commit the new outputs.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from osrlab import harness, osr

HERE = Path(__file__).parent
MODELS = (("ext-a", 11), ("ext-b", 12))
DIM = 16
CLASSES = 4


def make_model_files(stem: str, seed: int) -> tuple[Path, Path]:
    """Inliers cluster around per-class centers away from the origin (so
    their norms run high); outliers hug the origin."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(CLASSES, DIM))
    centers += 0.8 * np.sign(centers)
    train = np.vstack([centers[c] + 1.4 * rng.normal(size=(20, DIM)) for c in range(CLASSES)])
    train_labels = np.repeat(np.arange(CLASSES), 20)
    test_in = np.vstack([centers[c] + 1.4 * rng.normal(size=(10, DIM)) for c in range(CLASSES)])
    test_out = 1.9 * rng.normal(size=(20, DIM))
    test = np.vstack([test_in, test_out])
    test_labels = np.concatenate(
        [np.repeat(np.arange(CLASSES), 10), np.full(20, osr.UNLABELED)]
    )
    train_path = HERE / f"{stem}-train.txt"
    test_path = HERE / f"{stem}-test.txt"
    osr.write_embeddings(train_path, osr.EmbeddingBatch(train, train_labels, provenance=stem))
    osr.write_embeddings(test_path, osr.EmbeddingBatch(test, test_labels, provenance=stem))
    return train_path, test_path


def data_section(csv_path: Path) -> str:
    lines = csv_path.read_text().splitlines()
    return "\n".join(line for line in lines if not line.startswith("#")) + "\n"


def record(scorer: str, aggregation: str, train_paths, test_paths) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        cfg = harness.ExperimentConfig(
            kind="score-external",
            scorer=scorer,
            aggregation=aggregation,
            output_dir=Path(tmp),
            external_train=tuple(str(p) for p in train_paths),
            external_test=tuple(str(p) for p in test_paths),
        )
        csv_path = Path(tmp) / "results" / "score-external.csv"
        harness.run_score_external(cfg)
        first = csv_path.read_bytes()
        harness.run_score_external(cfg)
        if csv_path.read_bytes() != first:
            sys.exit("pipeline is not run-to-run deterministic; refusing to record")
        out = HERE / f"expected-{aggregation}-{scorer}.csv"
        out.write_text(data_section(csv_path))
        print(out)


def main() -> None:
    train_paths, test_paths = [], []
    for stem, seed in MODELS:
        tr, te = make_model_files(stem, seed)
        train_paths.append(tr)
        test_paths.append(te)
        print(tr)
        print(te)
    record("norm", "socsum", train_paths, test_paths)
    record("mahalanobis", "repcat", train_paths, test_paths)


if __name__ == "__main__":
    main()
