"""Shared fixtures: small dataset slices so training tests stay fast."""

import numpy as np
import pytest

from osrlab.synthdata import LabeledDataset, generate_outline_set, generate_protocol


def shrink_dataset(full: LabeledDataset, per_class_train, per_class_test, outliers):
    keep = []
    for cid in range(full.inlier_class_count):
        idx = np.flatnonzero((full.roles == "train") & (full.class_ids == cid))
        keep.extend(idx[:per_class_train])
    for cid in range(full.inlier_class_count):
        idx = np.flatnonzero((full.roles == "test_inlier") & (full.class_ids == cid))
        keep.extend(idx[:per_class_test])
    keep.extend(np.flatnonzero(full.roles == "test_outlier")[:outliers])
    keep = np.array(keep)
    return LabeledDataset(
        images=full.images[keep],
        class_ids=full.class_ids[keep],
        roles=full.roles[keep],
        class_names=full.class_names,
        seed=full.seed,
        protocol=full.protocol,
        fill=full.fill,
    )


@pytest.fixture(scope="session")
def micro_e1():
    return shrink_dataset(generate_protocol("E1", seed=0), 6, 3, 3)


@pytest.fixture(scope="session")
def micro_outline():
    return shrink_dataset(generate_outline_set("E1", seed=0), 6, 3, 0)


@pytest.fixture(scope="session")
def single_class_ds():
    full = generate_protocol("E1", seed=1)
    keep = np.concatenate(
        [
            np.flatnonzero((full.roles == "train") & (full.class_ids == 0))[:8],
            np.flatnonzero((full.roles == "test_inlier") & (full.class_ids == 0))[:4],
        ]
    )
    return LabeledDataset(
        images=full.images[keep],
        class_ids=full.class_ids[keep],
        roles=full.roles[keep],
        class_names=("blue-circle", "blue-rectangle"),
        seed=1,
        protocol="E1",
    )
