"""Shared fixtures. The expensive trained models are session-scoped so the
acceptance criteria share one training run each."""

import dataclasses

import numpy as np
import pytest

from nnviz import datasets as D
from nnviz import model as M


TRAIN_SEED = 100
TEST_SEED = 200


@pytest.fixture(scope="session")
def shapes_train():
    return D.as_labeled_set(D.gen_shapes(2000, seed=TRAIN_SEED,
                                         max_shapes_per_image=2))


@pytest.fixture(scope="session")
def shapes_test():
    return D.as_labeled_set(D.gen_shapes(500, seed=TEST_SEED,
                                         max_shapes_per_image=2))


@pytest.fixture(scope="session")
def trained_camnet(shapes_train):
    """The criterion-4 model: 2000 images, 10 epochs. Trains once per
    session; yields (model, wall seconds spent training)."""
    import time
    spec = dataclasses.replace(M.camnet_spec(D.SHAPE_CLASSES),
                               input_mean=float(shapes_train.images.mean()))
    model = M.build(spec, seed=0)
    t0 = time.monotonic()
    M.train(model, shapes_train, epochs=10, lr=0.5, batch=16, seed=0)
    return model, time.monotonic() - t0


@pytest.fixture()
def small_camnet():
    return M.build(M.camnet_spec(D.SHAPE_CLASSES), seed=7)


@pytest.fixture()
def small_fcnet():
    return M.build(M.fcnet_spec(D.SHAPE_CLASSES), seed=7)
