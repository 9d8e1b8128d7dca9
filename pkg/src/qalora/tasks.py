"""Synthetic fine-tuning tasks.

Each task returns a "pre-trained" full-precision model, a training set and a
held-out test set. The targets come from a teacher that differs from the
pre-trained weights by a group-structured change, and the inputs carry a
per-group shared component (the way real activations have channel offsets),
so quantization error shows up in the outputs and adapters have something to
compensate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import DenseLayer
from .training import Dataset, ToyModel


@dataclass(frozen=True, eq=False)
class Task:
    model: ToyModel
    train: Dataset
    test: Dataset
    name: str


def grouped_inputs(rng: np.random.Generator, n: int, d_in: int, group_size: int,
                   shared_mean: float = 0.5, noise: float = 0.5) -> np.ndarray:
    """Inputs whose features share a random component inside each group."""
    shared = rng.normal(shared_mean, 1.0, size=(n, d_in // group_size))
    return np.repeat(shared, group_size, axis=1) + noise * rng.normal(size=(n, d_in))


def group_structured_delta(rng: np.random.Generator, d_in: int, d_out: int, group_size: int) -> np.ndarray:
    """Weight change that is constant over the rows of each group."""
    groups = d_in // group_size
    per_group = rng.normal(0.0, 1.0 / (group_size * np.sqrt(groups)), size=(groups, d_out))
    return np.repeat(per_group, group_size, axis=0)


def linear_teacher(seed: int, d_in: int = 64, d_out: int = 16, group_size: int = 32,
                   n_train: int = 2048, n_test: int = 512, label_noise: float = 0.0) -> Task:
    rng = np.random.default_rng(seed)
    w0 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
    teacher = w0 + group_structured_delta(rng, d_in, d_out, group_size)

    def sample(n):
        x = grouped_inputs(rng, n, d_in, group_size)
        return Dataset(x, targets=x @ teacher + label_noise * rng.normal(size=(n, d_out)), name="linear-teacher")

    model = ToyModel((DenseLayer(w0),), ("identity",), "mse")
    return Task(model, sample(n_train), sample(n_test), "linear-teacher")


def mlp_teacher(seed: int, d_in: int = 64, hidden: int = 64, d_out: int = 16, group_size: int = 32,
                n_train: int = 2048, n_test: int = 512, label_noise: float = 0.0) -> Task:
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, hidden))
    w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, d_out))
    t1 = w1 + group_structured_delta(rng, d_in, hidden, group_size)
    t2 = w2 + group_structured_delta(rng, hidden, d_out, group_size)

    def sample(n):
        x = grouped_inputs(rng, n, d_in, group_size)
        y = np.maximum(x @ t1, 0.0) @ t2 + label_noise * rng.normal(size=(n, d_out))
        return Dataset(x, targets=y, name="mlp-teacher")

    model = ToyModel((DenseLayer(w1), DenseLayer(w2)), ("relu", "identity"), "mse")
    return Task(model, sample(n_train), sample(n_test), "mlp-teacher")


def gaussian_blobs(seed: int, d_in: int = 64, classes: int = 4, group_size: int = 32,
                   n_train: int = 2048, n_test: int = 512, spread: float = 1.0) -> Task:
    """Four-class blob classification; the pre-trained head is a perturbed class-mean classifier."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0 / np.sqrt(group_size), size=(classes, d_in // group_size))
    means = np.repeat(means, group_size, axis=1)
    head = means.T / d_in * 4.0
    w0 = head + rng.normal(0.0, 1.0 / np.sqrt(d_in), size=head.shape)

    def sample(n):
        labels = rng.integers(0, classes, size=n)
        x = means[labels] + spread * rng.normal(size=(n, d_in))
        return Dataset(x, labels=labels, name="gaussian-blobs")

    model = ToyModel((DenseLayer(w0),), ("identity",), "cross_entropy")
    return Task(model, sample(n_train), sample(n_test), "gaussian-blobs")


TASKS = {"linear-teacher": linear_teacher, "mlp-teacher": mlp_teacher, "gaussian-blobs": gaussian_blobs}
