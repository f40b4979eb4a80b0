"""Shared fixtures for the test suite."""

import numpy as np

from banditfl.data import FederatedDataset


def two_client_asymmetric_dataset(seed: int, samples: int = 100) -> FederatedDataset:
    """Client 0 has unlearnable noise labels, client 1 a separable problem.

    Client 0's loss is pinned near log(2) forever while client 1's collapses,
    so client 0's reported loss exceeds client 1's in every round.
    """
    rng = np.random.default_rng(seed)
    x_noise = rng.standard_normal((samples, 2))
    y_noise = rng.integers(0, 2, size=samples)
    direction = np.array([1.0, 0.5]) / np.linalg.norm([1.0, 0.5])
    y_sep = rng.integers(0, 2, size=samples)
    x_sep = rng.standard_normal((samples, 2)) + np.where(y_sep[:, None] == 0, -4.0, 4.0) * direction

    xt_noise = rng.standard_normal((samples // 2, 2))
    yt_noise = rng.integers(0, 2, size=samples // 2)
    yt_sep = rng.integers(0, 2, size=samples // 2)
    xt_sep = rng.standard_normal((samples // 2, 2)) + np.where(yt_sep[:, None] == 0, -4.0, 4.0) * direction

    return FederatedDataset(
        features=np.concatenate([x_noise, x_sep]),
        labels=np.concatenate([y_noise, y_sep]).astype(np.int64),
        partition={0: np.arange(samples), 1: np.arange(samples, 2 * samples)},
        test_features=np.concatenate([xt_noise, xt_sep]),
        test_labels=np.concatenate([yt_noise, yt_sep]).astype(np.int64),
        per_client_test={
            0: np.arange(samples // 2),
            1: np.arange(samples // 2, samples),
        },
        n_classes=2,
    )
