"""Shared fixtures-in-code for the test suite: raw layouts and noise generators."""

from __future__ import annotations

import numpy as np

from mortgee.design import ClusterLayout, DesignMatrix


def flat_layout(cluster_index: np.ndarray, waves: np.ndarray, weights=None) -> ClusterLayout:
    """ClusterLayout with placeholder row metadata, for direct GEE tests."""
    n = cluster_index.size
    if weights is None:
        weights = np.ones(n)
    return ClusterLayout(
        cluster_labels=tuple(str(i) for i in range(int(cluster_index.max()) + 1)),
        cluster_index=np.asarray(cluster_index, dtype=int),
        waves=np.asarray(waves, dtype=int),
        weights=np.asarray(weights, dtype=float),
        row_country=np.array(["S"] * n, dtype=object),
        row_gender=np.array(["f"] * n, dtype=object),
        row_age=np.asarray(cluster_index, dtype=int),
        row_year=np.asarray(waves, dtype=int),
    )


def rect_layout(n_clusters: int, n_waves: int, weights=None) -> ClusterLayout:
    cluster_index = np.repeat(np.arange(n_clusters), n_waves)
    waves = np.tile(np.arange(n_waves), n_clusters)
    return flat_layout(cluster_index, waves, weights)


def design_of(X: np.ndarray, y: np.ndarray, labels=None) -> DesignMatrix:
    if labels is None:
        labels = tuple(f"x{j}" for j in range(X.shape[1]))
    return DesignMatrix(labels=tuple(labels), matrix=np.asarray(X, float),
                        response=np.asarray(y, float))


def ar1_noise(rng: np.random.Generator, n_clusters: int, n_waves: int,
              rho: float, sd: float) -> np.ndarray:
    """Stationary AR(1) noise per cluster with marginal standard deviation sd."""
    e = np.empty((n_clusters, n_waves))
    e[:, 0] = sd * rng.standard_normal(n_clusters)
    innov_sd = sd * np.sqrt(1.0 - rho**2)
    for t in range(1, n_waves):
        e[:, t] = rho * e[:, t - 1] + innov_sd * rng.standard_normal(n_clusters)
    return e.reshape(-1)


def exchangeable_noise(rng: np.random.Generator, n_clusters: int, n_waves: int,
                       rho: float, sd: float) -> np.ndarray:
    shared = np.repeat(rng.standard_normal(n_clusters), n_waves)
    idio = rng.standard_normal(n_clusters * n_waves)
    return sd * (np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * idio)
