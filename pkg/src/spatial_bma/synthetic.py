"""Synthetic spatial autoregressive (SAR) data.

Draws y = rho W y + X beta + sigma eps, i.e. y = (I - rho W)^-1 (X beta + sigma eps),
on the bundled 115-capital layout or any supplied weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib.resources import files

import numpy as np

from .errors import ConfigurationError
from .moran import as_dense
from .weights import (GeoPoint, NeighborList, WeightMatrix, apply_island_patches, build_distance_band,
                      build_knn, parse_neighbor_file, read_coordinates, read_patches, row_standardize)


def data_path(name: str):
    return files("spatial_bma") / "data" / name


def capitals() -> list[GeoPoint]:
    """Capital-city coordinates of the 115 sample countries."""
    return read_coordinates(data_path("capitals_115.csv"))


def standard_menu(points: list[GeoPoint] | None = None) -> dict[str, WeightMatrix]:
    """The six row-standardised matrices (queen, 4/6/8NN, 1500 km, inverse 1500 km).

    Queen contiguity and all island patches come from the bundled files, so
    this only works for the bundled capitals.
    """
    points = points or capitals()
    ids = [p.unit_id for p in points]
    queen = parse_neighbor_file(data_path("queen_115.gal").read_text(), unit_ids=ids)
    lists: dict[str, NeighborList] = {
        "queen": apply_island_patches(queen, read_patches(data_path("patches_queen.json"))),
        "4nn": build_knn(points, 4),
        "6nn": build_knn(points, 6),
        "8nn": build_knn(points, 8),
        "band1500": apply_island_patches(build_distance_band(points, 1500.0),
                                         read_patches(data_path("patches_band1500.json"))),
        "invband1500": apply_island_patches(build_distance_band(points, 1500.0, inverse=True),
                                            read_patches(data_path("patches_inverse1500.json"))),
    }
    return {name: row_standardize(nl, name) for name, nl in lists.items()}


@dataclass(frozen=True)
class SyntheticData:
    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    beta: np.ndarray
    rho: float
    unit_ids: tuple[str, ...]


def sar_outcome(W, signal, rho: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    W = as_dense(W)
    n = W.shape[0]
    if not -1.0 < rho < 1.0:
        raise ConfigurationError(f"rho={rho} outside (-1, 1)")
    eps = rng.standard_normal(n)
    return np.linalg.solve(np.eye(n) - rho * W, signal + sigma * eps)


def make_sar_data(W: WeightMatrix, k: int = 8, n_true: int = 3, rho: float = 0.6,
                  beta: float | tuple[float, ...] = 0.5, sigma: float = 1.0,
                  seed: int = 0, standardize: bool = True) -> SyntheticData:
    """SAR fixture with ``k`` Gaussian covariates of which the first ``n_true`` matter."""
    if not 0 <= n_true <= k:
        raise ConfigurationError("n_true must lie in [0, k]")
    rng = np.random.Generator(np.random.Philox(seed))
    n = W.n
    X = rng.standard_normal((n, k))
    b = np.zeros(k)
    b[:n_true] = beta
    y = sar_outcome(W, X @ b, rho, sigma, rng)
    if standardize:
        y = (y - y.mean()) / y.std(ddof=1)
        X = (X - X.mean(axis=0)) / X.std(axis=0, ddof=1)
    names = tuple(f"x{i + 1}" for i in range(k))
    return SyntheticData(y, X, names, b, rho, W.unit_ids)


def make_confounded_data(W: WeightMatrix, k: int = 8, n_true: int = 3, rho: float = 0.6,
                         beta: float = 1.0, sigma: float = 0.5, rank: int = 2, noise: float = 0.5,
                         seed: int = 0) -> SyntheticData:
    """SAR fixture whose last covariate is a spatially smooth proxy of the disturbance.

    The proxy is the projection of the SAR disturbance (I - rho W)^-1 sigma eps
    onto the ``rank`` leading eigenvectors of the centred, symmetrised ``W``,
    standardised and blurred with ``noise`` times iid Gaussian noise. It has no
    effect of its own, but a model without spatial terms can use it to soak up
    the omitted spatial dependence.
    """
    from .filtering import center_transform, eigen_candidates

    if not 0 <= n_true < k:
        raise ConfigurationError("need at least one covariate beyond the true ones")
    rng = np.random.Generator(np.random.Philox(seed))
    Wd = as_dense(W)
    n = Wd.shape[0]
    A = np.eye(n) - rho * Wd
    X = rng.standard_normal((n, k))
    b = np.zeros(k)
    b[:n_true] = beta
    disturbance = np.linalg.solve(A, sigma * rng.standard_normal(n))
    y = np.linalg.solve(A, X @ b) + disturbance
    E = eigen_candidates(center_transform(Wd)).eigenvectors[:, :rank]
    smooth = E @ (E.T @ disturbance)
    smooth = (smooth - smooth.mean()) / smooth.std(ddof=1)
    X[:, k - 1] = smooth + noise * rng.standard_normal(n)
    y = (y - y.mean()) / y.std(ddof=1)
    X = (X - X.mean(axis=0)) / X.std(axis=0, ddof=1)
    names = tuple(f"x{i + 1}" for i in range(k - 1)) + ("confounder",)
    return SyntheticData(y, X, names, b, rho, W.unit_ids)
