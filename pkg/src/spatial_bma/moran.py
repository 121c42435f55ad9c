"""Moran's I for regression residuals.

Two reference distributions are available: a permutation test and the
normal approximation with exact residual moments (Cliff and Ord), which
accounts for the regression design through the annihilator M.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConfigurationError, NumericalError
from .weights import WeightMatrix

ALTERNATIVES = ("greater", "two-sided")


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected: float
    z: float
    p_value: float
    method: str
    alternative: str


def as_dense(W) -> np.ndarray:
    if isinstance(W, WeightMatrix):
        return W.to_dense()
    return np.asarray(W, dtype=float)


def morans_i(e, W) -> float:
    """(n / S0) * e'We / e'e for a residual vector ``e``."""
    e = np.asarray(e, dtype=float).ravel()
    W = as_dense(W)
    ee = float(e @ e)
    if ee == 0.0:
        raise NumericalError("Moran's I is undefined for a zero vector")
    return len(e) / W.sum() * float(e @ W @ e) / ee


def design_basis(X, n: int) -> np.ndarray:
    """Orthonormal basis of [1, X]; raises on rank deficiency."""
    ones = np.ones((n, 1))
    if X is None:
        Z = ones
    else:
        X = np.asarray(X, dtype=float).reshape(n, -1)
        Z = np.hstack([ones, X])
    Q, R = np.linalg.qr(Z)
    d = np.abs(np.diag(R))
    if d.size and d.min() <= 1e-10 * max(1.0, d.max()):
        raise NumericalError(f"design matrix with {Z.shape[1]} columns is rank deficient")
    return Q


class ResidualMoranMoments:
    """Cliff-Ord residual moments of Moran's I for a growing design.

    Holds the traces needed for E[I] and Var[I] under M = I - QQ', where Q is
    an orthonormal basis of the design. :meth:`extended` returns the
    moments after appending one orthonormal column, which keeps greedy
    eigenvector selection cheap.
    """

    def __init__(self, W, Q):
        W = as_dense(W)
        self.n = W.shape[0]
        self.scale = self.n / W.sum()
        self.W = W
        self.U = 0.5 * (W + W.T)
        self.Q = Q
        self.UQ = self.U @ Q
        QUQ = Q.T @ self.UQ
        self.tr_U = float(np.trace(self.U))
        self.tr_UU = float(np.sum(self.U * self.U))
        self.tr_QUQ = float(np.trace(QUQ))
        self.norm_UQ = float(np.sum(self.UQ * self.UQ))
        self.norm_QUQ = float(np.sum(QUQ * QUQ))

    @property
    def p(self) -> int:
        return self.Q.shape[1]

    def _moments(self, p, tr_QUQ, norm_UQ, norm_QUQ):
        df = self.n - p
        tr_MU = self.tr_U - tr_QUQ
        tr_MUMU = self.tr_UU - 2.0 * norm_UQ + norm_QUQ
        mean = self.scale * tr_MU / df
        second = self.scale**2 * (2.0 * tr_MUMU + tr_MU**2) / (df * (df + 2.0))
        return mean, second - mean**2

    def moments(self) -> tuple[float, float]:
        return self._moments(self.p, self.tr_QUQ, self.norm_UQ, self.norm_QUQ)

    def extended_moments(self, q) -> tuple[float, float]:
        Uq = self.U @ q
        quq = float(q @ Uq)
        cross = self.Q.T @ Uq
        return self._moments(
            self.p + 1,
            self.tr_QUQ + quq,
            self.norm_UQ + float(Uq @ Uq),
            self.norm_QUQ + 2.0 * float(cross @ cross) + quq**2,
        )

    def extend(self, q) -> "ResidualMoranMoments":
        q = np.asarray(q, dtype=float).reshape(-1, 1)
        new = object.__new__(ResidualMoranMoments)
        new.__dict__.update(self.__dict__)
        Uq = self.U @ q
        quq = float((q.T @ Uq).item())
        cross = self.Q.T @ Uq
        new.Q = np.hstack([self.Q, q])
        new.UQ = np.hstack([self.UQ, Uq])
        new.tr_QUQ = self.tr_QUQ + quq
        new.norm_UQ = self.norm_UQ + float(np.sum(Uq * Uq))
        new.norm_QUQ = self.norm_QUQ + 2.0 * float(np.sum(cross * cross)) + quq**2
        return new


def normal_p_value(z: float, alternative: str = "greater") -> float:
    if alternative == "greater":
        return float(stats.norm.sf(z))
    if alternative == "two-sided":
        return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))
    raise ConfigurationError(f"unknown alternative {alternative!r}")


def moran_test_residuals(y, X, W, method: str = "permutation", alternative: str = "greater",
                         permutations: int = 999, seed=None) -> MoranResult:
    """Moran test on the residuals of least squares of ``y`` on ``[1, X]``.

    ``X`` may be ``None`` for an intercept-only model. ``seed`` feeds the
    permutation generator (ignored by the normal approximation).
    """
    if alternative not in ALTERNATIVES:
        raise ConfigurationError(f"unknown alternative {alternative!r}")
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    Wd = as_dense(W)
    if Wd.shape != (n, n):
        raise ConfigurationError(f"W is {Wd.shape}, data has n={n}")
    Q = design_basis(X, n)
    e = y - Q @ (Q.T @ y)
    I_obs = morans_i(e, Wd)

    if method == "normal":
        mom = ResidualMoranMoments(Wd, Q)
        mean, var = mom.moments()
        z = (I_obs - mean) / np.sqrt(var)
        return MoranResult(I_obs, mean, float(z), normal_p_value(z, alternative), "normal", alternative)

    if method != "permutation":
        raise ConfigurationError(f"unknown Moran method {method!r}")
    if permutations < 19:
        raise ConfigurationError(f"{permutations} permutations is too few (need >= 19)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    E = np.empty((permutations, n))
    for r in range(permutations):
        E[r] = e[rng.permutation(n)]
    scale = n / Wd.sum()
    I_perm = scale * np.einsum("ij,ij->i", E @ Wd.T, E) / float(e @ e)
    mean = float(I_perm.mean())
    sd = float(I_perm.std(ddof=1))
    z = (I_obs - mean) / sd if sd > 0 else 0.0
    upper = int(np.sum(I_perm >= I_obs))
    if alternative == "greater":
        p = (1 + upper) / (permutations + 1)
    else:
        lower = int(np.sum(I_perm <= I_obs))
        p = min(1.0, 2.0 * (1 + min(upper, lower)) / (permutations + 1))
    return MoranResult(I_obs, mean, float(z), float(p), f"permutation({permutations})", alternative)


def moran_panel_csv(rows: Sequence[tuple[str, str, float, float]]) -> str:
    """CSV ``model_id,stage,I,p`` with stage in {ols, filtered}."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model_id", "stage", "I", "p"])
    for model_id, stage, I, p in rows:
        if stage not in ("ols", "filtered"):
            raise ConfigurationError(f"unknown stage {stage!r}")
        writer.writerow([model_id, stage, f"{I:.10g}", f"{p:.10g}"])
    return buf.getvalue()
