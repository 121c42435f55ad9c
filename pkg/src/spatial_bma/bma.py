"""Zellner g-prior linear models and exact Bayesian model averaging.

A model is a covariate inclusion mask plus the index ``z`` of the active
eigenvector block. The intercept is always present and the eigenvectors of
the active block enter as ordinary regressors (they count towards the
dimension penalty), but only the covariate mask carries a prior.

Priors: flat on the intercept, 1/sigma on the scale, and
beta | sigma ~ N(0, g sigma^2 (X'X)^-1) on the centred slopes. Under these
the Bayes factor against the intercept-only model is available in closed
form and the slope posterior is multivariate t with n - 1 degrees of
freedom.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, EnumerationCapError

DEFAULT_ENUMERATION_CAP = 2**20
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class GPrior:
    kind: str = "uip"
    value: float | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ("uip", "bric", "fixed"):
            raise ConfigurationError(f"unknown g-prior {self.kind!r}")
        if kind == "fixed" and (self.value is None or not self.value > 0):
            raise ConfigurationError("fixed g-prior needs a positive value")

    def resolve(self, n: int, k: int) -> float:
        """UIP: g = n. BRIC: g = max(n, k^2) with k the candidate covariates."""
        if self.kind == "uip":
            return float(n)
        if self.kind == "bric":
            return float(max(n, k * k))
        return float(self.value)


@dataclass(frozen=True)
class ModelPrior:
    kind: str = "uniform"
    theta: float = 0.5

    def __post_init__(self):
        if self.kind not in ("uniform", "binomial"):
            raise ConfigurationError(f"unknown model prior {self.kind!r}")
        if not 0.0 < self.theta < 1.0:
            raise ConfigurationError(f"inclusion probability must be in (0, 1), got {self.theta}")

    def log_prior(self, n_included: int, k: int) -> float:
        # constant across weight matrices
        if self.kind == "uniform":
            return 0.0
        return n_included * math.log(self.theta) + (k - n_included) * math.log1p(-self.theta)


def model_prior(mask: Sequence[bool], prior: ModelPrior = ModelPrior()) -> float:
    mask = list(mask)
    return prior.log_prior(int(sum(bool(m) for m in mask)), len(mask))


@dataclass(frozen=True)
class FittedModel:
    log_ml: float
    mean: np.ndarray  # posterior means of the slopes, design column order
    sd: np.ndarray
    ls: np.ndarray  # least-squares slopes
    r2: float
    sigma2: float  # E[sigma^2 | y]
    df: int
    t_scale: np.ndarray  # marginal t scale per slope

    @property
    def p(self) -> int:
        return self.mean.size


def _centered(y, D):
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if D is None:
        D = np.empty((n, 0))
    D = np.asarray(D, dtype=float).reshape(n, -1)
    return y - y.mean(), D - D.mean(axis=0), n


def _least_squares(yc, Dc):
    """Slopes and R^2 via QR; ``None`` on rank deficiency."""
    p = Dc.shape[1]
    yy = float(yc @ yc)
    if p == 0:
        return np.empty(0), 0.0, None
    Q, R = np.linalg.qr(Dc)
    d = np.abs(np.diag(R))
    if d.min() <= _RANK_TOL * max(1.0, d.max()):
        return None
    qy = Q.T @ yc
    beta = np.linalg.solve(R, qy)
    r2 = float(qy @ qy) / yy if yy > 0 else 0.0
    return beta, min(r2, 1.0), R


def _log_ml(n: int, p: int, r2: float, g: float) -> float:
    if p == 0:
        return 0.0
    return -0.5 * p * math.log1p(g) - 0.5 * (n - 1) * math.log1p(-g / (1.0 + g) * r2)


def log_marginal_likelihood(y, D, g: float) -> float:
    """Log Bayes factor of the model with slopes on ``D`` against the null.

    Returns ``-inf`` for rank-deficient designs or when fewer than three
    residual degrees of freedom remain.
    """
    yc, Dc, n = _centered(y, D)
    p = Dc.shape[1]
    if p >= n - 2:
        return -math.inf
    fit = _least_squares(yc, Dc)
    if fit is None:
        return -math.inf
    return _log_ml(n, p, fit[1], g)


def posterior_moments(y, D, g: float) -> FittedModel | None:
    """Posterior of the slopes on ``D``; ``None`` when the model is excluded."""
    yc, Dc, n = _centered(y, D)
    p = Dc.shape[1]
    if p >= n - 2:
        return None
    fit = _least_squares(yc, Dc)
    if fit is None:
        return None
    beta, r2, R = fit
    shrink = g / (1.0 + g)
    S = float(yc @ yc) * (1.0 - shrink * r2)
    sigma2 = S / (n - 3)
    if p:
        Rinv = np.linalg.solve(R, np.eye(p))
        diag_xtx_inv = np.sum(Rinv * Rinv, axis=1)
    else:
        diag_xtx_inv = np.empty(0)
    var = shrink * sigma2 * diag_xtx_inv
    t_scale = np.sqrt(shrink * S / (n - 1) * diag_xtx_inv)
    return FittedModel(_log_ml(n, p, r2, g), shrink * beta, np.sqrt(var), beta, r2,
                       sigma2, n - 1, t_scale)


class ModelSpace:
    """Joint space of covariate masks and eigenvector blocks for one dataset.

    ``filters`` holds one ``n x m_z`` array per weight matrix; an empty
    sequence gives plain (non-spatial) BMA, which is treated internally as a
    single block without eigenvectors. Masks are integers with bit ``l`` set
    when covariate ``l`` is included.
    """

    def __init__(self, y, X, filters=(), g: float | GPrior = GPrior("uip"),
                 prior: ModelPrior = ModelPrior(), names: Sequence[str] | None = None,
                 matrix_names: Sequence[str] | None = None):
        y = np.asarray(y, dtype=float).ravel()
        n = y.size
        X = np.asarray(X, dtype=float).reshape(n, -1)
        self.n, self.k = n, X.shape[1]
        self.yc = y - y.mean()
        self.Xc = X - X.mean(axis=0)
        blocks = [getattr(f, "vectors", f) for f in filters]
        self.spatial = bool(blocks)
        if not blocks:
            blocks = [np.empty((n, 0))]
        self.blocks = [np.asarray(b, dtype=float).reshape(n, -1) for b in blocks]
        self.blocks = [b - b.mean(axis=0) for b in self.blocks]
        self.Z = len(self.blocks)
        self.g = g.resolve(n, self.k) if isinstance(g, GPrior) else float(g)
        if not self.g > 0:
            raise ConfigurationError("g must be positive")
        self.prior = prior
        self.names = list(names) if names is not None else [f"x{i + 1}" for i in range(self.k)]
        if len(self.names) != self.k:
            raise ConfigurationError("covariate names do not match X")
        if matrix_names is None:
            matrix_names = [getattr(f, "matrix_id", "") or f"W{z + 1}" for z, f in enumerate(filters)]
        self.matrix_names = list(matrix_names)
        self._log_ml: dict[tuple[int, int], float] = {}
        self._fits: dict[tuple[int, int], FittedModel | None] = {}
        self._bits = [1 << l for l in range(self.k)]

    def included(self, mask: int) -> list[int]:
        return [l for l in range(self.k) if mask & self._bits[l]]

    def design(self, mask: int, z: int) -> np.ndarray:
        return np.hstack([self.Xc[:, self.included(mask)], self.blocks[z]])

    def log_ml(self, mask: int, z: int) -> float:
        key = (mask, z)
        val = self._log_ml.get(key)
        if val is None:
            D = self.design(mask, z)
            p = D.shape[1]
            if p >= self.n - 2:
                val = -math.inf
            else:
                fit = _least_squares(self.yc, D)
                val = -math.inf if fit is None else _log_ml(self.n, p, fit[1], self.g)
            self._log_ml[key] = val
        return val

    def log_prior(self, mask: int) -> float:
        return self.prior.log_prior(bin(mask).count("1"), self.k)

    def log_post(self, mask: int, z: int) -> float:
        return self.log_ml(mask, z) + self.log_prior(mask)

    def fit(self, mask: int, z: int) -> FittedModel | None:
        key = (mask, z)
        if key not in self._fits:
            self._fits[key] = posterior_moments(self.yc, self.design(mask, z), self.g)
        return self._fits[key]

    @property
    def n_models(self) -> int:
        return (2**self.k) * self.Z

    def mask_from_bools(self, flags: Sequence[bool]) -> int:
        return sum(self._bits[l] for l, f in enumerate(flags) if f)


@dataclass(frozen=True)
class PosteriorSummary:
    names: tuple[str, ...]
    pip: np.ndarray
    post_mean: np.ndarray
    post_sd: np.ndarray
    cond_mean: np.ndarray
    cond_sd: np.ndarray
    matrix_names: tuple[str, ...]
    matrix_pip: np.ndarray
    method: str
    n_models: int

    def order(self) -> list[int]:
        """Descending PIP, ties by variable name."""
        return sorted(range(len(self.names)), key=lambda i: (-self.pip[i], self.names[i]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", "pip", "post_mean", "post_sd", "cond_mean", "cond_sd"])
        for i in self.order():
            w.writerow([self.names[i]] + [_fmt(v) for v in (
                self.pip[i], self.post_mean[i], self.post_sd[i], self.cond_mean[i], self.cond_sd[i])])
        return buf.getvalue()

    def matrix_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["matrix", "posterior_share"])
        for name, share in zip(self.matrix_names, self.matrix_pip):
            w.writerow([name, _fmt(share)])
        return buf.getvalue()

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "n_models": self.n_models,
            "variables": {n: {"pip": float(p), "post_mean": float(m), "post_sd": float(s)}
                          for n, p, m, s in zip(self.names, self.pip, self.post_mean, self.post_sd)},
            "matrices": {n: float(s) for n, s in zip(self.matrix_names, self.matrix_pip)},
        }


def _fmt(x: float) -> str:
    return f"{float(x):.10f}"


def summarize(space: ModelSpace, models: Sequence[tuple[int, int]], weights, method: str) -> PosteriorSummary:
    """Mix per-model posteriors with the given (unnormalised) model weights.

    Excluded covariates contribute a point mass at zero, so ``post_mean`` and
    ``post_sd`` are unconditional; ``cond_*`` condition on inclusion.
    """
    w = np.asarray(weights, dtype=float)
    total = math.fsum(w)
    if not total > 0:
        raise ConfigurationError("model weights sum to zero")
    w = w / total
    k = space.k
    pip = np.zeros(k)
    m1 = np.zeros(k)
    m2 = np.zeros(k)
    zshare = np.zeros(space.Z)
    for (mask, z), wt in zip(models, w):
        if wt == 0.0:
            continue
        fit = space.fit(mask, z)
        if fit is None:
            continue
        inc = space.included(mask)
        zshare[z] += wt
        if inc:
            mu = fit.mean[: len(inc)]
            sd = fit.sd[: len(inc)]
            pip[inc] += wt
            m1[inc] += wt * mu
            m2[inc] += wt * (sd**2 + mu**2)
    var = np.maximum(m2 - m1**2, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cmean = np.where(pip > 0, m1 / pip, 0.0)
        cvar = np.where(pip > 0, m2 / pip - cmean**2, 0.0)
    return PosteriorSummary(
        tuple(space.names), np.clip(pip, 0.0, 1.0), m1, np.sqrt(var), cmean,
        np.sqrt(np.maximum(cvar, 0.0)),
        tuple(space.matrix_names) if space.spatial else (), zshare if space.spatial else np.empty(0),
        method, len(models),
    )


def model_posterior(space: ModelSpace, cap: int = DEFAULT_ENUMERATION_CAP):
    """All models with their normalised posterior probabilities."""
    if space.n_models > cap:
        raise EnumerationCapError(space.n_models, cap)
    models = [(mask, z) for z in range(space.Z) for mask in range(2**space.k)]
    lp = np.array([space.log_post(mask, z) for mask, z in models])
    finite = np.isfinite(lp)
    probs = np.zeros(lp.size)
    if finite.any():
        probs[finite] = np.exp(lp[finite] - lp[finite].max())
        probs /= math.fsum(probs)
    return models, probs


def exact_bma(space_or_y, X=None, filters=(), g: float | GPrior = GPrior("uip"),
              prior: ModelPrior = ModelPrior(), names=None,
              cap: int = DEFAULT_ENUMERATION_CAP) -> PosteriorSummary:
    """Enumerate every (mask, z) model and average over them exactly."""
    if isinstance(space_or_y, ModelSpace):
        space = space_or_y
    else:
        space = ModelSpace(space_or_y, X, filters, g, prior, names)
    models, probs = model_posterior(space, cap)
    return summarize(space, models, probs, "exact")
