"""MC3 sampler over covariate masks and weight-matrix indices.

Each iteration makes two Metropolis-Hastings moves: flip the inclusion of
one covariate chosen uniformly, then propose one of the other eigenvector
blocks uniformly. Both proposals are symmetric, so acceptance depends only
on the ratio of unnormalised posteriors.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bma import GPrior, ModelPrior, ModelSpace, PosteriorSummary, summarize
from .errors import ConfigurationError

log = logging.getLogger(__name__)

STATISTICS = ("frequency", "renormalized-best")
_BLOCK = 65536


@dataclass(frozen=True)
class ModelState:
    mask: int
    z: int


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 3_000_000
    burn_in: int = 300_000
    seed: int = 0
    gprior: GPrior = GPrior("uip")
    prior: ModelPrior = ModelPrior()
    statistic: str = "frequency"
    best_models: int = 10_000
    density_draws: int = 5_000
    progress_every: int = 100_000

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigurationError(f"burn-in {self.burn_in} must be below iterations {self.iterations}")
        if self.statistic not in STATISTICS:
            raise ConfigurationError(f"unknown statistic {self.statistic!r}")
        if self.best_models < 1:
            raise ConfigurationError("best_models must be positive")

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "seed": self.seed,
            "gprior": self.gprior.kind if self.gprior.kind != "fixed" else self.gprior.value,
            "model_prior": {"kind": self.prior.kind, "theta": self.prior.theta},
            "statistic": self.statistic,
            "best_models": self.best_models,
            "density_draws": self.density_draws,
        }


@dataclass
class ChainTrace:
    """Post-burn-in tallies of one or more chains."""

    k: int
    Z: int
    visits: dict[tuple[int, int], int] = field(default_factory=dict)
    proposed: list[int] = field(default_factory=lambda: [0, 0])  # covariate, matrix
    accepted: list[int] = field(default_factory=lambda: [0, 0])
    log_post: dict[tuple[int, int], float] = field(default_factory=dict)
    draws: list[tuple[int, int]] = field(default_factory=list)
    kept: int = 0
    seeds: list[int] = field(default_factory=list)

    @property
    def acceptance(self) -> tuple[float, float]:
        return tuple(a / p if p else float("nan") for a, p in zip(self.accepted, self.proposed))

    def covariate_counts(self) -> np.ndarray:
        out = np.zeros(self.k, dtype=np.int64)
        for (mask, _), c in self.visits.items():
            for l in range(self.k):
                if mask >> l & 1:
                    out[l] += c
        return out

    def matrix_counts(self) -> np.ndarray:
        out = np.zeros(self.Z, dtype=np.int64)
        for (_, z), c in self.visits.items():
            out[z] += c
        return out

    def best(self, L: int) -> list[tuple[int, int]]:
        """The ``L`` visited models with the highest posterior, ties by key."""
        return heapq.nsmallest(L, self.visits, key=lambda m: (-self.log_post[m], m))

    def merge(self, other: "ChainTrace") -> "ChainTrace":
        if (self.k, self.Z) != (other.k, other.Z):
            raise ConfigurationError("cannot merge traces of different model spaces")
        visits = dict(self.visits)
        for m, c in other.visits.items():
            visits[m] = visits.get(m, 0) + c
        return ChainTrace(
            self.k, self.Z, visits,
            [a + b for a, b in zip(self.proposed, other.proposed)],
            [a + b for a, b in zip(self.accepted, other.accepted)],
            self.log_post | other.log_post,
            self.draws + other.draws,
            self.kept + other.kept,
            self.seeds + other.seeds,
        )


def _accept(delta: float, u: float) -> bool:
    """Metropolis test with ``u`` uniform on [0, 1)."""
    return delta >= 0.0 or u < math.exp(delta)


def step_covariate(space: ModelSpace, state: ModelState, rng: np.random.Generator) -> ModelState:
    """Flip one uniformly chosen covariate and accept or reject."""
    if space.k == 0:
        return state
    l = int(rng.integers(space.k))
    u = float(rng.random())
    new = ModelState(state.mask ^ (1 << l), state.z)
    delta = space.log_post(new.mask, new.z) - space.log_post(state.mask, state.z)
    return new if _accept(delta, u) else state


def step_matrix(space: ModelSpace, state: ModelState, rng: np.random.Generator) -> ModelState:
    """Propose one of the other weight matrices uniformly and accept or reject."""
    if space.Z < 2:
        return state
    j = int(rng.integers(space.Z - 1))
    u = float(rng.random())
    z = j + (j >= state.z)
    delta = space.log_post(state.mask, z) - space.log_post(state.mask, state.z)
    return ModelState(state.mask, z) if _accept(delta, u) else state


def initial_state(space: ModelSpace, rng: np.random.Generator) -> ModelState:
    """Empty covariate set with a uniformly drawn weight matrix."""
    return ModelState(0, int(rng.integers(space.Z)))


def run_chain(space: ModelSpace, config: ChainConfig) -> ChainTrace:
    """Run one chain; the same seed gives an identical trace.

    Random numbers come from a counter-based Philox stream, drawn in blocks
    for speed; the moves are the same as :func:`step_covariate` followed by
    :func:`step_matrix`. Log posteriors are cached per model.
    """
    rng = np.random.Generator(np.random.Philox(config.seed))
    state = initial_state(space, rng)
    k, Z = space.k, space.Z
    bits = [1 << l for l in range(k)]
    trace = ChainTrace(k, Z, seeds=[config.seed])
    visits = trace.visits
    post = trace.log_post
    lp_of = space.log_post

    def lp(key):
        v = post.get(key)
        if v is None:
            v = lp_of(*key)
            post[key] = v
        return v

    mask, z = state.mask, state.z
    cur = lp((mask, z))
    n_kept = config.iterations - config.burn_in
    thin = max(1, n_kept // max(1, config.density_draws))
    prop = [0, 0]
    acc = [0, 0]
    exp = math.exp
    t = 0
    while t < config.iterations:
        B = min(_BLOCK, config.iterations - t)
        ls = rng.integers(k, size=B).tolist() if k else [0] * B
        u1 = rng.random(B).tolist()
        js = rng.integers(Z - 1, size=B).tolist() if Z > 1 else [0] * B
        u2 = rng.random(B).tolist()
        for i in range(B):
            if k:
                key = (mask ^ bits[ls[i]], z)
                new = lp(key)
                d = new - cur
                prop[0] += 1
                if d >= 0.0 or u1[i] < exp(d):
                    mask, cur = key[0], new
                    acc[0] += 1
            if Z > 1:
                j = js[i]
                key = (mask, j + (j >= z))
                new = lp(key)
                d = new - cur
                prop[1] += 1
                if d >= 0.0 or u2[i] < exp(d):
                    z, cur = key[1], new
                    acc[1] += 1
            if t >= config.burn_in:
                key = (mask, z)
                visits[key] = visits.get(key, 0) + 1
                if (t - config.burn_in) % thin == 0:
                    trace.draws.append(key)
            t += 1
            if config.progress_every and t % config.progress_every == 0:
                log.info("iteration %d/%d, %d distinct models", t, config.iterations, len(post))
    trace.proposed = prop
    trace.accepted = acc
    trace.kept = n_kept
    return trace


def chain_summary(space: ModelSpace, trace: ChainTrace, statistic: str = "frequency",
                  best_models: int = 10_000) -> PosteriorSummary:
    """Posterior summary from visit frequencies or from the renormalised best models."""
    if statistic == "frequency":
        models = sorted(trace.visits)
        weights = [trace.visits[m] for m in models]
        return summarize(space, models, weights, "mc3-frequency")
    if statistic == "renormalized-best":
        models = trace.best(best_models)
        lp = np.array([trace.log_post[m] for m in models])
        finite = np.isfinite(lp)
        models = [m for m, f in zip(models, finite) if f]
        lp = lp[finite]
        return summarize(space, models, np.exp(lp - lp.max()), "mc3-renormalized")
    raise ConfigurationError(f"unknown statistic {statistic!r}")


def coefficient_draws(space: ModelSpace, trace: ChainTrace, variable: int, seed: int = 0) -> np.ndarray:
    """Draws from the posterior of one coefficient conditional on inclusion.

    For every thinned post-burn-in state that includes ``variable`` one value
    is drawn from that model's marginal t posterior.
    """
    rng = np.random.Generator(np.random.Philox(seed).jumped())
    out = []
    for mask, z in trace.draws:
        if not mask >> variable & 1:
            continue
        fit = space.fit(mask, z)
        if fit is None:
            continue
        pos = bin(mask & ((1 << variable) - 1)).count("1")
        out.append(fit.mean[pos] + fit.t_scale[pos] * rng.standard_t(fit.df))
    return np.array(out)
