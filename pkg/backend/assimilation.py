"""
Particle-filter assimilation over a discrete scenario lattice.

Observed patches score a simulated velocity with the product of a percentage
and an absolute Gaussian kernel. Missing patches average the same kernels
over the patch's prior. Per minute, the summed log-likelihood becomes a
weight 1 / l^2, the weights are normalised and the particles resampled.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from config import (
    LOGLIK_FLOOR,
    REJUVENATION_PROBABILITY,
    SIGMA_A_KMH,
    SIGMA_P_PERCENT,
    derive_seed,
)
from priors import quadrature_weights
from velocity_field import PatchClass, PatchGrid

logger = logging.getLogger(__name__)

_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma_p: float = SIGMA_P_PERCENT
    sigma_a: float = SIGMA_A_KMH

    def __post_init__(self):
        if self.sigma_p <= 0 or self.sigma_a <= 0:
            raise ValueError(f"sigma_p and sigma_a must be > 0, got {self.sigma_p}, {self.sigma_a}")


@dataclass
class ScenarioSet:
    """
    Scenario parameters and their densified simulated grids.

    grids has shape (S, M, T); column t is absolute minute first_minute + t.
    shape is the lattice shape used by rejuvenation (None: no lattice moves).
    """
    params: List
    grids: np.ndarray
    first_minute: int = 0
    shape: Optional[Tuple[int, ...]] = None
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.grids = np.asarray(self.grids, dtype=float)
        if self.grids.ndim != 3:
            raise ValueError(f"scenario grids must be (S, M, T), got shape {self.grids.shape}")
        if len(self.params) != self.grids.shape[0]:
            raise ValueError(f"{len(self.params)} parameter sets for {self.grids.shape[0]} grids")
        if self.shape is not None and int(np.prod(self.shape)) != len(self.params):
            raise ValueError(f"lattice shape {self.shape} does not match {len(self.params)} scenarios")

    def __len__(self):
        return len(self.params)

    @property
    def minutes(self):
        return self.grids.shape[2]

    def window(self, start_minute, stop_minute):
        lo = start_minute - self.first_minute
        hi = stop_minute - self.first_minute
        if lo < 0 or hi > self.minutes or lo > hi:
            raise ValueError(
                f"scenario grids cover minutes [{self.first_minute}, {self.first_minute + self.minutes}), "
                f"window asks for [{start_minute}, {stop_minute})"
            )
        return ScenarioSet(self.params, self.grids[:, :, lo:hi], start_minute, self.shape, self.warnings)

    def grid(self, index):
        return PatchGrid(self.grids[index].copy(), self.first_minute)


@dataclass
class ParticleEnsemble:
    """Particle count per scenario index."""
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if (self.counts < 0).any():
            raise ValueError("particle counts must be >= 0")

    @classmethod
    def uniform(cls, scenarios, particles=None):
        """One particle per scenario, or `particles` spread as evenly as possible."""
        if particles is None:
            return cls(np.ones(scenarios, dtype=np.int64))
        base, extra = divmod(particles, scenarios)
        counts = np.full(scenarios, base, dtype=np.int64)
        counts[:extra] += 1
        return cls(counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def marginal(self, values):
        """Particle share per distinct value of one parameter (values aligned with scenarios)."""
        values = np.asarray(values)
        levels = np.unique(values)
        share = np.array([self.counts[values == v].sum() for v in levels], dtype=float)
        return levels, share / max(self.total, 1)


@dataclass
class Posterior:
    minutes: List[int]
    weights: List[np.ndarray]
    ensemble: ParticleEnsemble
    map_index: int
    map_params: object
    ess: List[float] = field(default_factory=list)


def gaussian_kernel(e, sigma):
    """(1 / sqrt(2 pi sigma^2)) exp(-e^2 / 2 sigma^2)"""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    e = np.asarray(e, dtype=float)
    value = np.exp(-e * e / (2 * sigma * sigma)) / np.sqrt(2 * np.pi * sigma * sigma)
    return float(value) if value.ndim == 0 else value


def _log_kernel(e, sigma):
    return -e * e / (2 * sigma * sigma) - 0.5 * np.log(2 * np.pi * sigma * sigma)


def segment_loglik_observed(u_obs, u_sim, cfg=LikelihoodConfig()):
    """
    Log-likelihood of simulated velocities against an observed patch velocity.

    Args:
        u_obs: Observed velocity (km/h), > 0
        u_sim: Simulated velocity, scalar or array over scenarios
        cfg: LikelihoodConfig

    Returns:
        float or np.ndarray shaped like u_sim
    """
    if not u_obs > 0:
        raise ValueError(f"observed velocity must be > 0 km/h, got {u_obs}")
    u_sim = np.asarray(u_sim, dtype=float)
    e_abs = u_sim - u_obs
    e_pct = 100.0 * e_abs / u_obs
    value = _log_kernel(e_pct, cfg.sigma_p) + _log_kernel(e_abs, cfg.sigma_a)
    return float(value) if value.ndim == 0 else value


def segment_loglik_missing(spec, u_sim, cfg=LikelihoodConfig()):
    """
    Log-likelihood for a missing patch: each kernel is averaged over the prior,
    with the integration variable u in place of the observation.
    """
    nodes, weights = quadrature_weights(spec)
    u_sim = np.asarray(u_sim, dtype=float)
    diff = u_sim[..., None] - nodes
    lp = gaussian_kernel(100.0 * diff / nodes, cfg.sigma_p) @ weights
    la = gaussian_kernel(diff, cfg.sigma_a) @ weights
    value = np.log(np.maximum(lp, _TINY)) + np.log(np.maximum(la, _TINY))
    return float(value) if np.ndim(value) == 0 else value


def joint_logweight(logliks):
    """
    Weight 1 / l^2 of the summed per-segment log-likelihood l.

    Args:
        logliks: Per-segment log-likelihoods on the last axis (..., segments)
    """
    logliks = np.asarray(logliks, dtype=float)
    if logliks.shape[-1] == 0:
        raise ValueError("joint weight needs at least one segment")
    total = logliks.sum(axis=-1)
    magnitude = np.maximum(np.abs(total), LOGLIK_FLOOR)
    value = 1.0 / (magnitude * magnitude)
    return float(value) if value.ndim == 0 else value


def normalize_weights(w):
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        raise ValueError("no weights to normalise")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and >= 0")
    total = w.sum()
    if total <= 0:
        raise ValueError("all weights are zero")
    return w / total


def effective_sample_size(w):
    return float(1.0 / np.sum(np.square(w)))


def _rejuvenate(rng, idx, shape, probability):
    """Move each particle with the given probability one lattice step along one dimension."""
    hop = rng.random(idx.size) < probability
    k = int(hop.sum())
    if k == 0:
        return idx
    dims = rng.integers(0, len(shape), k)
    steps = rng.integers(0, 2, k) * 2 - 1
    coords = np.array(np.unravel_index(idx[hop], shape))
    cols = np.arange(k)
    coords[dims, cols] = np.clip(coords[dims, cols] + steps, 0, np.asarray(shape)[dims] - 1)
    idx = idx.copy()
    idx[hop] = np.ravel_multi_index(tuple(coords), shape)
    return idx


def resample(ens, w, seed, shape=None, rejuvenation=REJUVENATION_PROBABILITY):
    """
    Systematic resampling of the ensemble's N particles, then rejuvenation.

    Every particle carries its scenario's weight, so scenario n is drawn with
    probability proportional to counts[n] * w[n]. If no particle sits on a
    scenario with positive weight, the draw falls back to w alone.

    Args:
        ens: ParticleEnsemble
        w: Normalised weights over scenarios
        seed: Seed for this resampling step
        shape: Lattice shape for rejuvenation moves (None disables them)
        rejuvenation: Per-particle hop probability
    """
    w = np.asarray(w, dtype=float)
    if w.size != ens.counts.size:
        raise ValueError(f"{w.size} weights for {ens.counts.size} scenarios")
    n = ens.total
    if n == 0:
        return ParticleEnsemble(ens.counts.copy())

    mass = ens.counts * w
    if mass.sum() <= 0:
        logger.warning("All particles sit on zero-weight scenarios; resampling from the weights alone")
        mass = w
    probs = mass / mass.sum()

    rng = np.random.default_rng(seed)
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(probs)
    cumulative[-1] = 1.0
    idx = np.minimum(np.searchsorted(cumulative, positions, side='right'), w.size - 1)

    if shape is not None and rejuvenation > 0:
        idx = _rejuvenate(rng, idx, shape, rejuvenation)

    return ParticleEnsemble(np.bincount(idx, minlength=w.size))


def map_index(ens, scenarios):
    """Index of the most populated scenario; ties go to the smallest (p_bn, p, q, r)."""
    if ens.total < 1:
        raise ValueError("empty particle ensemble")
    best = ens.counts.max()
    candidates = np.flatnonzero(ens.counts == best)
    return int(min(candidates, key=lambda i: scenarios.params[i]))


def map_estimate(ens, scenarios):
    return scenarios.params[map_index(ens, scenarios)]


def minute_logliks(obs_column, kinds_column, priors, sims, t, cfg=LikelihoodConfig()):
    """
    Per-segment log-likelihoods of every scenario for one minute.

    Args:
        obs_column: (M,) observed velocities, NaN when missing
        kinds_column: (M,) PatchClass codes
        priors: {(segment, column): PriorSpec} for missing patches
        sims: (S, M) simulated velocities for the minute
        t: Column index used to look up priors

    Returns:
        np.ndarray (S, K) for the K patches that could be scored
    """
    columns = []
    for m, kind in enumerate(kinds_column):
        if kind == PatchClass.OBSERVED:
            columns.append(segment_loglik_observed(obs_column[m], sims[:, m], cfg))
            continue
        spec = priors.get((m, t)) if priors else None
        if spec is not None:
            columns.append(segment_loglik_missing(spec, sims[:, m], cfg))
    if not columns:
        return np.zeros((sims.shape[0], 0))
    return np.stack(columns, axis=1)


def assimilate_window(obs, classes, priors, scenarios, ens, seed,
                      cfg=LikelihoodConfig(), rejuvenation=REJUVENATION_PROBABILITY):
    """
    Filter one observation window minute by minute.

    Args:
        obs: PatchGrid window
        classes: SegmentClassMap for the window
        priors: {(segment, column): PriorSpec} for its missing patches
        scenarios: ScenarioSet covering the window's minutes
        ens: ParticleEnsemble entering the window
        seed: Base seed; minute t resamples with derive_seed(seed, t)

    Returns:
        Posterior
    """
    sims = scenarios.window(obs.first_minute, obs.first_minute + obs.minutes).grids
    if sims.shape[1] != obs.segments:
        raise ValueError(f"scenario grids have {sims.shape[1]} segments, observations {obs.segments}")

    minutes, weights, ess = [], [], []
    for t in range(obs.minutes):
        minute = obs.first_minute + t
        logliks = minute_logliks(obs.values[:, t], classes.kinds[:, t], priors, sims[:, :, t], t, cfg)
        if logliks.shape[1] == 0:
            logger.debug(f"minute {minute}: no scored patch, weights skipped")
            continue
        w = normalize_weights(joint_logweight(logliks))
        ens = resample(ens, w, derive_seed(seed, minute), scenarios.shape, rejuvenation)
        minutes.append(minute)
        weights.append(w)
        ess.append(effective_sample_size(w))
        logger.debug(f"minute {minute}: ESS={ess[-1]:.1f} of {w.size}")

    best = map_index(ens, scenarios)
    return Posterior(minutes, weights, ens, best, scenarios.params[best], ess)
