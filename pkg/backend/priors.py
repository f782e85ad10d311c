"""
Prior densities for the velocity of a missing patch.

Class 1 (a counter on the segment has a reading that minute): Gaussian
around the counter velocity truncated to [u_min, u_max].
Class 2 (no usable counter reading): flat up to the breakpoint, then a
linear ramp down to zero at u_max.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import ndtr

from config import (
    CLASS2_BREAKPOINT_KMH,
    MIN_TRUNCATED_MASS,
    QUADRATURE_NODES,
    SIGMA_A_KMH,
    U_MIN_KMH,
)
from velocity_field import PatchClass

logger = logging.getLogger(__name__)

CLASS1 = 'class1'
CLASS2 = 'class2'


def _truncated_mass(v_tc, sigma, u_min, u_max):
    """Normal mass on [u_min, u_max], taken from the nearer tail for precision."""
    a = (u_min - v_tc) / sigma
    b = (u_max - v_tc) / sigma
    if a > 0:
        return float(ndtr(-a) - ndtr(-b))
    return float(ndtr(b) - ndtr(a))


def class2_branch_masses(u_min, u_max, breakpoint=CLASS2_BREAKPOINT_KMH):
    """Mass of the flat part and of the ramp; exact for Fraction inputs."""
    denom = u_max + breakpoint - 2 * u_min
    flat = 2 * (breakpoint - u_min) / denom
    ramp = (u_max - breakpoint) / denom
    return flat, ramp


@dataclass(frozen=True)
class PriorSpec:
    kind: str
    u_min: float
    u_max: float
    v_tc: Optional[float] = None
    sigma_a: float = SIGMA_A_KMH
    breakpoint: float = CLASS2_BREAKPOINT_KMH

    def __post_init__(self):
        if self.kind not in (CLASS1, CLASS2):
            raise ValueError(f"unknown prior kind: {self.kind}")
        if not (self.u_min < self.u_max):
            raise ValueError(f"prior support needs u_min < u_max, got [{self.u_min}, {self.u_max}]")
        if self.kind == CLASS1 and self.v_tc is None:
            raise ValueError("class1 prior needs the counter velocity v_tc")
        if self.sigma_a <= 0:
            raise ValueError(f"sigma_a must be > 0, got {self.sigma_a}")

    @classmethod
    def class1(cls, v_tc, u_max, u_min=U_MIN_KMH, sigma_a=SIGMA_A_KMH):
        return cls(CLASS1, u_min, max(u_max, u_min + 1), v_tc=v_tc, sigma_a=sigma_a)

    @classmethod
    def class2(cls, u_max, u_min=U_MIN_KMH, breakpoint=CLASS2_BREAKPOINT_KMH):
        return cls(CLASS2, u_min, max(u_max, u_min + 1), breakpoint=breakpoint)

    @property
    def normalizer(self):
        if self.kind != CLASS1:
            return 1.0
        return _truncated_mass(self.v_tc, self.sigma_a, self.u_min, self.u_max)

    @property
    def uniform_fallback(self):
        """Support too far from the counter velocity (class 1) or no ramp/flat split (class 2)."""
        if self.kind == CLASS1:
            return self.normalizer < MIN_TRUNCATED_MASS
        return not (self.u_min < self.breakpoint < self.u_max)


def prior_pdf(spec, u):
    """
    Prior density at u (scalar or array); zero outside [u_min, u_max].

    A degenerate prior (see PriorSpec.uniform_fallback) is uniform on its support.
    """
    u = np.asarray(u, dtype=float)
    inside = (u >= spec.u_min) & (u <= spec.u_max)
    width = spec.u_max - spec.u_min

    if spec.uniform_fallback:
        density = np.full(u.shape, 1.0 / width)
    elif spec.kind == CLASS1:
        z = (u - spec.v_tc) / spec.sigma_a
        density = np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * spec.sigma_a * spec.normalizer)
    else:
        denom = spec.u_max + spec.breakpoint - 2 * spec.u_min
        flat = 2.0 / denom
        ramp = 2.0 * (spec.u_max - u) / ((spec.u_max - spec.breakpoint) * denom)
        density = np.where(u <= spec.breakpoint, flat, ramp)

    density = np.where(inside, density, 0.0)
    return density if density.ndim else float(density)


def quadrature_weights(spec, nodes=QUADRATURE_NODES):
    """
    Nodes and weights with sum(weights * g(nodes)) ~ E_prior[g].

    Uniform trapezoid nodes over the support plus the class 2 breakpoint, with
    weights rescaled so they sum to one.
    """
    grid = np.linspace(spec.u_min, spec.u_max, nodes)
    if spec.kind == CLASS2 and spec.u_min < spec.breakpoint < spec.u_max:
        grid = np.union1d(grid, [spec.breakpoint])

    density = prior_pdf(spec, grid)
    spacing = np.diff(grid)
    trap = np.zeros_like(grid)
    trap[:-1] += spacing / 2
    trap[1:] += spacing / 2
    weights = density * trap
    mass = trapezoid(density, grid)
    if mass <= 0:
        raise ValueError(f"prior on [{spec.u_min}, {spec.u_max}] has no mass on its nodes")
    return grid, weights / mass


def quadrature(spec, g, nodes=QUADRATURE_NODES):
    """
    E_prior[g(u)] by normalised trapezoid quadrature.

    Args:
        spec: PriorSpec
        g: Vectorised callable; g(nodes) may return shape (..., K) for K nodes

    Returns:
        float or np.ndarray with g's leading shape
    """
    grid, weights = quadrature_weights(spec, nodes)
    values = np.asarray(g(grid), dtype=float)
    result = values @ weights
    return float(result) if np.ndim(result) == 0 else result


def build_priors(classes, bounds):
    """
    One PriorSpec per missing patch of a window.

    Args:
        classes: SegmentClassMap for the window
        bounds: (M, T) upper bounds from interpolate_bounds

    Returns:
        dict {(segment, column): PriorSpec}
    """
    priors = {}
    fallbacks = 0
    for m, t in zip(*np.nonzero(classes.kinds != PatchClass.OBSERVED)):
        u_max = float(bounds[m, t])
        if classes.kinds[m, t] == PatchClass.CLASS1:
            spec = PriorSpec.class1(float(classes.counter_velocity[m, t]), u_max)
        else:
            spec = PriorSpec.class2(u_max)
        fallbacks += spec.uniform_fallback
        priors[(int(m), int(t))] = spec
    if fallbacks:
        logger.debug(f"{fallbacks} prior(s) fell back to uniform on their support")
    return priors
