"""Uniform priors over constrained parameter supports.

Two constrained supports need a reparameterisation to be sampled uniformly:
ordered extra-neurite diffusivities (``D_e_perp <= D_e_par``) and signal
fractions on the simplex (``f_n + f_s <= 1``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .forward_models import ParameterSpace

__all__ = ["CONSTRAINTS", "PriorSpec", "from_unit_cube", "sample_prior", "in_support", "log_prior"]

CONSTRAINTS = ("none", "ordered_diffusivities", "simplex_fractions")
_DEFAULT_CONSTRAINT = {
    "ball_stick": "none",
    "standard_model": "ordered_diffusivities",
    "extended_sandi": "simplex_fractions",
}
# boundary round-off allowance for the ordering constraint
_ORDER_TOL = 1e-12


@dataclass(frozen=True)
class PriorSpec:
    space: ParameterSpace
    constraint: str = "none"

    def __post_init__(self):
        if self.constraint not in CONSTRAINTS:
            raise ValidationError(f"unknown constraint {self.constraint!r}")
        expected = _DEFAULT_CONSTRAINT.get(self.space.model_id)
        if expected is not None and expected != self.constraint:
            raise ValidationError(
                f"model {self.space.model_id} requires constraint {expected!r}, got {self.constraint!r}"
            )
        if self.constraint == "ordered_diffusivities":
            i, j = self._ordered_idx
            if (self.space.lower[i], self.space.upper[i]) != (self.space.lower[j], self.space.upper[j]):
                raise ValidationError("ordered diffusivities must share prior bounds")

    @classmethod
    def for_space(cls, space: ParameterSpace) -> "PriorSpec":
        return cls(space, _DEFAULT_CONSTRAINT.get(space.model_id, "none"))

    @property
    def _ordered_idx(self):
        return self.space.index("D_e_par"), self.space.index("D_e_perp")

    @property
    def _simplex_idx(self):
        return self.space.index("f_n"), self.space.index("f_s")

    @property
    def log_volume(self) -> float:
        ranges = self.space.ranges
        vol = float(np.sum(np.log(ranges)))
        if self.constraint == "ordered_diffusivities":
            vol -= np.log(2.0)
        elif self.constraint == "simplex_fractions":
            i, j = self._simplex_idx
            # triangle f_n + f_s <= 1 inside the unit square
            vol += np.log(0.5) - np.log(ranges[i]) - np.log(ranges[j])
        return vol

    def to_dict(self) -> dict:
        return {"space": self.space.to_dict(), "constraint": self.constraint}

    @classmethod
    def from_dict(cls, data: dict) -> "PriorSpec":
        return cls(ParameterSpace.from_dict(data["space"]), data["constraint"])


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def ordered_from_uniform(u0, u1, lo: float, hi: float):
    """Map ``(u0, u1)`` in the unit square to ``lo <= D_perp <= D_par <= hi``."""
    d_par = np.sqrt((hi - lo) ** 2 * np.asarray(u0)) + lo
    d_perp = (d_par - lo) * np.asarray(u1) + lo
    return d_par, d_perp


def simplex_from_uniform(k1, k2):
    """Map ``(k1, k2)`` in the unit square to ``(f_n, f_s, f_e)`` on the simplex."""
    r = np.sqrt(np.asarray(k1))
    k2 = np.asarray(k2)
    return k2 * r, (1.0 - k2) * r, 1.0 - r


def from_unit_cube(spec: PriorSpec, u) -> np.ndarray:
    """Push points of the unit cube through the prior's sampling transform."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    lo, hi = spec.space.lower_array, spec.space.upper_array
    theta = lo + u * (hi - lo)
    if spec.constraint == "ordered_diffusivities":
        i, j = spec._ordered_idx
        theta[:, i], theta[:, j] = ordered_from_uniform(u[:, i], u[:, j], lo[i], hi[i])
    elif spec.constraint == "simplex_fractions":
        i, j = spec._simplex_idx
        fn, fs, _ = simplex_from_uniform(u[:, i], u[:, j])
        theta[:, i] = lo[i] + fn * (hi[i] - lo[i])
        theta[:, j] = lo[j] + fs * (hi[j] - lo[j])
    return theta


def sample_prior(spec: PriorSpec, n: int, rng_seed=None) -> np.ndarray:
    """``(n, d)`` draws uniform over the constrained support."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = _rng(rng_seed)
    return from_unit_cube(spec, rng.uniform(size=(n, spec.space.d)))


def in_support(spec: PriorSpec, theta) -> np.ndarray | bool:
    """Whether each row of ``theta`` satisfies bounds and constraint."""
    arr = np.asarray(theta, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != spec.space.d:
        raise ValidationError(f"expected {spec.space.d} parameters, got {arr.shape[-1]}")
    ok = np.all(np.isfinite(arr), axis=1)
    ok &= np.all((arr >= spec.space.lower_array) & (arr <= spec.space.upper_array), axis=1)
    if spec.constraint == "ordered_diffusivities":
        i, j = spec._ordered_idx
        ok &= arr[:, j] <= arr[:, i] + _ORDER_TOL
    elif spec.constraint == "simplex_fractions":
        i, j = spec._simplex_idx
        ok &= arr[:, i] + arr[:, j] <= 1.0 + _ORDER_TOL
    return bool(ok[0]) if single else ok


def log_prior(spec: PriorSpec, theta):
    """Log-density of the uniform prior; ``-inf`` outside the support."""
    ok = in_support(spec, theta)
    return np.where(ok, -spec.log_volume, -np.inf)
