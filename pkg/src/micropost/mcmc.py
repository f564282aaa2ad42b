"""Adaptive Metropolis-within-Gibbs sampling under the Offset Gaussian likelihood.

The fibre orientation is a nuisance: it is sampled as two extra angles
(polar, azimuth) with the uniform-on-sphere prior, and reported separately
from the tissue-parameter trace.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from .exceptions import ConfigurationError, NumericError, OptimizerFailureError, ValidationError
from .forward_models import ForwardModel, ParameterVector, simulate
from .priors import PriorSpec, from_unit_cube, in_support
from .protocol import AcquisitionProtocol

__all__ = [
    "MCMCConfig",
    "MCMCChain",
    "offset_gaussian_loglik",
    "log_likelihood_offset_gaussian",
    "angles_to_vector",
    "vector_to_angles",
    "mle_init",
    "amwg_sample",
    "run_amwg",
    "save_chain",
    "load_chain",
]

TARGET_ACCEPTANCE = 0.44


@dataclass(frozen=True)
class MCMCConfig:
    n_samples: int = 15200
    burn_in: int = 200
    thinning: int = 1
    proposal_stds: tuple | None = None
    adaptation_interval: int = 50
    sigma_noise: float = 0.02
    rng_seed: int = 0
    n_starts: int = 20
    max_iter: int = 2000

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")
        if not 0 <= self.burn_in < self.n_samples:
            raise ConfigurationError("need 0 <= burn_in < n_samples")
        if self.thinning < 1:
            raise ConfigurationError("thinning must be >= 1")
        if self.adaptation_interval < 1:
            raise ConfigurationError("adaptation_interval must be >= 1")
        if not self.sigma_noise > 0:
            raise ConfigurationError("sigma_noise must be positive")
        if self.proposal_stds is not None:
            object.__setattr__(self, "proposal_stds", tuple(float(s) for s in self.proposal_stds))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MCMCChain:
    trace: np.ndarray
    acceptance_rates: np.ndarray
    mle_init: ParameterVector | None = None
    orientation_trace: np.ndarray | None = None
    proposal_stds: np.ndarray | None = None
    timings: dict = field(default_factory=dict)


def offset_gaussian_loglik(x, signal, sigma: float) -> float:
    """Offset Gaussian log-likelihood of magnitude data ``x`` given a noise-free signal."""
    x = np.asarray(x, dtype=float)
    s = np.asarray(signal, dtype=float)
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite model signal")
    resid = x - np.sqrt(s**2 + sigma**2)
    return float(-np.sum(resid**2) / (2 * sigma**2) - x.size * np.log(sigma * np.sqrt(2 * np.pi)))


def log_likelihood_offset_gaussian(
    x, theta, protocol: AcquisitionProtocol, sigma: float, model_id: str = "ball_stick", orientation=None
) -> float:
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    protocol.validate_signal(x)
    if isinstance(theta, ParameterVector):
        orientation = theta.orientation if orientation is None else orientation
        theta = theta.values
    return offset_gaussian_loglik(x, simulate(model_id, theta, protocol, orientation), sigma)


def angles_to_vector(polar, azimuth):
    s = np.sin(polar)
    return np.array([s * np.cos(azimuth), s * np.sin(azimuth), np.cos(polar)])


def vector_to_angles(v):
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    return float(np.arccos(np.clip(v[2], -1.0, 1.0))), float(np.arctan2(v[1], v[0]) % (2 * np.pi))


class _Target:
    """Log-posterior over ``(theta, polar, azimuth)`` for one voxel."""

    def __init__(self, x, spec: PriorSpec, protocol, sigma):
        self.x = np.asarray(x, dtype=float)
        protocol.validate_signal(self.x)
        self.spec = spec
        self.model = ForwardModel(spec.space.model_id, protocol)
        self.sigma = sigma
        self.d = spec.space.d

    def loglik(self, z):
        mu = angles_to_vector(z[self.d], z[self.d + 1])
        return offset_gaussian_loglik(self.x, self.model(z[: self.d], mu), self.sigma)

    def __call__(self, z):
        if not in_support(self.spec, z[: self.d]) or not 0.0 <= z[self.d] <= np.pi:
            return -np.inf
        # uniform orientation prior in angle coordinates
        return self.loglik(z) + np.log(max(np.sin(z[self.d]), 1e-300))


def mle_init(x, spec: PriorSpec, protocol: AcquisitionProtocol, sigma: float, rng_seed=0, n_starts=20, max_iter=2000):
    """Multi-start Nelder-Mead maximum of the Offset Gaussian likelihood.

    Starts are a Latin hypercube over the prior (pushed through its
    constraint transform) and the orientation hemisphere. Returns the best
    in-support point as a :class:`ParameterVector`.
    """
    target = _Target(x, spec, protocol, sigma)
    space = spec.space
    d = space.d
    lo, rng_ = space.lower_array, space.ranges
    unit = qmc.LatinHypercube(d=d + 2, seed=np.random.default_rng(rng_seed)).random(n_starts)
    starts = np.column_stack([
        (from_unit_cube(spec, unit[:, :d]) - lo) / rng_,
        np.arccos(1.0 - unit[:, d]),
        2 * np.pi * unit[:, d + 1],
    ])

    def objective(v):
        th = lo + v[:d] * rng_
        if not in_support(spec, th):
            # outside the box: large value growing with the distance
            excess = np.sum(np.maximum(0, -v[:d]) + np.maximum(0, v[:d] - 1))
            return 1e12 * (1.0 + excess)
        ll = offset_gaussian_loglik(target.x, target.model(th, angles_to_vector(v[d], v[d + 1])), sigma)
        return -ll

    best, best_val = None, np.inf
    for s in starts:
        try:
            res = optimize.minimize(
                objective, s, method="Nelder-Mead", options={"maxiter": max_iter, "xatol": 1e-8, "fatol": 1e-10}
            )
        except (NumericError, FloatingPointError):
            continue
        if np.isfinite(res.fun) and res.fun < best_val:
            best, best_val = res.x, res.fun
    if best is None or best_val >= 1e12:
        raise OptimizerFailureError("no Nelder-Mead start reached the prior support")
    theta = lo + best[:d] * rng_
    mu = angles_to_vector(best[d], best[d + 1])
    return ParameterVector(tuple(float(t) for t in theta), tuple(float(m) for m in mu))


def amwg_sample(log_target, init, proposal_stds, config: MCMCConfig, periodic=None):
    """Component-wise adaptive random-walk Metropolis.

    Each sweep updates every coordinate in turn with a Gaussian proposal.
    Every ``adaptation_interval`` sweeps, the log proposal scale of each
    coordinate moves by ``1/sqrt(sweep)`` up or down depending on whether
    its acceptance in the last batch was above or below 0.44. Coordinates
    flagged ``periodic`` are wrapped onto ``[0, period)``.

    Returns ``(trace, acceptance_rates, final_stds)``; the trace keeps the
    post-burn-in sweeps, thinned.
    """
    rng = np.random.default_rng(config.rng_seed)
    z = np.array(init, dtype=float)
    k = z.size
    log_std = np.log(np.asarray(proposal_stds, dtype=float))
    period = np.zeros(k) if periodic is None else np.asarray(periodic, dtype=float)
    current = log_target(z)
    if not np.isfinite(current):
        raise ValidationError("initial point has zero posterior density")
    n_keep = len(range(config.burn_in, config.n_samples, config.thinning))
    trace = np.empty((n_keep, k))
    accepted = np.zeros(k)
    batch = np.zeros(k)
    row = 0
    for sweep in range(config.n_samples):
        noise = rng.standard_normal(k)
        logu = np.log(rng.uniform(size=k))
        for i in range(k):
            old = z[i]
            z[i] = old + np.exp(log_std[i]) * noise[i]
            if period[i] > 0:
                z[i] %= period[i]
            proposal = log_target(z)
            if logu[i] < proposal - current:
                current = proposal
                accepted[i] += 1
                batch[i] += 1
            else:
                z[i] = old
        if (sweep + 1) % config.adaptation_interval == 0:
            step = 1.0 / np.sqrt(sweep + 1)
            rate = batch / config.adaptation_interval
            log_std += np.where(rate > TARGET_ACCEPTANCE, step, -step)
            batch[:] = 0
        if sweep >= config.burn_in and (sweep - config.burn_in) % config.thinning == 0:
            trace[row] = z
            row += 1
    return trace, accepted / config.n_samples, np.exp(log_std)


def run_amwg(x, spec: PriorSpec, protocol: AcquisitionProtocol, config: MCMCConfig = MCMCConfig(), init=None):
    """AMWG chain for one voxel, started at the MLE unless ``init`` is given."""
    d = spec.space.d
    t0 = time.perf_counter()
    if init is None:
        init = mle_init(x, spec, protocol, config.sigma_noise, config.rng_seed, config.n_starts, config.max_iter)
    t_mle = time.perf_counter() - t0
    target = _Target(x, spec, protocol, config.sigma_noise)
    polar, azimuth = vector_to_angles(init.orientation)
    z0 = np.concatenate([np.asarray(init.values, dtype=float), [polar, azimuth]])
    if config.proposal_stds is not None:
        if len(config.proposal_stds) != d + 2:
            raise ConfigurationError(f"proposal_stds needs {d + 2} entries (parameters plus two angles)")
        stds = np.asarray(config.proposal_stds)
    else:
        stds = np.concatenate([spec.space.ranges / 20.0, [0.1, 0.1]])
    periodic = np.zeros(d + 2)
    periodic[-1] = 2 * np.pi
    t1 = time.perf_counter()
    trace, rates, final = amwg_sample(target, z0, stds, config, periodic)
    t_sample = time.perf_counter() - t1
    orient = np.array([angles_to_vector(p, a) for p, a in trace[:, d:]])
    return MCMCChain(
        trace=trace[:, :d],
        acceptance_rates=rates[:d],
        mle_init=init,
        orientation_trace=orient,
        proposal_stds=final,
        timings={"mle_s": t_mle, "sampling_s": t_sample, "total_s": t_mle + t_sample},
    )


def save_chain(chain: MCMCChain, path, config: MCMCConfig | None = None) -> None:
    """Trace as ``.npy`` plus a JSON sidecar with rates, timings and config."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), chain.trace)
    meta = {
        "acceptance_rates": chain.acceptance_rates.tolist(),
        "mle_init": None if chain.mle_init is None else {
            "values": list(chain.mle_init.values),
            "orientation": list(chain.mle_init.orientation),
        },
        "proposal_stds": None if chain.proposal_stds is None else chain.proposal_stds.tolist(),
        "timings": chain.timings,
        "config": None if config is None else config.to_dict(),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_chain(path) -> MCMCChain:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    init = meta.get("mle_init")
    return MCMCChain(
        trace=np.load(path.with_suffix(".npy")),
        acceptance_rates=np.asarray(meta["acceptance_rates"]),
        mle_init=None if init is None else ParameterVector(tuple(init["values"]), tuple(init["orientation"])),
        proposal_stds=None if meta.get("proposal_stds") is None else np.asarray(meta["proposal_stds"]),
        timings=meta.get("timings", {}),
    )
