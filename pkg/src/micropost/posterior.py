"""Posterior summaries: rejection filtering, MAP, uncertainty, ambiguity, degeneracy.

Marginal densities are Gaussian KDEs on a 1000-point grid spanning the prior
range. Samples are linearly binned onto that grid first, which keeps the cost
independent of the sample count and makes every metric a continuous function
of the sample positions relative to the grid (hence exactly affine
equivariant up to round-off).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import InsufficientSamplesError, LowAcceptanceError, ValidationError
from .forward_models import ParameterSpace
from .priors import PriorSpec, in_support

__all__ = [
    "GRID_SIZE",
    "PosteriorSamples",
    "PosteriorSummary",
    "rejection_sample",
    "kde_on_grid",
    "marginal_metrics",
    "fit_two_gaussians",
    "detect_degeneracy",
    "summarize",
    "write_summary_csv",
]

GRID_SIZE = 1000
MIN_SAMPLES = 1000
MIN_ACCEPTANCE = 0.01


@dataclass(frozen=True)
class PosteriorSamples:
    values: np.ndarray
    space: ParameterSpace
    accepted_fraction: float = 1.0

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[1] != self.space.d:
            raise ValidationError(f"samples have {v.shape[1]} columns, space has {self.space.d}")
        if not 0.0 < self.accepted_fraction <= 1.0:
            raise ValidationError("accepted_fraction must lie in (0, 1]")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class PosteriorSummary:
    names: tuple
    map: np.ndarray
    uncertainty: np.ndarray
    ambiguity: np.ndarray
    degenerate: np.ndarray
    mixture: np.ndarray  # (d, 5): mu1, sigma1, mu2, sigma2, weight1

    def as_row(self) -> dict:
        row = {}
        for i, name in enumerate(self.names):
            row[f"{name}_map"] = float(self.map[i])
            row[f"{name}_uncertainty"] = float(self.uncertainty[i])
            row[f"{name}_ambiguity"] = float(self.ambiguity[i])
            row[f"{name}_degenerate"] = bool(self.degenerate[i])
        return row


def rejection_sample(flow, x, n_target: int, spec: PriorSpec, rng_seed=0, voxel=None) -> PosteriorSamples:
    """Draw from ``flow`` and keep rows inside the prior support.

    ``flow`` only needs ``sample(x, n, random_state)``. Sampling stops once
    ``n_target`` rows are accepted or ``100 * n_target`` have been drawn.
    """
    if n_target < MIN_SAMPLES:
        raise ValidationError(f"n_target must be >= {MIN_SAMPLES}")
    seeds = np.random.default_rng(rng_seed)
    cap = 100 * n_target
    kept, n_kept, drawn = [], 0, 0
    while n_kept < n_target and drawn < cap:
        rate = n_kept / drawn if drawn else 1.0
        need = n_target - n_kept
        batch = int(min(cap - drawn, max(need / max(rate, MIN_ACCEPTANCE) * 1.1, 256)))
        draws = np.asarray(flow.sample(x, batch, random_state=int(seeds.integers(2**31))))
        ok = in_support(spec, draws)
        kept.append(draws[ok])
        n_kept += int(ok.sum())
        drawn += batch
    fraction = n_kept / drawn
    if n_kept < n_target and fraction < MIN_ACCEPTANCE:
        where = "" if voxel is None else f" for voxel {voxel}"
        raise LowAcceptanceError(
            f"acceptance {fraction:.4f} below {MIN_ACCEPTANCE}{where} after {drawn} draws",
            accepted_fraction=fraction,
            voxel=voxel,
        )
    if n_kept == 0:
        raise LowAcceptanceError("no samples accepted", accepted_fraction=0.0, voxel=voxel)
    values = np.concatenate(kept)[:n_target]
    return PosteriorSamples(values, spec.space, fraction)


# --------------------------------------------------------------------------
# kernel density on the prior grid


def _linear_bins(s, lo, step, n_grid):
    pos = (s - lo) / step
    j = np.clip(np.floor(pos).astype(int), 0, n_grid - 2)
    w = np.clip(pos - j, 0.0, 1.0)
    counts = np.bincount(j, weights=1.0 - w, minlength=n_grid)
    counts += np.bincount(j + 1, weights=w, minlength=n_grid)
    return counts, pos


def _bandwidth(s, step):
    # Silverman's rule; the distinct-value count makes the rule invariant to
    # duplicated samples, the grid step is the floor for point masses
    n = len(np.unique(s))
    sd = np.std(s)
    q25, q75 = np.quantile(s, [0.25, 0.75], method="inverted_cdf")
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    h = 0.9 * spread * n ** (-0.2)
    return max(h, step)


_OFFSETS = {}


def _offset_tables(n_grid):
    if n_grid not in _OFFSETS:
        i = np.arange(n_grid)
        direct = np.abs(i[:, None] - i[None, :])
        low = i[:, None] + i[None, :]
        high = 2 * (n_grid - 1) - low
        _OFFSETS[n_grid] = (direct, low, high)
    return _OFFSETS[n_grid]


def kde_on_grid(samples, lo: float, hi: float, n_grid: int = GRID_SIZE):
    """Reflected Gaussian KDE of 1-D ``samples`` on ``n_grid`` points of ``[lo, hi]``.

    Returns ``(grid, density, positions)`` where ``positions`` are the samples in
    grid-index units and the density integrates to one (trapezoid rule).
    """
    s = np.asarray(samples, dtype=float).ravel()
    step = (hi - lo) / (n_grid - 1)
    grid = lo + step * np.arange(n_grid)
    counts, pos = _linear_bins(s, lo, step, n_grid)
    h = _bandwidth(s, step) / step
    kern = np.exp(-0.5 * (np.arange(2 * n_grid - 1) / h) ** 2)
    direct, low, high = _offset_tables(n_grid)
    dens = kern[direct] @ counts + kern[low] @ counts + kern[high] @ counts
    dens /= np.trapezoid(dens, grid)
    return grid, dens, pos


def _fwhm(grid, dens):
    half = dens.max() / 2.0
    above = np.flatnonzero(dens >= half)
    i0, i1 = above[0], above[-1]
    if i0 > 0:
        a, b = dens[i0 - 1], dens[i0]
        left = grid[i0 - 1] + (half - a) / (b - a) * (grid[i0] - grid[i0 - 1])
    else:
        left = grid[0]
    if i1 < len(grid) - 1:
        a, b = dens[i1], dens[i1 + 1]
        right = grid[i1] + (a - half) / (a - b) * (grid[i1 + 1] - grid[i1])
    else:
        right = grid[-1]
    return right - left


def marginal_metrics(samples, lo: float, hi: float, n_grid: int = GRID_SIZE):
    """``(map, uncertainty_pct, ambiguity_pct)`` of one marginal."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size == 0:
        raise InsufficientSamplesError("no samples")
    grid, dens, pos = kde_on_grid(s, lo, hi, n_grid)
    span = hi - lo
    map_ = grid[np.argmax(dens)]
    at_samples = np.interp(pos, np.arange(n_grid), dens)
    cut = np.quantile(at_samples, 0.5, method="inverted_cdf")
    top = s[at_samples >= cut]
    q25, q75 = np.quantile(top, [0.25, 0.75], method="inverted_cdf")
    uncertainty = 100.0 * (q75 - q25) / span
    ambiguity = 100.0 * _fwhm(grid, dens) / span
    return map_, float(np.clip(uncertainty, 0, 100)), float(np.clip(ambiguity, 0, 100))


# --------------------------------------------------------------------------
# two-component mixture on the binned marginal


def _kmeanspp_starts(x, w, n_starts, rng):
    first = rng.choice(len(x), size=n_starts, p=w)
    d2 = (x[None, :] - x[first, None]) ** 2 * w[None, :]
    tot = d2.sum(axis=1)
    second = np.empty(n_starts, dtype=int)
    for r in range(n_starts):
        if tot[r] > 0:
            second[r] = rng.choice(len(x), p=d2[r] / tot[r])
        else:
            second[r] = first[r]
    return np.stack([x[first], x[second]], axis=1)


def _dedupe(mu, var, pi, span):
    # restarts sitting on the same parameters follow the same EM path
    key = np.round(np.concatenate([mu / span, np.sqrt(var) / span, pi], axis=1), 6)
    _, keep = np.unique(key, axis=0, return_index=True)
    return np.sort(keep)


def fit_two_gaussians(
    x, w, var_floor, n_starts=100, max_iter=500, tol=1e-8, rng_seed=0, n_screen=30, n_keep=5
):
    """EM for a 2-component 1-D Gaussian mixture on weighted points.

    All restarts run in lock-step. Restarts that have merged onto the same
    parameters are collapsed, and after ``n_screen`` iterations only the
    ``n_keep`` best continue. The fit with the highest log-likelihood wins. Returns ``(mu, sigma, weights, loglik)`` with ``mu``
    ascending.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    w = w / w.sum()
    span = max(float(x.max() - x.min()), np.sqrt(var_floor))
    rng = np.random.default_rng(rng_seed)
    mu = _kmeanspp_starts(x, w, n_starts, rng)
    overall = max(float(np.sum(w * (x - np.sum(w * x)) ** 2)), var_floor)
    var = np.full((n_starts, 2), overall)
    pi = np.full((n_starts, 2), 0.5)
    prev = np.full(n_starts, -np.inf)
    for it in range(max_iter):
        if it in (3, 10):
            keep = _dedupe(mu, var, pi, span)
            mu, var, pi, prev = mu[keep], var[keep], pi[keep], prev[keep]
        elif it == n_screen and len(prev) > n_keep:
            keep = np.sort(np.argsort(prev)[-n_keep:])
            mu, var, pi, prev = mu[keep], var[keep], pi[keep], prev[keep]
        logp = (
            np.log(np.maximum(pi, 1e-300))[:, :, None]
            - 0.5 * np.log(2 * np.pi * var)[:, :, None]
            - (x[None, None, :] - mu[:, :, None]) ** 2 / (2 * var[:, :, None])
        )
        gap = logp[:, 0] - logp[:, 1]
        # log(e^a + e^b) = b + softplus(a - b)
        norm = logp[:, 1] + np.logaddexp(0.0, gap)
        cur = norm @ w
        r0 = 0.5 * (1.0 + np.tanh(0.5 * gap))
        resp = np.stack([r0, 1.0 - r0], axis=1) * w
        nk = resp.sum(axis=2)
        safe = np.maximum(nk, 1e-300)
        mu = np.where(nk > 0, (resp @ x) / safe, mu)
        dev = (x[None, None, :] - mu[:, :, None]) ** 2
        var = np.maximum(np.where(nk > 0, (resp * dev).sum(axis=2) / safe, var), var_floor)
        pi = nk
        converged = np.all(np.abs(cur - prev) < tol)
        prev = cur
        if converged:
            break
    best = int(np.argmax(prev))
    order = np.argsort(mu[best])
    return mu[best][order], np.sqrt(var[best][order]), pi[best][order], float(prev[best])


def _sign_changes(values):
    diff = np.diff(values)
    sign = np.sign(diff[np.abs(diff) > 0])
    changes = int(np.sum(sign[1:] != sign[:-1]))
    return changes


def detect_degeneracy(samples, prior_range, n_grid: int = GRID_SIZE, rng_seed=0):
    """Flag a bimodal marginal.

    A two-Gaussian mixture is fitted to the samples binned on the prior grid.
    The marginal is degenerate when the mixture density has more than one
    derivative sign change on the grid and the means are further apart than
    the sum of the standard deviations. Returns ``(flag, (mu1, s1, mu2, s2, w1))``.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < MIN_SAMPLES:
        raise InsufficientSamplesError(f"need at least {MIN_SAMPLES} samples, got {s.size}")
    lo, hi = map(float, prior_range)
    step = (hi - lo) / (n_grid - 1)
    grid = lo + step * np.arange(n_grid)
    counts, _ = _linear_bins(s, lo, step, n_grid)
    nz = counts > 0
    mu, sd, pi, _ = fit_two_gaussians(grid[nz], counts[nz], var_floor=step**2 / 12, rng_seed=rng_seed)
    dens = (pi[None, :] / sd * np.exp(-0.5 * ((grid[:, None] - mu) / sd) ** 2)).sum(axis=1)
    bimodal = _sign_changes(dens) > 1
    separated = abs(mu[1] - mu[0]) > sd[0] + sd[1]
    return bool(bimodal and separated), (float(mu[0]), float(sd[0]), float(mu[1]), float(sd[1]), float(pi[0]))


def summarize(samples: PosteriorSamples, rng_seed=0) -> PosteriorSummary:
    """Per-parameter MAP, uncertainty, ambiguity and degeneracy flag."""
    space = samples.space
    d = space.d
    out = {k: np.empty(d) for k in ("map", "uncertainty", "ambiguity")}
    degenerate = np.zeros(d, dtype=bool)
    mixture = np.empty((d, 5))
    for i in range(d):
        col = samples.values[:, i]
        lo, hi = space.lower[i], space.upper[i]
        out["map"][i], out["uncertainty"][i], out["ambiguity"][i] = marginal_metrics(col, lo, hi)
        degenerate[i], mixture[i] = detect_degeneracy(col, (lo, hi), rng_seed=rng_seed)
    return PosteriorSummary(space.names, out["map"], out["uncertainty"], out["ambiguity"], degenerate, mixture)


def write_summary_csv(path, summaries, names, voxel_ids=None, errors=None) -> None:
    """One row per voxel; ``None`` entries in ``summaries`` are written empty."""
    cols = ["voxel_id"]
    for name in names:
        cols += [f"{name}_map", f"{name}_uncertainty", f"{name}_ambiguity", f"{name}_degenerate"]
    cols.append("error")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for k, summ in enumerate(summaries):
            row = {"voxel_id": k if voxel_ids is None else voxel_ids[k], "error": ""}
            if summ is not None:
                for key, val in summ.as_row().items():
                    row[key] = int(val) if isinstance(val, bool) else repr(val)
            if errors is not None and errors[k]:
                row["error"] = errors[k]
            w.writerow(row)
