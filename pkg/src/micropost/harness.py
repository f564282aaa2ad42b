"""Simulation experiments around a trained :class:`~micropost.estimator.FlowPosterior`.

Every experiment draws its ground truths from the prior with a fixed seed,
so runs are reproducible and different experiments (or noise levels) can be
matched voxel for voxel. Reports are dataclasses that round-trip through
JSON without loss.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, LowAcceptanceError, MicropostError, ValidationError
from .forward_models import add_noise, get_space, random_orientations, simulate
from .mcmc import MCMCConfig, run_amwg
from .posterior import PosteriorSamples, rejection_sample, summarize
from .priors import PriorSpec, sample_prior
from .protocol import AcquisitionProtocol

__all__ = [
    "SUMMARY_SUBSTITUTION_NOTE",
    "simulate_truths",
    "infer_voxels",
    "ComparisonReport",
    "CensusReport",
    "FeatureComparisonReport",
    "SNRSweepReport",
    "PPCReport",
    "CorrelationReport",
    "compare_with_mcmc",
    "degeneracy_census",
    "compare_feature_extraction",
    "snr_sweep",
    "posterior_predictive_check",
    "feature_correlation",
    "shell_statistics",
    "load_report",
]

SUMMARY_SUBSTITUTION_NOTE = (
    "manual baseline = direction-averaged shell means for every model; "
    "model-specific hand-crafted statistics are not implemented"
)


# --------------------------------------------------------------------------
# reports


@dataclasses.dataclass
class _Report:
    def to_dict(self) -> dict:
        out = {"kind": type(self).__name__}
        for f in dataclasses.fields(self):
            out[f.name] = _encode(getattr(self, f.name))
        return out

    @classmethod
    def from_dict(cls, data: dict):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in data:
                kwargs[f.name] = _decode(data[f.name])
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def _encode(v):
    if isinstance(v, np.ndarray):
        return {"__array__": v.tolist(), "dtype": str(v.dtype)}
    if isinstance(v, dict):
        return {str(k): _encode(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_encode(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _decode(v):
    if isinstance(v, dict):
        if "__array__" in v:
            return np.asarray(v["__array__"], dtype=v["dtype"])
        return {k: _decode(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_decode(x) for x in v]
    return v


@dataclasses.dataclass
class ComparisonReport(_Report):
    model_id: str
    names: list
    snr: float | None
    truth: np.ndarray
    flow_map: np.ndarray
    mcmc_map: np.ndarray
    flow_degenerate: np.ndarray
    mcmc_degenerate: np.ndarray
    flow_seconds: np.ndarray
    mcmc_seconds: np.ndarray
    mcmc_total_seconds: np.ndarray
    mcmc_acceptance: np.ndarray
    seed: int = 0

    def bias(self, method: str) -> np.ndarray:
        est = {"flow": self.flow_map, "mcmc": self.mcmc_map}[method]
        return est - self.truth

    def mean_abs_bias(self, method: str) -> np.ndarray:
        return np.mean(np.abs(self.bias(method)), axis=0)

    @property
    def speedup(self) -> float:
        """Mean MCMC sampling time over mean flow sampling time, per voxel."""
        return float(np.mean(self.mcmc_seconds) / np.mean(self.flow_seconds))

    def degenerate_counts(self) -> dict:
        return {
            "flow": self.flow_degenerate.sum(axis=0).tolist(),
            "mcmc": self.mcmc_degenerate.sum(axis=0).tolist(),
        }

    def to_csv(self, path) -> None:
        cols = []
        for n in self.names:
            cols += [f"{n}_truth", f"{n}_flow_map", f"{n}_mcmc_map"]
        rows = np.column_stack([np.column_stack([self.truth[:, i], self.flow_map[:, i], self.mcmc_map[:, i]])
                                for i in range(len(self.names))])
        rows = np.column_stack([rows, self.flow_seconds, self.mcmc_seconds])
        cols += ["flow_seconds", "mcmc_seconds"]
        np.savetxt(path, rows, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


@dataclasses.dataclass
class CensusReport(_Report):
    model_id: str
    names: list
    snr: float | None
    degenerate: np.ndarray
    n_sims: int
    wall_clock_s: float
    seed: int = 0

    @property
    def counts(self) -> np.ndarray:
        return self.degenerate.sum(axis=0)

    @property
    def voxel_fraction(self) -> float:
        """Share of voxels with at least one degenerate parameter."""
        return float(np.mean(self.degenerate.any(axis=1)))


@dataclasses.dataclass
class FeatureComparisonReport(_Report):
    model_id: str
    names: list
    truth: np.ndarray
    map_mlp: np.ndarray
    map_summary: np.ndarray
    kept: np.ndarray
    note: str = SUMMARY_SUBSTITUTION_NOTE
    seed: int = 0

    def rmse(self, variant: str) -> np.ndarray:
        """Per-parameter RMSE over the voxels kept for that parameter."""
        est = {"mlp": self.map_mlp, "summary": self.map_summary}[variant]
        sq = np.where(self.kept, (est - self.truth) ** 2, 0.0)
        return np.sqrt(sq.sum(axis=0) / np.maximum(self.kept.sum(axis=0), 1))


@dataclasses.dataclass
class SNRSweepReport(_Report):
    model_id: str
    names: list
    labels: list
    uncertainty: dict
    ambiguity: dict
    seed: int = 0

    def mean_uncertainty(self, label) -> float:
        return float(np.mean(self.uncertainty[str(label)]))

    def histograms(self, bins: int = 20) -> dict:
        edges = np.linspace(0, 100, bins + 1)
        return {
            lab: np.stack([np.histogram(u[:, i], edges)[0] for i in range(u.shape[1])])
            for lab, u in self.uncertainty.items()
        }


@dataclasses.dataclass
class PPCReport(_Report):
    model_id: str
    snr: float | None
    shell_bvalues: np.ndarray
    observed: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    seed: int = 0

    @property
    def inside(self) -> np.ndarray:
        return (self.observed >= self.lower) & (self.observed <= self.upper)

    @property
    def coverage(self) -> float:
        return float(np.mean(self.inside))

    @property
    def mean_width(self) -> float:
        return float(np.mean(self.upper - self.lower))


@dataclasses.dataclass
class CorrelationReport(_Report):
    model_id: str
    matrix: np.ndarray
    feature_names: list
    statistic_names: list
    snr: float | None
    seed: int = 0

    def weakest_feature(self) -> tuple:
        """Index and max absolute correlation of the least explained feature."""
        best = np.max(np.abs(self.matrix), axis=1)
        i = int(np.argmin(best))
        return i, float(best[i])


_REPORTS = {c.__name__: c for c in (ComparisonReport, CensusReport, FeatureComparisonReport, SNRSweepReport,
                                   PPCReport, CorrelationReport)}


def load_report(path):
    data = json.loads(Path(path).read_text())
    try:
        cls = _REPORTS[data["kind"]]
    except KeyError:
        raise ValidationError(f"{path} is not a report file") from None
    return cls.from_dict(data)


# --------------------------------------------------------------------------
# shared plumbing


def simulate_truths(model_id: str, protocol: AcquisitionProtocol, n: int, snr=None, seed: int = 0):
    """Prior draws, orientations and signals.

    Ground truths depend on ``seed`` only; the noise stream is additionally
    keyed by ``snr``, so different noise levels share the same truths.
    """
    space = get_space(model_id)
    rng = np.random.default_rng(seed)
    theta = sample_prior(PriorSpec.for_space(space), n, rng)
    mu = random_orientations(n, rng)
    clean = simulate(model_id, theta, protocol, mu)
    if snr is None:
        return theta, mu, clean
    noise_rng = np.random.default_rng([seed, int(round(float(snr) * 1000))])
    return theta, mu, add_noise(clean, snr, rng_seed=noise_rng)


def _flow_space(flow):
    if getattr(flow, "space", None) is None:
        raise ConfigurationError("the flow carries no parameter space")
    return flow.space


def _infer_one(flow, x, spec, n_samples, seed, index):
    t0 = time.perf_counter()
    samples = rejection_sample(flow, x, n_samples, spec, rng_seed=seed, voxel=index)
    elapsed = time.perf_counter() - t0
    return samples, elapsed


def infer_voxels(flow, X, n_samples: int = 50000, rng_seed: int = 0, n_workers: int = 1, keep_samples=False):
    """Rejection sampling and summaries for every row of ``X``.

    Voxel ``i`` uses seed ``rng_seed + i``, so results do not depend on the
    worker count. Returns a dict with ``summaries`` (``None`` on failure),
    ``errors``, ``sample_seconds`` and optionally ``samples``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    spec = PriorSpec.for_space(_flow_space(flow))

    def work(i):
        try:
            samples, elapsed = _infer_one(flow, X[i], spec, n_samples, rng_seed + i, i)
            return summarize(samples), "", elapsed, samples if keep_samples else None
        except (LowAcceptanceError, MicropostError) as exc:
            return None, f"{type(exc).__name__}: {exc}", np.nan, None

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(work, range(len(X))))
    else:
        results = [work(i) for i in range(len(X))]
    out = {
        "summaries": [r[0] for r in results],
        "errors": [r[1] for r in results],
        "sample_seconds": np.array([r[2] for r in results]),
    }
    if keep_samples:
        out["samples"] = [r[3] for r in results]
    return out


def _stack(summaries, attr, d):
    return np.array([getattr(s, attr) if s is not None else np.full(d, np.nan) for s in summaries])


# --------------------------------------------------------------------------
# experiments


def compare_with_mcmc(
    flow,
    protocol: AcquisitionProtocol,
    n_sims: int = 200,
    snr: float = 50.0,
    seed: int = 0,
    n_samples: int = 15000,
    mcmc_config: MCMCConfig | None = None,
) -> ComparisonReport:
    """Flow MAPs and AMWG MAPs on the same simulated voxels.

    Both posteriors are summarised with the same KDE machinery from
    ``n_samples`` retained draws. Timings are sampling-only: flow rejection
    sampling versus the MCMC chain after its MLE start.
    """
    space = _flow_space(flow)
    spec = PriorSpec.for_space(space)
    theta, _, x = simulate_truths(space.model_id, protocol, n_sims, snr, seed)
    base = mcmc_config or MCMCConfig(n_samples=n_samples + 200, burn_in=200, sigma_noise=1.0 / snr)
    d = space.d
    flow_map, mcmc_map = np.empty((n_sims, d)), np.empty((n_sims, d))
    flow_deg, mcmc_deg = np.zeros((n_sims, d), bool), np.zeros((n_sims, d), bool)
    t_flow, t_mcmc, t_total = np.empty(n_sims), np.empty(n_sims), np.empty(n_sims)
    acc = np.empty((n_sims, d))
    for i in range(n_sims):
        samples, t_flow[i] = _infer_one(flow, x[i], spec, n_samples, seed + i, i)
        s = summarize(samples)
        flow_map[i], flow_deg[i] = s.map, s.degenerate
        cfg = dataclasses.replace(base, rng_seed=seed + i)
        chain = run_amwg(x[i], spec, protocol, cfg)
        m = summarize(PosteriorSamples(chain.trace, space, 1.0))
        mcmc_map[i], mcmc_deg[i] = m.map, m.degenerate
        t_mcmc[i], t_total[i] = chain.timings["sampling_s"], chain.timings["total_s"]
        acc[i] = chain.acceptance_rates
    return ComparisonReport(
        space.model_id, list(space.names), snr, theta, flow_map, mcmc_map, flow_deg, mcmc_deg,
        t_flow, t_mcmc, t_total, acc, seed,
    )


def degeneracy_census(flow, protocol: AcquisitionProtocol, n_sims: int = 10000, snr=None, seed: int = 0,
                      n_samples: int = 10000, n_workers: int = 1) -> CensusReport:
    """Per-parameter degeneracy flags over ``n_sims`` prior-predictive voxels."""
    space = _flow_space(flow)
    _, _, x = simulate_truths(space.model_id, protocol, n_sims, snr, seed)
    t0 = time.perf_counter()
    res = infer_voxels(flow, x, n_samples, seed, n_workers)
    wall = time.perf_counter() - t0
    deg = np.array([s.degenerate if s is not None else np.zeros(space.d, bool) for s in res["summaries"]])
    return CensusReport(space.model_id, list(space.names), snr, deg, n_sims, wall, seed)


def shell_statistics(X, protocol: AcquisitionProtocol) -> np.ndarray:
    """Direction-averaged signal per b-shell (the b0 mean is dropped)."""
    arr = protocol.validate_signal(X)
    return np.stack([arr[..., idx].mean(axis=-1) for idx in protocol.shells], axis=-1)


def compare_feature_extraction(flow_mlp, flow_summary, protocol: AcquisitionProtocol, n_sims: int = 100,
                               snr=None, seed: int = 0, n_samples: int = 10000) -> FeatureComparisonReport:
    """MAPs from the learned-feature flow and the shell-mean flow on the same voxels.

    ``flow_summary`` must have been trained on :func:`shell_statistics` of
    the signals. Voxels degenerate under either variant are dropped from
    ``kept``.
    """
    space = _flow_space(flow_mlp)
    theta, _, x = simulate_truths(space.model_id, protocol, n_sims, snr, seed)
    a = infer_voxels(flow_mlp, x, n_samples, seed)
    b = infer_voxels(flow_summary, shell_statistics(x, protocol), n_samples, seed)
    d = space.d
    map_a, map_b = _stack(a["summaries"], "map", d), _stack(b["summaries"], "map", d)
    deg_a = _stack(a["summaries"], "degenerate", d).astype(bool)
    deg_b = _stack(b["summaries"], "degenerate", d).astype(bool)
    kept = ~(deg_a | deg_b) & np.isfinite(map_a) & np.isfinite(map_b)
    return FeatureComparisonReport(space.model_id, list(space.names), theta, map_a, map_b, kept, seed=seed)


def _label(snr):
    return "none" if snr is None else f"{float(snr):g}"


def snr_sweep(flows: dict, protocol: AcquisitionProtocol, n_sims: int = 1000, seed: int = 0,
              n_samples: int = 10000) -> SNRSweepReport:
    """Uncertainty and ambiguity over shared ground truths at several noise levels.

    ``flows`` maps an SNR (``None`` for noise-free) to a flow trained at that
    noise level.
    """
    if not flows:
        raise ConfigurationError("no flows given")
    spaces = {_flow_space(f).model_id for f in flows.values()}
    if len(spaces) != 1:
        raise ConfigurationError("all flows must share one model")
    model_id = spaces.pop()
    space = get_space(model_id)
    unc, amb, labels = {}, {}, []
    for snr, flow in flows.items():
        _, _, x = simulate_truths(model_id, protocol, n_sims, snr, seed)
        res = infer_voxels(flow, x, n_samples, seed)
        lab = _label(snr)
        labels.append(lab)
        unc[lab] = _stack(res["summaries"], "uncertainty", space.d)
        amb[lab] = _stack(res["summaries"], "ambiguity", space.d)
    return SNRSweepReport(model_id, list(space.names), labels, unc, amb, seed)


def posterior_predictive_check(flow, protocol: AcquisitionProtocol, n_truths: int = 10, n_pp: int = 100,
                               snr=None, seed: int = 0, n_samples: int = 10000) -> PPCReport:
    """Envelope test of direction-averaged signals.

    For each prior draw the posterior is sampled, ``n_pp`` of its samples
    are pushed through the simulator (random orientation, same noise level
    as the input) and the min-max envelope of their shell means is compared
    with the input's shell means.
    """
    space = _flow_space(flow)
    model_id = space.model_id
    spec = PriorSpec.for_space(space)
    _, _, x = simulate_truths(model_id, protocol, n_truths, snr, seed)
    obs = shell_statistics(x, protocol)
    rng = np.random.default_rng([seed, 1])
    lower, upper = np.empty_like(obs), np.empty_like(obs)
    for i in range(n_truths):
        samples = rejection_sample(flow, x[i], max(n_samples, 1000), spec, rng_seed=seed + i, voxel=i)
        pick = rng.choice(len(samples), size=n_pp, replace=False)
        rec = simulate(model_id, samples.values[pick], protocol, random_orientations(n_pp, rng))
        if snr is not None:
            rec = add_noise(rec, snr, rng_seed=rng)
        stats = shell_statistics(rec, protocol)
        lower[i], upper[i] = stats.min(axis=0), stats.max(axis=0)
    shells = np.asarray(protocol.shell_bvalues)
    return PPCReport(model_id, snr, shells, obs, lower, upper, seed)


def feature_correlation(flow, protocol: AcquisitionProtocol, n_sims: int = 1000, snr=50.0, seed: int = 0,
                        features=None) -> CorrelationReport:
    """Pearson correlations between learned features and shell means.

    ``features`` overrides the extractor (a callable ``X -> (n, N_f)``),
    which makes the computation testable without a trained flow.
    """
    space = _flow_space(flow) if flow is not None else None
    model_id = space.model_id if space is not None else "ball_stick"
    _, _, x = simulate_truths(model_id, protocol, n_sims, snr, seed)
    extract = features if features is not None else flow.transform
    F = np.asarray(extract(x), dtype=float)
    S = shell_statistics(x, protocol)
    Fz = (F - F.mean(0)) / F.std(0)
    Sz = (S - S.mean(0)) / S.std(0)
    corr = np.clip(Fz.T @ Sz / len(x), -1.0, 1.0)
    stat_names = [f"b{round(b * 1000)}" for b in protocol.shell_bvalues]  # s/mm^2
    return CorrelationReport(model_id, corr, [f"feature_{k}" for k in range(F.shape[1])], stat_names, snr, seed)
