"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line (shown in the terminal summary) before
asserting. The heavy criteria share the session flows from ``conftest.py``;
where a budget includes training, the recorded setup time is added.
"""

import copy
import time

import numpy as np
import pytest
import torch
from scipy import stats

from micropost.estimator import FlowPosterior
from micropost.flow import ConditionalMAF, autoregressive_check
from micropost.forward_models import EXTENDED_SANDI, STANDARD_MODEL, ParameterSpace, sphere_cs
from micropost.harness import compare_with_mcmc, degeneracy_census, posterior_predictive_check, snr_sweep
from micropost.mcmc import MCMCConfig, amwg_sample
from micropost.posterior import marginal_metrics
from micropost.priors import PriorSpec, sample_prior

pytestmark = pytest.mark.acceptance


def test_cs_prior_range_anchor(acceptance):
    t0 = time.perf_counter()
    lo, hi = float(sphere_cs(1.0)), float(sphere_cs(15.0))
    wall = time.perf_counter() - t0
    ok = abs(lo / 0.15 - 1) <= 0.05 and abs(hi / 1105 - 1) <= 0.05 and wall < 1.0
    acceptance(1, "C_s prior-range anchor", ok,
               f"C_s(1)={lo:.4g} (target 0.15), C_s(15)={hi:.4g} (target 1105), {wall:.2f}s")
    assert ok


def test_conjugate_toy_posterior(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    theta = rng.uniform(size=(100_000, 1))
    X = theta + 0.1 * rng.standard_normal((100_000, 20))
    space = ParameterSpace(("theta",), (0.0,), (1.0,))
    flow = FlowPosterior(space=space, max_epochs=80, random_state=0).fit(X, theta)
    truths = rng.uniform(size=20)
    s = 0.1 / np.sqrt(20)
    mean_err, std_rel = [], []
    for i, t in enumerate(truths):
        x = t + 0.1 * rng.standard_normal(20)
        post = stats.truncnorm(-x.mean() / s, (1 - x.mean()) / s, loc=x.mean(), scale=s)
        draws = flow.sample(x, 20_000, random_state=i)[:, 0]
        draws = draws[(draws >= 0) & (draws <= 1)]
        mean_err.append(abs(draws.mean() - post.mean()))
        std_rel.append(abs(draws.std() / post.std() - 1))
    wall = time.perf_counter() - t0
    ok = max(mean_err) <= 0.02 and max(std_rel) <= 0.2 and wall < 600
    acceptance(2, "conjugate toy posterior", ok,
               f"max |mean err|={max(mean_err):.4f} (<=0.02), max std rel err={max(std_rel):.3f} (<=0.2), {wall:.0f}s")
    assert ok


def _randomized_maf(d, m, seed):
    torch.manual_seed(seed)
    flow = ConditionalMAF(d, m).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in flow.parameters():
            p.copy_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return flow


def test_flow_mechanics(acceptance):
    t0 = time.perf_counter()
    # invertibility
    flow = _randomized_maf(4, 6, 0)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        ctx = flow.features(torch.randn(2000, 6, generator=gen, dtype=torch.float64))
        z = torch.randn(2000, 4, generator=gen, dtype=torch.float64)
        round_trip = float(torch.max(torch.abs(flow.transform(flow.inverse_transform(z, ctx), ctx)[0] - z)))
    # autoregressive Jacobian of every block, random and trained weights
    toy_rng = np.random.default_rng(5)
    y = toy_rng.standard_normal((20_000, 1))
    toy = FlowPosterior(max_epochs=15, patience_epochs=5, random_state=1).fit(toy_rng.uniform(size=(20_000, 3)), y)
    blocks = list(flow.blocks) + [copy.deepcopy(b).double() for b in toy.model_.blocks]
    triangular = all(autoregressive_check(b, tol=1e-7) for b in blocks)
    # normalization of a learned 1-D density on a grid
    grid = np.linspace(-10, 10, 10**4)
    mass = float(np.trapezoid(np.exp(toy.log_prob(grid[:, None], [[0.3, 0.6, 0.1]])), grid))
    # analytic vs central-difference gradients
    small = _randomized_maf(2, 5, 4)
    theta = torch.randn(10, 2, generator=gen, dtype=torch.float64)
    x = torch.randn(10, 5, generator=gen, dtype=torch.float64)

    def loss():
        return -small.log_prob(theta, x).mean()

    small.zero_grad()
    loss().backward()
    worst = 0.0
    for param in (small.blocks[0].output_layer.weight, small.blocks[1].context_layer.weight,
                  small.embedding.net[0].weight):
        for idx in [(0, 0), (1, 1), (param.shape[0] - 1, param.shape[1] - 1)]:
            with torch.no_grad():
                orig = param[idx].item()
                param[idx] = orig + 1e-6
                up = loss().item()
                param[idx] = orig - 1e-6
                down = loss().item()
                param[idx] = orig
            fd = (up - down) / 2e-6
            an = param.grad[idx].item()
            worst = max(worst, abs(an - fd) / max(abs(fd), 1e-6))
    wall = time.perf_counter() - t0
    ok = round_trip < 1e-6 and triangular and 0.98 <= mass <= 1.02 and worst < 1e-4 and wall < 120
    acceptance(3, "flow mechanics", ok,
               f"round-trip {round_trip:.1e}, triangular={triangular}, grid mass {mass:.4f}, "
               f"grad rel err {worst:.1e}, {wall:.0f}s")
    assert ok


def _batch_se(trace, n_batches=50):
    means = np.array([b.mean() for b in np.array_split(trace, n_batches)])
    return means.std(ddof=1) / np.sqrt(n_batches)


def test_mcmc_gaussian_fixture(acceptance):
    t0 = time.perf_counter()
    trace, _, _ = amwg_sample(lambda z: -0.5 * ((z[0] - 1.0) / 0.5) ** 2, [1.0], [0.5], MCMCConfig(rng_seed=0))
    t = trace[:, 0]
    mean_z = abs(t.mean() - 1.0) / _batch_se(t)
    std_z = abs(np.mean((t - 1.0) ** 2) - 0.25) / _batch_se((t - 1.0) ** 2)
    ks = stats.kstest(t, stats.norm(1.0, 0.5).cdf).statistic
    wall = time.perf_counter() - t0
    ok = len(t) == 15000 and mean_z < 3 and std_z < 3 and ks < 0.02 and wall < 60
    acceptance(4, "MCMC Gaussian fixture", ok,
               f"mean {mean_z:.2f} SE, second moment {std_z:.2f} SE, KS {ks:.4f}, {wall:.1f}s")
    assert ok


def test_posterior_metric_identities(acceptance):
    t0 = time.perf_counter()
    s = np.random.default_rng(4).normal(0.5, 0.1, 10**4)
    amb = marginal_metrics(s, 0.0, 1.0)[2]
    fwhm = 100 * 2 * np.sqrt(2 * np.log(2)) * 0.1
    delta = 0.5 + 1e-6 * np.random.default_rng(3).uniform(-1, 1, 5000)
    _, u_d, a_d = marginal_metrics(delta, 0.0, 1.0)
    worst = 0.0
    rng = np.random.default_rng(9)
    for _ in range(20):
        shift, scale = rng.uniform(-50, 50), 10 ** rng.uniform(-2, 2)
        b = rng.beta(3, 5, 4000)
        m0, u0, a0 = marginal_metrics(b, 0.0, 1.0)
        m1, u1, a1 = marginal_metrics(shift + scale * b, shift, shift + scale)
        worst = max(worst, abs(u1 - u0), abs(a1 - a0), abs(m1 - (shift + scale * m0)) / max(1.0, abs(shift) + scale))
    wall = time.perf_counter() - t0
    ok = abs(amb - fwhm) <= 1.5 and u_d < 0.5 and a_d < 0.5 and worst <= 1e-9 and wall < 60
    acceptance(9, "posterior-metric identities", ok,
               f"Gaussian ambiguity {amb:.2f} vs {fwhm:.2f}, near-delta u={u_d:.3f} a={a_d:.3f}, "
               f"affine max err {worst:.1e}, {wall:.1f}s")
    assert ok


def test_prior_transform_uniformity(acceptance):
    t0 = time.perf_counter()
    th = sample_prior(PriorSpec.for_space(STANDARD_MODEL), 10**5, rng_seed=2)
    edges = np.linspace(0.1, 3.0, 11)
    counts, _, _ = np.histogram2d(th[:, 3], th[:, 4], [edges, edges])
    w = edges[1] - edges[0]
    total = (3.0 - 0.1) ** 2 / 2
    obs, exp = [], []
    for i in range(10):
        for j in range(i + 1):
            obs.append(counts[i, j])
            exp.append(len(th) * (w * w if j < i else w * w / 2) / total)
    obs, exp = np.array(obs), np.array(exp)
    p = stats.chi2.sf(np.sum((obs - exp) ** 2 / exp), len(obs) - 1)
    upper_empty = counts[np.triu_indices(10, 1)].sum() == 0
    fr = sample_prior(PriorSpec.for_space(EXTENDED_SANDI), 10**5, rng_seed=3)
    fractions = [fr[:, 0], fr[:, 1], 1 - fr[:, 0] - fr[:, 1]]
    ks = max(stats.kstest(f, stats.beta(1, 2).cdf).statistic for f in fractions)
    wall = time.perf_counter() - t0
    ok = p > 0.01 and upper_empty and ks < 0.02 and wall < 60
    acceptance(10, "prior-transform uniformity", ok,
               f"triangle chi2 p={p:.3f}, simplex max KS {ks:.4f} vs Beta(1,2), {wall:.1f}s")
    assert ok


# -- criteria on desk-scale trained flows ---------------------------------------


def test_ppc_envelopes(acceptance, trained_flow, protocol):
    clean, noisy = trained_flow("standard_model"), trained_flow("standard_model", 50)
    t0 = time.perf_counter()
    a = posterior_predictive_check(clean, protocol, n_truths=10, n_pp=100, snr=None, seed=8)
    b = posterior_predictive_check(noisy, protocol, n_truths=10, n_pp=100, snr=50, seed=8)
    wall = time.perf_counter() - t0
    ok = a.coverage >= 0.95 and b.coverage >= 0.95 and b.mean_width > a.mean_width and wall < 600
    acceptance(8, "posterior predictive check", ok,
               f"coverage {a.coverage:.3f} noise-free, {b.coverage:.3f} SNR 50; mean width "
               f"{a.mean_width:.4f} vs {b.mean_width:.4f}, {wall:.0f}s")
    assert ok


def test_snr_monotonicity(acceptance, trained_flow, protocol):
    flows = {None: trained_flow("standard_model"), 50: trained_flow("standard_model", 50),
             25: trained_flow("standard_model", 25)}
    t0 = time.perf_counter()
    rep = snr_sweep(flows, protocol, n_sims=200, seed=21)
    wall = time.perf_counter() - t0 + sum(f.setup_seconds_ for f in flows.values())
    u = [rep.mean_uncertainty(lab) for lab in ("none", "50", "25")]
    ok = u[0] < u[1] < u[2] and wall < 1800
    acceptance(7, "SNR monotonicity", ok,
               f"mean uncertainty {u[0]:.2f} < {u[1]:.2f} < {u[2]:.2f} (none/50/25), "
               f"{wall / 60:.1f} min incl. training")
    assert ok


def test_degeneracy_ordering(acceptance, trained_flow, protocol):
    flows = {m: trained_flow(m) for m in ("ball_stick", "standard_model", "extended_sandi")}
    t0 = time.perf_counter()
    frac = {m: degeneracy_census(f, protocol, n_sims=1000, seed=31).voxel_fraction for m, f in flows.items()}
    wall = time.perf_counter() - t0
    ok = (frac["extended_sandi"] > frac["standard_model"] > frac["ball_stick"]
          and frac["ball_stick"] < 0.01 and wall < 1800)
    acceptance(6, "degeneracy ordering", ok,
               f"degenerate voxels SANDI {frac['extended_sandi']:.3f}, SM {frac['standard_model']:.3f}, "
               f"BS {frac['ball_stick']:.3f}, {wall / 60:.1f} min")
    assert ok


def test_flow_vs_mcmc(acceptance, trained_flow, protocol):
    flow = trained_flow("standard_model", 50)
    t0 = time.perf_counter()
    rep = compare_with_mcmc(flow, protocol, n_sims=50, snr=50, seed=41, n_samples=15000)
    wall = time.perf_counter() - t0
    fb, mb = rep.mean_abs_bias("flow"), rep.mean_abs_bias("mcmc")
    ratio = fb / mb
    ok = bool(np.all(fb <= 1.1 * mb)) and rep.speedup >= 100 and wall < 7200
    acceptance(5, "flow vs MCMC", ok,
               "bias ratio flow/MCMC " + ", ".join(f"{n} {r:.2f}" for n, r in zip(rep.names, ratio))
               + f"; speedup {rep.speedup:.0f}x; {wall / 60:.1f} min")
    assert ok
