import copy
import math

import numpy as np
import pytest
import torch
from scipy import stats
from sklearn.base import clone

from micropost.estimator import FlowPosterior, TrainingConfig, load_flow
from micropost.exceptions import (
    ConfigurationError,
    DimensionError,
    NumericError,
    TrainingDivergedError,
    ValidationError,
)
from micropost.flow import ConditionalMAF, MadeBlock, autoregressive_check, made_degrees
from micropost.forward_models import ParameterSpace

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def randomize(module, scale=0.3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def maf(d=3, m=4, seed=0, **kw):
    torch.manual_seed(seed)
    return ConditionalMAF(d, m, **kw).double()


# -- masks and degrees -------------------------------------------------------


def test_degrees_cycle():
    inp, hidden, out = made_degrees(3, (5, 4))
    assert inp.tolist() == [1, 2, 3] and out.tolist() == [1, 2, 3]
    assert hidden[0].tolist() == [1, 2, 1, 2, 1]
    assert made_degrees(1, (4,))[1][0].tolist() == [0, 0, 0, 0]


def test_mask_rules():
    block = MadeBlock(3, 2, (5, 4))
    m1, m2, mo = (m.numpy() for m in block.masks())
    h1, h2 = block.hidden_degrees
    np.testing.assert_array_equal(m1, (h1[:, None] >= block.input_degrees[None, :]).astype(float))
    np.testing.assert_array_equal(m2, (h2[:, None] >= h1[None, :]).astype(float))
    out = np.concatenate([block.output_degrees] * 2)
    np.testing.assert_array_equal(mo, (out[:, None] > h2[None, :]).astype(float))


@pytest.mark.parametrize("d", [1, 2, 3, 6])
def test_autoregressive_fresh_and_randomized(d):
    block = MadeBlock(d, 3).double()
    assert autoregressive_check(block)
    assert autoregressive_check(randomize(block))


def test_autoregressive_negative_control():
    block = randomize(MadeBlock(3, 2).double())
    for layer in [*block.hidden_layers, block.output_layer]:
        layer.mask.fill_(1.0)
    assert not autoregressive_check(block)


def test_random_degrees_still_autoregressive():
    flow = randomize(maf(d=4, random_degrees_seed=3))
    assert all(autoregressive_check(b) for b in flow.blocks)


def test_permutation_coverage():
    flow = maf(d=6)
    orders = flow.block_orders()
    assert len(orders) == 5
    for p in range(6):
        positions = {int(np.flatnonzero(o == p)[0]) for o in orders}
        assert len(positions) >= 2


# -- identity flow ---------------------------------------------------------


def test_identity_flow_log_prob():
    flow = maf(d=3)
    theta = torch.randn(50, 3, dtype=torch.float64)
    x = torch.randn(50, 4, dtype=torch.float64)
    lp = flow.log_prob(theta, x).detach().numpy()
    expected = stats.norm.logpdf(theta.numpy()).sum(axis=1)
    np.testing.assert_allclose(lp, expected, atol=1e-12)


def test_identity_flow_samples_standard_normal():
    flow = maf(d=3)
    s = flow.sample(torch.zeros(4, dtype=torch.float64), 10**4, torch.Generator().manual_seed(0)).detach().numpy()
    assert np.all(np.abs(s.mean(0)) < 0.05)
    assert np.all((s.var(0) > 0.9) & (s.var(0) < 1.1))


def test_standardizer_jacobian():
    flow = maf(d=2)
    flow.set_standardizer([1.0, -2.0], [2.0, 0.5], np.zeros(4), np.ones(4))
    theta = torch.tensor([[1.5, -2.2]], dtype=torch.float64)
    lp = flow.log_prob(theta, torch.zeros(1, 4, dtype=torch.float64)).item()
    expected = stats.norm(1.0, 2.0).logpdf(1.5) + stats.norm(-2.0, 0.5).logpdf(-2.2)
    assert lp == pytest.approx(expected, abs=1e-12)


# -- invertibility and log-det ---------------------------------------------


def test_round_trips():
    flow = randomize(maf(d=3))
    gen = torch.Generator().manual_seed(1)
    z = torch.randn(1000, 3, generator=gen, dtype=torch.float64)
    ctx = flow.features(torch.randn(1000, 4, generator=gen, dtype=torch.float64))
    u = flow.inverse_transform(z, ctx)
    z2, _, _ = flow.transform(u, ctx)
    assert torch.max(torch.abs(z2 - z)) < 1e-6
    u2 = flow.inverse_transform(flow.transform(u, ctx)[0], ctx)
    assert torch.max(torch.abs(u2 - u)) < 1e-6


def test_logdet_additivity_and_jacobian():
    flow = randomize(maf(d=3))
    u = torch.randn(8, 3, dtype=torch.float64)
    ctx = flow.features(torch.randn(8, 4, dtype=torch.float64))
    _, total, per_block = flow.transform(u, ctx)
    assert torch.max(torch.abs(total - sum(per_block))) < 1e-9
    # against the determinant of the full autograd Jacobian
    for i in range(3):
        jac = torch.autograd.functional.jacobian(lambda v: flow.transform(v[None], ctx[i : i + 1])[0][0], u[i])
        assert torch.logdet(jac).item() == pytest.approx(total[i].item(), abs=1e-9)


def test_gradients_match_finite_differences():
    flow = randomize(maf(d=2, m=5), seed=4)
    gen = torch.Generator().manual_seed(5)
    theta = torch.randn(10, 2, generator=gen, dtype=torch.float64)
    x = torch.randn(10, 5, generator=gen, dtype=torch.float64)

    def loss():
        return -flow.log_prob(theta, x).mean()

    flow.zero_grad()
    loss().backward()
    checked = {
        "made hidden": flow.blocks[0].hidden_layers[0].weight,
        "made context": flow.blocks[1].context_layer.weight,
        "made output": flow.blocks[2].output_layer.weight,
        "embedding": flow.embedding.net[0].weight,
    }
    eps = 1e-6
    for name, param in checked.items():
        mask = getattr(flow.blocks[0].hidden_layers[0], "mask", None)
        for idx in [(0, 0), (1, 1), (param.shape[0] - 1, param.shape[1] - 1)]:
            if name == "made hidden" and mask[idx] == 0:
                continue
            with torch.no_grad():
                orig = param[idx].item()
                param[idx] = orig + eps
                up = loss().item()
                param[idx] = orig - eps
                down = loss().item()
                param[idx] = orig
            fd = (up - down) / (2 * eps)
            an = param.grad[idx].item()
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-9), name


# -- estimator plumbing --------------------------------------------------------


def test_training_config_validation():
    with pytest.raises(ConfigurationError):
        TrainingConfig(validation_fraction=0.0)
    with pytest.raises(ConfigurationError):
        TrainingConfig(patience_epochs=0)
    with pytest.raises(ConfigurationError):
        TrainingConfig(learning_rate=-1)


def test_sklearn_protocol():
    est = FlowPosterior(n_features=4, max_epochs=3)
    assert est.get_params()["n_features"] == 4
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def toy_gaussian(n, seed=0, m=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, m)), rng.standard_normal((n, 1))


def test_too_few_rows():
    X, y = toy_gaussian(999)
    with pytest.raises(ConfigurationError):
        FlowPosterior(max_epochs=1).fit(X, y)


def test_rows_outside_support():
    X, _ = toy_gaussian(1000)
    y = np.random.default_rng(0).uniform(0, 2, size=(1000, 1))
    with pytest.raises(ValidationError):
        FlowPosterior(space=ParameterSpace(("a",), (0.0,), (1.0,)), max_epochs=1).fit(X, y)


def test_divergence_is_reported():
    X, y = toy_gaussian(2000)
    with pytest.raises(TrainingDivergedError, match="learning rate"):
        FlowPosterior(learning_rate=1e35, max_epochs=3).fit(X, y)


def test_determinism_and_progress():
    X, y = toy_gaussian(2000, seed=1)
    a = FlowPosterior(max_epochs=3, random_state=7).fit(X, y)
    b = FlowPosterior(max_epochs=3, random_state=7).fit(X, y)
    assert a.report_.best_validation_loss == pytest.approx(b.report_.best_validation_loss, abs=1e-6)
    assert a.report_.best_validation_loss <= a.report_.validation_loss[0]
    assert a.report_.n_validation == 100 and a.report_.n_train == 1900
    assert a.report_.hidden_degrees == "deterministic"


def test_embedding_is_trained():
    X, y = toy_gaussian(2000, seed=2)
    before = FlowPosterior(random_state=3)._build(1, 3).embedding.net[0].weight.detach().clone()
    est = FlowPosterior(max_epochs=1, random_state=3).fit(X, y)
    after = est.model_.embedding.net[0].weight.detach()
    assert torch.linalg.norm(after - before) > 0


def test_inference_input_errors():
    X, y = toy_gaussian(1000, seed=3)
    est = FlowPosterior(max_epochs=1).fit(X, y)
    with pytest.raises(NumericError):
        est.log_prob([[0.0]], [[np.nan, 0.0, 0.0]])
    with pytest.raises(DimensionError):
        est.sample(np.zeros(4), 10)
    assert est.transform(X[:5]).shape == (5, 6)


# -- trained toys ----------------------------------------------------------


@pytest.fixture(scope="module")
def normal_toy():
    """theta ~ N(0, 1) with an uninformative signal."""
    rng = np.random.default_rng(10)
    y = rng.standard_normal((20000, 1))
    X = rng.uniform(size=(20000, 3))
    return FlowPosterior(max_epochs=15, patience_epochs=5, random_state=1).fit(X, y)


def test_normal_toy_log_prob(normal_toy):
    lp = normal_toy.log_prob([[0.0]], [[0.5, 0.5, 0.5]])[0]
    assert lp == pytest.approx(-LOG_SQRT_2PI, abs=0.05)


def test_normal_toy_integrates_to_one(normal_toy):
    grid = np.linspace(-10, 10, 10**4)
    q = np.exp(normal_toy.log_prob(grid[:, None], [[0.2, 0.7, 0.4]]))
    assert np.trapezoid(q, grid) == pytest.approx(1.0, abs=0.01)


def test_trained_blocks_autoregressive(normal_toy):
    blocks = [copy.deepcopy(b).double() for b in normal_toy.model_.blocks]
    assert all(autoregressive_check(b) for b in blocks)


def test_checkpoint_round_trip(normal_toy, tmp_path):
    path = tmp_path / "toy.pt"
    normal_toy.save(path)
    back = load_flow(path)
    theta = np.linspace(-2, 2, 7)[:, None]
    X = np.random.default_rng(0).uniform(size=(7, 3))
    np.testing.assert_array_equal(back.log_prob(theta, X), normal_toy.log_prob(theta, X))
    np.testing.assert_array_equal(back.sample(X[0], 20, 4), normal_toy.sample(X[0], 20, 4))
    assert len(back.report_.train_loss) == len(normal_toy.report_.train_loss)
    (tmp_path / "toy.pt.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_flow(path)
    with pytest.raises(ConfigurationError):
        load_flow(tmp_path / "missing.pt")


def test_training_report_csv(normal_toy, tmp_path):
    normal_toy.report_.to_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + normal_toy.report_.stopped_epoch


def test_sampling_is_seeded(normal_toy):
    x = [0.1, 0.2, 0.3]
    np.testing.assert_array_equal(normal_toy.sample(x, 50, 3), normal_toy.sample(x, 50, 3))
    assert not np.array_equal(normal_toy.sample(x, 50, 3), normal_toy.sample(x, 50, 4))


@pytest.fixture(scope="module")
def conjugate_toy():
    """theta ~ U(0, 1); twenty replicated measurements with sigma = 0.1."""
    rng = np.random.default_rng(11)
    y = rng.uniform(size=(20000, 1))
    X = y + 0.1 * rng.standard_normal((20000, 20))
    space = ParameterSpace(("theta",), (0.0,), (1.0,))
    return FlowPosterior(space=space, max_epochs=25, patience_epochs=5, random_state=2).fit(X, y)


def test_conjugate_posterior_mean(conjugate_toy):
    rng = np.random.default_rng(12)
    for truth in (0.2, 0.5, 0.97):
        x = truth + 0.1 * rng.standard_normal(20)
        s = 0.1 / np.sqrt(20)
        post = stats.truncnorm((0 - x.mean()) / s, (1 - x.mean()) / s, loc=x.mean(), scale=s)
        draws = conjugate_toy.sample(x, 20000, 0)[:, 0]
        assert draws.mean() == pytest.approx(post.mean(), abs=0.02)


@pytest.fixture(scope="module")
def bimodal_toy():
    """The signal only sees theta_1 squared, so its sign is unidentifiable."""
    rng = np.random.default_rng(13)
    y = rng.uniform(-1, 1, size=(20000, 2))
    X = np.hstack([y[:, :1] ** 2 + 0.02 * rng.standard_normal((20000, 5)), y[:, 1:] + 0.05 * rng.standard_normal((20000, 5))])
    return FlowPosterior(max_epochs=25, patience_epochs=5, random_state=3).fit(X, y)


def test_bimodal_mass_ratio(bimodal_toy):
    x = np.concatenate([np.full(5, 0.36), np.full(5, -0.3)])
    draws = bimodal_toy.sample(x, 20000, 0)
    pos = np.mean(draws[:, 0] > 0)
    assert 1 / 1.1 <= pos / (1 - pos) <= 1.1
    # both modes sit near +-0.6
    assert abs(np.median(draws[draws[:, 0] > 0, 0]) - 0.6) < 0.1
    assert abs(np.median(draws[draws[:, 0] < 0, 0]) + 0.6) < 0.1
