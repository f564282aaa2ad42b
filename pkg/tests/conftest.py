"""Shared desk-scale flows for the slow test modules.

Each flow is trained once per session on 10^5 prior-predictive pairs over the
bundled protocol. Checkpoints are cached in the pytest cache directory so an
interrupted session can resume; ``pytest --cache-clear`` retrains from
scratch. Simulation plus training wall-clock is stored next to each
checkpoint and exposed as ``flow.setup_seconds_``.
"""

import json
import time

import pytest

from micropost import __version__
from micropost.estimator import FlowPosterior, load_flow
from micropost.forward_models import generate_training_set, get_space
from micropost.harness import shell_statistics
from micropost.protocol import default_protocol

N_TRAIN = 100_000
MAX_EPOCHS = 60


@pytest.fixture(scope="session")
def protocol():
    return default_protocol()


@pytest.fixture(scope="session")
def trained_flow(request, protocol):
    cache_dir = request.config.cache.mkdir(f"micropost-flows-{__version__}")
    flows = {}

    def get(model_id, snr=None, summary=False):
        """Flow for ``model_id`` at ``snr``; ``summary`` conditions on shell means instead of raw signals."""
        key = (model_id, snr, summary)
        if key in flows:
            return flows[key]
        label = ("none" if snr is None else f"{snr:g}") + ("_summary" if summary else "")
        path = cache_dir / f"{model_id}_{label}_{N_TRAIN}_{MAX_EPOCHS}.pt"
        timing = path.with_suffix(".time.json")
        if path.exists() and timing.exists():
            flow = load_flow(path)
            flow.setup_seconds_ = json.loads(timing.read_text())["seconds"]
        else:
            t0 = time.perf_counter()
            space = get_space(model_id)
            seed = 100 + 10 * ["ball_stick", "standard_model", "extended_sandi"].index(model_id) + (snr or 0) % 7
            theta, x = generate_training_set(space, protocol, N_TRAIN, snr=snr, rng_seed=int(seed))
            if summary:
                x = shell_statistics(x, protocol)
            flow = FlowPosterior(space=space, embedding=not summary, max_epochs=MAX_EPOCHS,
                                 random_state=int(seed)).fit(x, theta)
            flow.setup_seconds_ = time.perf_counter() - t0
            flow.save(path)
            timing.write_text(json.dumps({"seconds": flow.setup_seconds_}))
        flows[key] = flow
        return flow

    return get


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line[1])


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, title, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        request.config._acceptance_lines.append((number, line))
        print(line)
        return ok

    return record
