"""Command-line entry point.

Each subcommand reads an optional JSON config (``--config``); explicit flags
override config values. Every run writes ``manifest.json`` next to its
outputs. Exit codes: 0 success, 2 configuration or validation error,
3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigurationError, MicropostError, ValidationError

ENV_WORKERS = "MICROPOST_WORKERS"
ENV_OUTPUT = "MICROPOST_OUTPUT_DIR"

# hard defaults, applied after config file and flags
DEFAULTS = {
    "snr": None,
    "noise_mode": "rician",
    "protocol": None,
    "max_b": None,
    "n_samples": 50000,
    "learning_rate": 1e-3,
    "batch_size": 128,
    "patience": 30,
    "validation_fraction": 0.05,
    "max_epochs": 500,
    "n_features": 6,
    "embedding": True,
    "summary_statistics": False,
    "mcmc_samples": 15200,
    "burn_in": 200,
    "thinning": 1,
    "adaptation_interval": 50,
    "n_truths": 10,
    "n_pp": 100,
    "workers": 1,
    "save_samples": False,
}
STOCHASTIC = {"simulate", "train", "infer", "mcmc", "compare", "ppc", "census", "snr-sweep", "correlation"}


def _snr(value):
    if value is None or str(value).lower() in ("none", "inf", "noise-free"):
        return None
    v = float(value)
    if not v > 0:
        raise argparse.ArgumentTypeError("snr must be positive or 'none'")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="micropost", description="Amortised posterior estimation for dMRI tissue models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, model=True):
        sp.add_argument("--config", help="JSON run config; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--protocol", help="gradient table (defaults to the bundled 6-shell protocol)")
        sp.add_argument("--max-b", type=float, dest="max_b", help="drop measurements above this b-value (s/mm^2)")
        if model:
            sp.add_argument("--model", dest="model_id")

    s = sub.add_parser("simulate", help="generate a prior-predictive dataset")
    common(s)
    s.add_argument("--n", type=int)
    s.add_argument("--snr", type=_snr)
    s.add_argument("--noise-mode", dest="noise_mode")

    s = sub.add_parser("train", help="fit a flow to a simulated dataset")
    common(s, model=False)
    s.add_argument("--data", required=False)
    s.add_argument("--lr", type=float, dest="learning_rate")
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.add_argument("--patience", type=int)
    s.add_argument("--validation-fraction", type=float, dest="validation_fraction")
    s.add_argument("--max-epochs", type=int, dest="max_epochs")
    s.add_argument("--n-features", type=int, dest="n_features")
    s.add_argument("--summary-statistics", action="store_const", const=True, dest="summary_statistics",
                   help="condition on shell means instead of learned features")

    s = sub.add_parser("infer", help="posterior summaries for measured voxels")
    common(s, model=False)
    s.add_argument("--checkpoint")
    s.add_argument("--signals")
    s.add_argument("--n-samples", type=int, dest="n_samples")
    s.add_argument("--workers", type=int)
    s.add_argument("--save-samples", action="store_const", const=True, dest="save_samples")

    s = sub.add_parser("mcmc", help="AMWG chains for measured voxels")
    common(s)
    s.add_argument("--signals")
    s.add_argument("--snr", type=_snr)
    s.add_argument("--n-samples", type=int, dest="mcmc_samples")
    s.add_argument("--burn-in", type=int, dest="burn_in")
    s.add_argument("--thinning", type=int)
    s.add_argument("--adaptation-interval", type=int, dest="adaptation_interval")

    for name, helptext in (
        ("compare", "flow versus MCMC on simulated voxels"),
        ("ppc", "posterior predictive check"),
        ("census", "degeneracy census"),
        ("correlation", "learned features versus shell means"),
    ):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--checkpoint")
        s.add_argument("--n", type=int)
        s.add_argument("--snr", type=_snr)
        s.add_argument("--n-samples", type=int, dest="n_samples")
        if name == "ppc":
            s.add_argument("--n-pp", type=int, dest="n_pp")
        if name == "census":
            s.add_argument("--workers", type=int)

    s = sub.add_parser("snr-sweep", help="uncertainty across noise levels")
    common(s)
    s.add_argument("--checkpoints", nargs="+", metavar="SNR=PATH", help="one checkpoint per noise level")
    s.add_argument("--n", type=int)
    s.add_argument("--n-samples", type=int, dest="n_samples")
    return p


# --------------------------------------------------------------------------
# config handling


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge hard defaults, the JSON config and explicit flags (in that order)."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError("config must be a JSON object")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key in ("config",) or val is None:
            continue
        cfg[key] = val
    if cfg.get("out") is None:
        cfg["out"] = os.environ.get(ENV_OUTPUT, ".")
    if ENV_WORKERS in os.environ and getattr(args, "workers", None) is None:
        cfg["workers"] = int(os.environ[ENV_WORKERS])
    if "snr" in cfg:
        cfg["snr"] = _snr(cfg["snr"])
    if args.command in STOCHASTIC and cfg.get("seed") is None:
        raise ConfigurationError(f"{args.command} needs a seed (--seed or 'seed' in the config)")
    for key in ("protocol", "signals", "checkpoint", "data"):
        val = cfg.get(key)
        if val is not None and not Path(val).exists():
            raise ConfigurationError(f"{key} path {val} does not exist")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _versions() -> dict:
    import scipy
    import sklearn
    import torch

    return {
        "micropost": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "torch": torch.__version__,
    }


def write_manifest(out: Path, command: str, cfg: dict, wall_clock: float, outputs: list) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": {"seed": cfg.get("seed")},
        "versions": _versions(),
        "outputs": sorted(str(o) for o in outputs),
        "wall_clock_s": wall_clock,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _protocol(cfg):
    from .protocol import load_protocol, default_protocol

    prot = load_protocol(cfg["protocol"]) if cfg.get("protocol") else default_protocol()
    mask = None
    if cfg.get("max_b") is not None:
        mask = prot.bvalue_cutoff_mask(cfg["max_b"])
        prot = prot.select(mask)
    return prot, mask


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigurationError(f"missing required setting {k!r}")


def _flow(cfg):
    from .estimator import load_flow

    _require(cfg, "checkpoint")
    return load_flow(cfg["checkpoint"])


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg, out):
    from .forward_models import generate_training_set, get_space
    from .io import save_dataset

    _require(cfg, "model_id", "n")
    if cfg["n"] < 1:
        raise ValidationError("--n must be >= 1")
    prot, _ = _protocol(cfg)
    space = get_space(cfg["model_id"])
    theta, x, mu = generate_training_set(
        space, prot, cfg["n"], snr=cfg["snr"], rng_seed=cfg["seed"], noise_mode=cfg["noise_mode"],
        return_orientations=True,
    )
    meta = {"model_id": space.model_id, "n": cfg["n"], "snr": cfg["snr"], "seed": cfg["seed"],
            "protocol": cfg.get("protocol"), "max_b": cfg.get("max_b"), "space": space.to_dict()}
    save_dataset(out, theta, x, meta, mu)
    print(f"wrote {cfg['n']} simulations to {out}")
    return [out / "theta.npy", out / "signals.npy", out / "orientations.npy", out / "dataset.json"]


def cmd_train(cfg, out):
    from .estimator import FlowPosterior
    from .forward_models import ParameterSpace
    from .harness import shell_statistics
    from .io import load_dataset

    _require(cfg, "data")
    theta, x, meta = load_dataset(cfg["data"])
    try:
        space = ParameterSpace.from_dict(meta["space"])
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"dataset sidecar lacks a parameter space: {exc}") from None
    if cfg["summary_statistics"]:
        prot, _ = _protocol({**cfg, "protocol": meta.get("protocol"), "max_b": meta.get("max_b")})
        x = shell_statistics(x, prot)
    est = FlowPosterior(
        space=space,
        n_features=cfg["n_features"],
        embedding=bool(cfg["embedding"]) and not cfg["summary_statistics"],
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        patience_epochs=cfg["patience"],
        validation_fraction=cfg["validation_fraction"],
        max_epochs=cfg["max_epochs"],
        random_state=cfg["seed"],
    )
    est.fit(x, theta)
    ckpt = out / "flow.pt"
    est.save(ckpt)
    est.report_.to_csv(out / "training_report.csv")
    print(f"final validation loss {est.report_.best_validation_loss:.6f} (epoch {est.report_.best_epoch})")
    return [ckpt, Path(str(ckpt) + ".json"), out / "training_report.csv"]


def _normalise_voxels(X, prot):
    """Divide each voxel by its mean b0; rows with mean b0 <= 0 come back flagged."""
    if prot.b0_indices.size == 0:
        return X, np.zeros(len(X), dtype=bool)
    b0 = X[:, prot.b0_indices].mean(axis=1)
    bad = ~(b0 > 0) | ~np.all(np.isfinite(X), axis=1)
    Xn = np.where(bad[:, None], 0.0, X / np.where(bad, 1.0, b0)[:, None])
    return Xn, bad


def _load_voxels(cfg):
    from .io import read_signals

    _require(cfg, "signals")
    X, header_protocol = read_signals(cfg["signals"])
    if cfg.get("protocol") is None and header_protocol is not None:
        cfg = {**cfg, "protocol": header_protocol}
    prot, mask = _protocol(cfg)
    if mask is not None:
        if X.shape[1] != len(mask):
            raise ValidationError(f"signals have {X.shape[1]} columns, protocol has {len(mask)} entries")
        X = X[:, mask]
    prot.validate_signal(X)
    return X, prot


def cmd_infer(cfg, out):
    from .harness import infer_voxels
    from .posterior import write_summary_csv

    flow = _flow(cfg)
    X, prot = _load_voxels(cfg)
    if X.shape[1] != flow.n_features_in_:
        raise ValidationError(f"checkpoint expects {flow.n_features_in_} measurements, signals have {X.shape[1]}")
    Xn, bad = _normalise_voxels(X, prot)
    summaries = [None] * len(X)
    errors = ["non-positive or non-finite b0 signal" if b else "" for b in bad]
    good = np.flatnonzero(~bad)
    samples_out = []
    if good.size:
        res = infer_voxels(flow, Xn[good], cfg["n_samples"], cfg["seed"], cfg["workers"],
                           keep_samples=cfg["save_samples"])
        for k, i in enumerate(good):
            summaries[i] = res["summaries"][k]
            errors[i] = res["errors"][k]
        if cfg["save_samples"]:
            for k, i in enumerate(good):
                if res["samples"][k] is not None:
                    path = out / f"samples_voxel{i}.npy"
                    np.save(path, res["samples"][k].values)
                    samples_out.append(path)
    path = out / "summary.csv"
    write_summary_csv(path, summaries, flow.space.names, errors=errors)
    n_err = sum(bool(e) for e in errors)
    print(f"summarised {len(X)} voxels ({n_err} flagged) -> {path}")
    return [path, *samples_out]


def cmd_mcmc(cfg, out):
    from .forward_models import get_space
    from .mcmc import MCMCConfig, run_amwg, save_chain
    from .posterior import PosteriorSamples, summarize, write_summary_csv
    from .priors import PriorSpec

    _require(cfg, "model_id", "snr")
    X, prot = _load_voxels(cfg)
    Xn, bad = _normalise_voxels(X, prot)
    spec = PriorSpec.for_space(get_space(cfg["model_id"]))
    summaries, errors, outputs = [], [], []
    for i, x in enumerate(Xn):
        if bad[i]:
            summaries.append(None)
            errors.append("non-positive or non-finite b0 signal")
            continue
        mc = MCMCConfig(
            n_samples=cfg["mcmc_samples"], burn_in=cfg["burn_in"], thinning=cfg["thinning"],
            adaptation_interval=cfg["adaptation_interval"], sigma_noise=1.0 / cfg["snr"], rng_seed=cfg["seed"] + i,
        )
        try:
            chain = run_amwg(x, spec, prot, mc)
        except MicropostError as exc:
            summaries.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")
            continue
        base = out / f"chain_voxel{i}"
        save_chain(chain, base, mc)
        outputs += [base.with_suffix(".npy"), base.with_suffix(".json")]
        try:
            summaries.append(summarize(PosteriorSamples(chain.trace, spec.space, 1.0)))
            errors.append("")
        except MicropostError as exc:
            summaries.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")
    path = out / "summary.csv"
    write_summary_csv(path, summaries, spec.space.names, errors=errors)
    return [path, *outputs]


def _check_model(flow, cfg):
    if cfg.get("model_id") and flow.space.model_id != cfg["model_id"]:
        raise ConfigurationError(f"checkpoint is for {flow.space.model_id}, not {cfg['model_id']}")


def _harness_protocol(flow, cfg):
    prot, _ = _protocol(cfg)
    if prot.m != flow.n_features_in_:
        raise ConfigurationError(f"checkpoint expects {flow.n_features_in_} measurements, protocol has {prot.m}")
    return prot


def cmd_compare(cfg, out):
    from .harness import compare_with_mcmc

    flow = _flow(cfg)
    _check_model(flow, cfg)
    _require(cfg, "n", "snr")
    prot = _harness_protocol(flow, cfg)
    n_samples = cfg["mcmc_samples"] - cfg["burn_in"]
    rep = compare_with_mcmc(flow, prot, cfg["n"], cfg["snr"], cfg["seed"], n_samples=n_samples)
    rep.save(out / "comparison.json")
    rep.to_csv(out / "comparison.csv")
    print("mean |bias| flow:", np.round(rep.mean_abs_bias("flow"), 4).tolist())
    print("mean |bias| mcmc:", np.round(rep.mean_abs_bias("mcmc"), 4).tolist())
    print(f"speed-up (sampling): {rep.speedup:.1f}x")
    return [out / "comparison.json", out / "comparison.csv"]


def cmd_ppc(cfg, out):
    from .harness import posterior_predictive_check

    flow = _flow(cfg)
    _check_model(flow, cfg)
    prot = _harness_protocol(flow, cfg)
    n = cfg.get("n") or cfg["n_truths"]
    rep = posterior_predictive_check(flow, prot, n, cfg["n_pp"], cfg["snr"], cfg["seed"],
                                     n_samples=min(cfg["n_samples"], 10000))
    rep.save(out / "ppc.json")
    print(f"coverage {rep.coverage:.3f}, mean envelope width {rep.mean_width:.4f}")
    return [out / "ppc.json"]


def cmd_census(cfg, out):
    from .harness import degeneracy_census

    flow = _flow(cfg)
    _check_model(flow, cfg)
    _require(cfg, "n")
    prot = _harness_protocol(flow, cfg)
    rep = degeneracy_census(flow, prot, cfg["n"], cfg["snr"], cfg["seed"], n_samples=min(cfg["n_samples"], 10000),
                            n_workers=cfg["workers"])
    rep.save(out / "census.json")
    print("degenerate counts:", dict(zip(rep.names, rep.counts.tolist())))
    return [out / "census.json"]


def cmd_snr_sweep(cfg, out):
    from .estimator import load_flow
    from .harness import snr_sweep

    _require(cfg, "checkpoints", "n")
    flows = {}
    for item in cfg["checkpoints"]:
        level, sep, path = str(item).partition("=")
        if not sep:
            raise ConfigurationError(f"expected SNR=PATH, got {item!r}")
        if not Path(path).exists():
            raise ConfigurationError(f"checkpoint {path} does not exist")
        flows[_snr(level)] = load_flow(path)
    first = next(iter(flows.values()))
    _check_model(first, cfg)
    prot = _harness_protocol(first, cfg)
    rep = snr_sweep(flows, prot, cfg["n"], cfg["seed"], n_samples=min(cfg["n_samples"], 10000))
    rep.save(out / "snr_sweep.json")
    for lab in rep.labels:
        print(f"SNR {lab}: mean uncertainty {rep.mean_uncertainty(lab):.3f}")
    return [out / "snr_sweep.json"]


def cmd_correlation(cfg, out):
    from .harness import feature_correlation

    flow = _flow(cfg)
    _check_model(flow, cfg)
    _require(cfg, "n")
    prot = _harness_protocol(flow, cfg)
    rep = feature_correlation(flow, prot, cfg["n"], cfg["snr"], cfg["seed"])
    rep.save(out / "correlation.json")
    np.savetxt(out / "correlation.csv", rep.matrix, delimiter=",", header=",".join(rep.statistic_names),
               comments="", fmt="%.17g")
    i, r = rep.weakest_feature()
    print(f"least explained feature: {i} (max |r| = {r:.3f})")
    return [out / "correlation.json", out / "correlation.csv"]


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "infer": cmd_infer,
    "mcmc": cmd_mcmc,
    "compare": cmd_compare,
    "ppc": cmd_ppc,
    "census": cmd_census,
    "snr-sweep": cmd_snr_sweep,
    "correlation": cmd_correlation,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, time.perf_counter() - t0, outputs)
    except (ConfigurationError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 3
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
