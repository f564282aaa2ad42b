"""Scikit-learn style estimator around :class:`~micropost.flow.ConditionalMAF`.

``FlowPosterior.fit(X, y)`` learns ``q(theta | x)`` from simulated pairs,
with ``X`` the signals and ``y`` the parameters. After fitting, ``sample``
and ``log_prob`` give posterior draws and densities, ``transform`` returns
the learned signal features and ``predict`` the per-parameter MAP.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigurationError, DimensionError, NumericError, TrainingDivergedError, ValidationError
from .flow import ConditionalMAF
from .forward_models import ParameterSpace

__all__ = ["TrainingConfig", "TrainingReport", "FlowPosterior", "load_flow"]

CHECKPOINT_VERSION = 1
MIN_TRAINING_ROWS = 1000
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    patience_epochs: int = 30
    validation_fraction: float = 0.05
    max_epochs: int = 500
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if self.patience_epochs < 1:
            raise ConfigurationError("patience_epochs must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")


@dataclass
class TrainingReport:
    train_loss: list = field(default_factory=list)
    validation_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    n_train: int = 0
    n_validation: int = 0
    wall_clock_s: float = 0.0
    hidden_degrees: str = "deterministic"

    @property
    def best_validation_loss(self) -> float:
        return self.validation_loss[self.best_epoch - 1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "validation_loss"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.validation_loss), start=1):
                w.writerow([i, repr(a), repr(b)])

    def to_dict(self) -> dict:
        return asdict(self)


def _batched(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


class FlowPosterior(BaseEstimator):
    """Amortised neural posterior estimator.

    Parameters
    ----------
    space : ParameterSpace, optional
        Prior box of the parameters. Training rows outside it are rejected
        and it is carried into checkpoints.
    n_features : int
        Width of the learned signal summary.
    embedding : bool
        With ``False`` the flow is conditioned on the (standardised) input
        directly, e.g. on hand-crafted summary statistics.
    random_degrees : bool
        Draw MADE hidden degrees at random (seeded) instead of cycling.
    dtype : {"float32", "float64"}
    """

    def __init__(
        self,
        space: ParameterSpace | None = None,
        n_features: int = 6,
        n_blocks: int = 5,
        made_hidden=(64, 64),
        embedding_hidden=(256, 128),
        embedding: bool = True,
        learning_rate: float = 1e-3,
        batch_size: int = 128,
        patience_epochs: int = 30,
        validation_fraction: float = 0.05,
        max_epochs: int = 500,
        random_state: int = 0,
        random_degrees: bool = False,
        dtype: str = "float32",
        verbose: bool = False,
    ):
        self.space = space
        self.n_features = n_features
        self.n_blocks = n_blocks
        self.made_hidden = made_hidden
        self.embedding_hidden = embedding_hidden
        self.embedding = embedding
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience_epochs = patience_epochs
        self.validation_fraction = validation_fraction
        self.max_epochs = max_epochs
        self.random_state = random_state
        self.random_degrees = random_degrees
        self.dtype = dtype
        self.verbose = verbose

    # -- construction ------------------------------------------------------

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            self.learning_rate,
            self.batch_size,
            self.patience_epochs,
            self.validation_fraction,
            self.max_epochs,
            self.random_state,
        )

    def _torch_dtype(self):
        try:
            return _DTYPES[self.dtype]
        except KeyError:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}") from None

    def _build(self, d, m):
        torch.manual_seed(self.random_state)
        model = ConditionalMAF(
            d,
            m,
            n_features=self.n_features,
            n_blocks=self.n_blocks,
            made_hidden=tuple(self.made_hidden),
            embedding_hidden=tuple(self.embedding_hidden),
            embedding=self.embedding,
            random_degrees_seed=self.random_state if self.random_degrees else None,
        )
        return model.to(self._torch_dtype())

    def _check_training_data(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        y = y.reshape(len(y), -1)
        if len(X) < MIN_TRAINING_ROWS:
            raise ConfigurationError(f"need at least {MIN_TRAINING_ROWS} training rows, got {len(X)}")
        if self.space is not None:
            if y.shape[1] != self.space.d:
                raise DimensionError(f"space has {self.space.d} parameters, y has {y.shape[1]}")
            from .priors import PriorSpec, in_support

            ok = in_support(PriorSpec.for_space(self.space), y)
            if not np.all(ok):
                raise ValidationError(f"{int(np.sum(~ok))} training rows lie outside the prior support")
        return X, y

    # -- training ----------------------------------------------------------

    def fit(self, X, y):
        """Maximum-likelihood training on paired signals ``X`` and parameters ``y``."""
        cfg = self.training_config()
        X, y = self._check_training_data(X, y)
        n, d = y.shape
        self.n_features_in_ = X.shape[1]
        self.n_params_ = d
        dtype = self._torch_dtype()

        rng = np.random.default_rng(cfg.rng_seed)
        perm = rng.permutation(n)
        n_val = max(1, int(round(cfg.validation_fraction * n)))
        val_idx, train_idx = perm[:n_val], perm[n_val:]

        model = self._build(d, X.shape[1])
        theta_loc, theta_scale = y[train_idx].mean(0), y[train_idx].std(0)
        x_loc, x_scale = X[train_idx].mean(0), X[train_idx].std(0)
        # constant measurements (e.g. normalised b0) would divide by zero
        x_scale = np.where(x_scale > 1e-12, x_scale, 1.0)
        theta_scale = np.where(theta_scale > 1e-12, theta_scale, 1.0)
        model.set_standardizer(theta_loc, theta_scale, x_loc, x_scale)

        Xt = torch.as_tensor(X, dtype=dtype)
        yt = torch.as_tensor(y, dtype=dtype)
        Xtr, ytr, Xva, yva = Xt[train_idx], yt[train_idx], Xt[val_idx], yt[val_idx]
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, fused=True)
        gen = torch.Generator().manual_seed(cfg.rng_seed)

        report = TrainingReport(
            n_train=len(train_idx),
            n_validation=n_val,
            hidden_degrees="random" if self.random_degrees else "deterministic",
        )
        best_state, best_loss, since_best = None, np.inf, 0
        t0 = time.perf_counter()
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            order = torch.randperm(len(Xtr), generator=gen)
            total = 0.0
            for b, sl in enumerate(_batched(len(Xtr), cfg.batch_size)):
                idx = order[sl]
                loss = -model.log_prob(ytr[idx], Xtr[idx]).mean()
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {b} "
                        f"(rows {sl.start}-{sl.stop - 1}), learning rate {cfg.learning_rate}"
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            val = self._mean_nll(model, yva, Xva)
            report.train_loss.append(total / len(Xtr))
            report.validation_loss.append(val)
            if self.verbose:
                print(f"epoch {epoch}: train {report.train_loss[-1]:.4f} validation {val:.4f}")
            if val < best_loss:
                best_loss, since_best = val, 0
                best_state = copy.deepcopy(model.state_dict())
                report.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= cfg.patience_epochs:
                    break
        report.stopped_epoch = epoch
        report.wall_clock_s = time.perf_counter() - t0
        model.load_state_dict(best_state)
        model.eval()
        self.model_ = model
        self.report_ = report
        return self

    @staticmethod
    def _mean_nll(model, theta, x, chunk=8192):
        model.eval()
        total = 0.0
        with torch.no_grad():
            for sl in _batched(len(x), chunk):
                total += -model.log_prob(theta[sl], x[sl]).sum().item()
        val = total / len(x)
        if not np.isfinite(val):
            raise TrainingDivergedError("non-finite validation loss")
        return val

    # -- inference ---------------------------------------------------------

    def _signal(self, x, ndim=2):
        check_is_fitted(self, "model_")
        arr = np.asarray(x, dtype=float)
        if ndim == 1:
            arr = arr.reshape(-1)
            if arr.shape[0] != self.n_features_in_:
                raise DimensionError(f"expected {self.n_features_in_} measurements, got {arr.shape[0]}")
        else:
            arr = check_array(np.atleast_2d(arr), dtype=np.float64, ensure_all_finite=False)
            if arr.shape[1] != self.n_features_in_:
                raise DimensionError(f"expected {self.n_features_in_} measurements, got {arr.shape[1]}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("signal contains non-finite values")
        return torch.as_tensor(arr, dtype=self._torch_dtype())

    def log_prob(self, theta, X) -> np.ndarray:
        """``log q(theta | x)``; ``theta`` and ``X`` broadcast row-wise."""
        xt = self._signal(X)
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        if th.shape[1] != self.n_params_:
            raise DimensionError(f"expected {self.n_params_} parameters, got {th.shape[1]}")
        if not np.all(np.isfinite(th)):
            raise NumericError("theta contains non-finite values")
        tt = torch.as_tensor(th, dtype=xt.dtype)
        n = max(len(tt), len(xt))
        tt, xt = tt.expand(n, -1), xt.expand(n, -1)
        with torch.no_grad():
            return self.model_.log_prob(tt, xt).double().numpy()

    def sample(self, x, n: int, random_state=None) -> np.ndarray:
        """``(n, d)`` posterior draws for one signal ``x``; deterministic per seed."""
        if n < 1:
            raise ValidationError("n must be >= 1")
        xt = self._signal(x, ndim=1)
        seed = self.random_state if random_state is None else random_state
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            return self.model_.sample(xt, int(n), generator=gen).double().numpy()

    def transform(self, X) -> np.ndarray:
        """Learned ``n_features`` summary of each signal row."""
        xt = self._signal(X)
        with torch.no_grad():
            return self.model_.features(xt).double().numpy()

    def predict(self, X, n_samples: int = 10000, random_state=None) -> np.ndarray:
        """Per-parameter MAP of the rejection-filtered posterior for each row."""
        from .posterior import rejection_sample, summarize
        from .priors import PriorSpec

        if self.space is None:
            raise ConfigurationError("predict needs a parameter space")
        spec = PriorSpec.for_space(self.space)
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        seed = self.random_state if random_state is None else random_state
        out = np.empty((len(X), self.n_params_))
        for i, row in enumerate(X):
            samples = rejection_sample(self, row, n_samples, spec, rng_seed=seed + i, voxel=i)
            out[i] = summarize(samples).map
        return out

    # -- persistence -------------------------------------------------------

    def header(self) -> dict:
        check_is_fitted(self, "model_")
        params = self.get_params()
        params["space"] = None if self.space is None else self.space.to_dict()
        params["made_hidden"] = list(self.made_hidden)
        params["embedding_hidden"] = list(self.embedding_hidden)
        m = self.model_
        config_hash = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()
        return {
            "version": CHECKPOINT_VERSION,
            "model_id": None if self.space is None else self.space.model_id,
            "d": self.n_params_,
            "n_inputs": self.n_features_in_,
            "n_features": self.n_features,
            "standardizer": {
                "theta_loc": m.theta_loc.tolist(),
                "theta_scale": m.theta_scale.tolist(),
                "x_loc": m.x_loc.tolist(),
                "x_scale": m.x_scale.tolist(),
            },
            "params": params,
            "config_hash": config_hash,
            "report": self.report_.to_dict() if hasattr(self, "report_") else None,
        }

    def save(self, path) -> None:
        """Weights to ``path`` and a JSON header to ``path`` + ``.json``."""
        path = Path(path)
        header = self.header()
        torch.save({"version": CHECKPOINT_VERSION, "state_dict": self.model_.state_dict()}, path)
        Path(str(path) + ".json").write_text(json.dumps(header, indent=2))


def load_flow(path) -> FlowPosterior:
    """Inverse of :meth:`FlowPosterior.save`."""
    path = Path(path)
    header_path = Path(str(path) + ".json")
    if not path.exists() or not header_path.exists():
        raise ConfigurationError(f"checkpoint {path} (or its header) does not exist")
    try:
        header = json.loads(header_path.read_text())
        params = dict(header["params"])
    except (json.JSONDecodeError, KeyError) as exc:
        raise ConfigurationError(f"corrupt checkpoint header {header_path}: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {header.get('version')}")
    if params["space"] is not None:
        params["space"] = ParameterSpace.from_dict(params["space"])
    params["made_hidden"] = tuple(params["made_hidden"])
    params["embedding_hidden"] = tuple(params["embedding_hidden"])
    est = FlowPosterior(**params)
    blob = torch.load(path, weights_only=True)
    model = est._build(header["d"], header["n_inputs"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    est.model_ = model
    est.n_params_ = header["d"]
    est.n_features_in_ = header["n_inputs"]
    if header.get("report"):
        est.report_ = TrainingReport(**header["report"])
    return est
