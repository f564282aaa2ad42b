"""On-disk formats: simulated datasets and voxel signal tables."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DimensionError, ValidationError

__all__ = ["array_digest", "save_dataset", "load_dataset", "read_signals", "write_signals"]

DATASET_VERSION = 1


def array_digest(arr) -> str:
    arr = np.ascontiguousarray(arr)
    return hashlib.sha256(arr.tobytes() + str(arr.dtype).encode() + str(arr.shape).encode()).hexdigest()


def save_dataset(directory, theta, signals, meta: dict, orientations=None) -> Path:
    """Write ``theta.npy``, ``signals.npy`` (and ``orientations.npy``) plus ``dataset.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"theta": theta, "signals": signals}
    if orientations is not None:
        arrays["orientations"] = orientations
    sidecar = {"version": DATASET_VERSION, **meta, "arrays": {}}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        np.save(out / f"{name}.npy", arr)
        sidecar["arrays"][name] = {"shape": list(arr.shape), "sha256": array_digest(arr)}
    (out / "dataset.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out


def load_dataset(directory, verify: bool = True):
    """Inverse of :func:`save_dataset`; returns ``(theta, signals, meta)``."""
    src = Path(directory)
    try:
        meta = json.loads((src / "dataset.json").read_text())
        info = meta["arrays"]
    except FileNotFoundError:
        raise ConfigurationError(f"{src} has no dataset.json") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"corrupt dataset sidecar in {src}: {exc}") from None
    out = {}
    for name in ("theta", "signals"):
        path = src / f"{name}.npy"
        if not path.exists():
            raise ConfigurationError(f"missing {path}")
        arr = np.load(path)
        expected = info.get(name, {})
        if list(arr.shape) != expected.get("shape"):
            raise ConfigurationError(f"{name}.npy shape {arr.shape} does not match sidecar")
        if verify and array_digest(arr) != expected.get("sha256"):
            raise ConfigurationError(f"{name}.npy checksum does not match sidecar")
        out[name] = arr
    if len(out["theta"]) != len(out["signals"]):
        raise ConfigurationError("theta and signals have different row counts")
    return out["theta"], out["signals"], meta


def read_signals(path):
    """Voxel-by-measurement matrix from ``.npy`` or CSV.

    CSV files hold one voxel per row; an optional ``# protocol: <path>``
    comment line names the acquisition protocol. Returns ``(X, protocol_path)``.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"signal file {path} does not exist")
    if path.suffix == ".npy":
        X = np.load(path)
        protocol = None
    else:
        protocol = None
        with open(path) as fh:
            for line in fh:
                s = line.strip()
                if not s.startswith("#"):
                    break
                key, _, val = s.lstrip("#").partition(":")
                if key.strip() == "protocol":
                    protocol = val.strip()
        try:
            X = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        except ValueError as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from None
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.ndim != 2:
        raise DimensionError("signals must be a 2-D voxel-by-measurement matrix")
    if protocol is not None and not Path(protocol).is_absolute():
        protocol = str(path.parent / protocol)
    return X, protocol


def write_signals(path, X, protocol_path=None) -> None:
    header = f"protocol: {protocol_path}" if protocol_path else ""
    np.savetxt(path, np.atleast_2d(X), delimiter=",", header=header, fmt="%.17g")
