"""Diffusion acquisition protocols: gradient tables, shells and direction averages.

Units used everywhere in the package: times in ms, b-values in ms/um^2 and
diffusivities in um^2/ms, so that ``b * D`` is dimensionless. Protocol files
carry b-values in s/mm^2 (the scanner convention) and are divided by 1000 on
load.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, ProtocolParseError, ValidationError

__all__ = [
    "B0_THRESHOLD",
    "GradientEntry",
    "AcquisitionProtocol",
    "load_protocol",
    "save_protocol",
    "make_multishell_protocol",
    "default_protocol",
    "direction_average",
]

# s/mm^2; entries below this count as non-diffusion-weighted
B0_THRESHOLD = 50.0
_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class GradientEntry:
    bvalue: float  # ms/um^2
    direction: tuple[float, float, float]
    delta_small: float  # ms
    delta_big: float  # ms

    def __post_init__(self):
        if self.bvalue < 0:
            raise ValidationError(f"negative b-value {self.bvalue}")
        if not self.delta_small > 0:
            raise ValidationError(f"gradient duration must be positive, got {self.delta_small}")
        if self.delta_big < self.delta_small:
            raise ValidationError(
                f"gradient separation {self.delta_big} shorter than duration {self.delta_small}"
            )
        norm = float(np.linalg.norm(self.direction))
        if self.bvalue * 1000.0 >= B0_THRESHOLD and abs(norm - 1.0) > _UNIT_TOL:
            raise ValidationError(f"direction {self.direction} is not unit (norm {norm:.6g})")

    @property
    def bvalue_s_mm2(self) -> float:
        return self.bvalue * 1000.0

    @property
    def is_b0(self) -> bool:
        return self.bvalue_s_mm2 < B0_THRESHOLD


@dataclass(frozen=True)
class AcquisitionProtocol:
    """Ordered gradient table with a derived shell partition.

    The arrays below are computed once on construction; instances are
    immutable and may be shared across threads.
    """

    entries: tuple[GradientEntry, ...]
    source: str | None = None
    bvalues: np.ndarray = field(init=False, repr=False, compare=False)
    directions: np.ndarray = field(init=False, repr=False, compare=False)
    delta_small: np.ndarray = field(init=False, repr=False, compare=False)
    delta_big: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValidationError("protocol has no entries")
        object.__setattr__(self, "entries", entries)
        arrays = {
            "bvalues": np.array([e.bvalue for e in entries], dtype=float),
            "directions": np.array([e.direction for e in entries], dtype=float).reshape(-1, 3),
            "delta_small": np.array([e.delta_small for e in entries], dtype=float),
            "delta_big": np.array([e.delta_big for e in entries], dtype=float),
        }
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def m(self) -> int:
        return len(self.entries)

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvalues * 1000.0 < B0_THRESHOLD

    @property
    def shell_bvalues(self) -> np.ndarray:
        """Nominal b-values (ms/um^2) of the diffusion-weighted shells, ascending."""
        return np.array([b for b, _ in self._shells()], dtype=float)

    @property
    def shells(self) -> list[np.ndarray]:
        """Index arrays of the diffusion-weighted shells, ascending b-value."""
        return [idx for _, idx in self._shells()]

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.b0_mask)

    def _shells(self):
        rounded = np.rint(self.bvalues * 1000.0)
        dw = ~self.b0_mask
        out = []
        for key in np.unique(rounded[dw]):
            idx = np.flatnonzero(dw & (rounded == key))
            out.append((key / 1000.0, idx))
        return out

    def validate_signal(self, signal) -> np.ndarray:
        arr = np.asarray(signal, dtype=float)
        if arr.shape[-1] != self.m:
            raise DimensionError(
                f"signal has {arr.shape[-1]} measurements, protocol has {self.m}"
            )
        return arr

    def select(self, mask) -> "AcquisitionProtocol":
        """Sub-protocol keeping entries where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        return AcquisitionProtocol(
            tuple(e for e, keep in zip(self.entries, mask) if keep), source=self.source
        )

    def bvalue_cutoff_mask(self, max_bvalue_s_mm2: float) -> np.ndarray:
        return self.bvalues * 1000.0 <= max_bvalue_s_mm2 + 0.5


def _parse_line(line: str, lineno: int, path) -> GradientEntry | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    parts = text.split()
    if len(parts) != 6:
        raise ProtocolParseError(
            f"{path}:{lineno}: expected 6 columns "
            f"'bvalue gx gy gz delta Delta', got {len(parts)}"
        )
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise ProtocolParseError(f"{path}:{lineno}: {exc}") from None
    b, gx, gy, gz, d, D = values
    try:
        return GradientEntry(b / 1000.0, (gx, gy, gz), d, D)
    except ValidationError as exc:
        raise ValidationError(f"{path}:{lineno}: {exc}") from None


def load_protocol(path) -> AcquisitionProtocol:
    """Read a whitespace-delimited protocol file.

    Each non-comment line holds ``bvalue_s_per_mm2 gx gy gz delta_ms Delta_ms``.
    """
    path = Path(path)
    entries = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            entry = _parse_line(line, lineno, path)
            if entry is not None:
                entries.append(entry)
    if not entries:
        raise ProtocolParseError(f"{path}: no gradient entries")
    return AcquisitionProtocol(tuple(entries), source=str(path))


def save_protocol(protocol: AcquisitionProtocol, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("# bvalue[s/mm^2] gx gy gz delta[ms] Delta[ms]\n")
        for e in protocol.entries:
            gx, gy, gz = e.direction
            fh.write(
                f"{e.bvalue_s_mm2!r} {gx!r} {gy!r} {gz!r} {e.delta_small!r} {e.delta_big!r}\n"
            )


def _hemisphere_points(n: int, offset: float = 0.0) -> np.ndarray:
    # Fibonacci lattice on the upper hemisphere: near-uniform, deterministic.
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    k = np.arange(n) + 0.5
    z = 1.0 - k / n
    r = np.sqrt(1.0 - z**2)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * k + offset
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def make_multishell_protocol(
    bvalues_s_mm2, n_directions, n_b0=1, delta_small=7.0, delta_big=24.0
) -> AcquisitionProtocol:
    """Build a protocol with near-uniform directions on each shell."""
    if len(bvalues_s_mm2) != len(n_directions):
        raise ValidationError("one direction count per shell is required")
    entries = [GradientEntry(0.0, (0.0, 0.0, 0.0), delta_small, delta_big) for _ in range(n_b0)]
    for s, (b, n) in enumerate(zip(bvalues_s_mm2, n_directions)):
        for g in _hemisphere_points(int(n), offset=0.7 * s):
            entries.append(GradientEntry(b / 1000.0, tuple(float(v) for v in g), delta_small, delta_big))
    return AcquisitionProtocol(tuple(entries))


def default_protocol() -> AcquisitionProtocol:
    """The six-shell, 266-measurement protocol shipped with the package."""
    from importlib import resources

    ref = resources.files("micropost") / "data" / "connectom_6shell.txt"
    with resources.as_file(ref) as p:
        return load_protocol(p)


def direction_average(signal, protocol: AcquisitionProtocol) -> np.ndarray:
    """Per-shell mean signal.

    Returns ``[b0_mean, shell_1_mean, ...]`` with shells in ascending b-value
    order. Works on a single signal or on a ``(n, m)`` batch. When the
    protocol has no b0 entry the first column is omitted.
    """
    arr = protocol.validate_signal(signal)
    groups = ([protocol.b0_indices] if protocol.b0_indices.size else []) + protocol.shells
    return np.stack([arr[..., idx].mean(axis=-1) for idx in groups], axis=-1)
