"""Biophysical dMRI signal generators, noise models and training-set synthesis.

Three tissue models of increasing complexity are provided:

* ``ball_stick``: stick (zero-radius cylinder) plus isotropic ball.
* ``standard_model``: Watson-dispersed sticks plus a Watson-dispersed
  axially symmetric zeppelin.
* ``extended_sandi``: Watson-dispersed sticks, restricted spheres (soma,
  summarised by ``C_s``) and an isotropic ball.

All generators are vectorised over voxels: ``theta`` is ``(d,)`` or
``(n, d)`` and ``orientation`` is ``(3,)`` or ``(n, 3)``; the returned
signal has the matching leading shape and ``protocol.m`` columns.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .exceptions import ConfigurationError, ValidationError
from .protocol import AcquisitionProtocol

__all__ = [
    "ParameterSpace",
    "ParameterVector",
    "BALL_STICK",
    "STANDARD_MODEL",
    "EXTENDED_SANDI",
    "MODEL_IDS",
    "get_space",
    "odi_to_kappa",
    "kappa_to_odi",
    "SphereRootTable",
    "sphere_roots",
    "sphere_cs",
    "WatsonConvolver",
    "signal_ball_stick",
    "signal_standard_model",
    "signal_extended_sandi",
    "simulate",
    "ForwardModel",
    "add_noise",
    "random_orientations",
    "generate_training_set",
]


@dataclass(frozen=True)
class ParameterSpace:
    names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    model_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if not (len(self.names) == len(self.lower) == len(self.upper)):
            raise ValidationError("names, lower and upper must have equal length")
        for name, lo, hi in zip(self.names, self.lower, self.upper):
            if not lo < hi:
                raise ValidationError(f"empty prior range for {name}: [{lo}, {hi}]")

    @property
    def d(self) -> int:
        return len(self.names)

    @property
    def lower_array(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def upper_array(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def ranges(self) -> np.ndarray:
        return self.upper_array - self.lower_array

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "names": list(self.names),
            "lower": list(self.lower),
            "upper": list(self.upper),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterSpace":
        return cls(tuple(data["names"]), tuple(data["lower"]), tuple(data["upper"]), data.get("model_id"))


@dataclass(frozen=True)
class ParameterVector:
    """A single voxel's parameters plus its (nuisance) fibre orientation."""

    values: tuple[float, ...]
    orientation: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


_DIFF = (0.1, 3.0)
_ODI = (0.03, 0.95)
_CS = (0.15, 1105.0)

BALL_STICK = ParameterSpace(
    ("f_in", "D_in", "D_e"), (0.0, _DIFF[0], _DIFF[0]), (1.0, _DIFF[1], _DIFF[1]), "ball_stick"
)
STANDARD_MODEL = ParameterSpace(
    ("f", "D_a", "ODI", "D_e_par", "D_e_perp"),
    (0.0, _DIFF[0], _ODI[0], _DIFF[0], _DIFF[0]),
    (1.0, _DIFF[1], _ODI[1], _DIFF[1], _DIFF[1]),
    "standard_model",
)
EXTENDED_SANDI = ParameterSpace(
    ("f_n", "f_s", "D_n", "ODI", "D_e", "C_s"),
    (0.0, 0.0, _DIFF[0], _ODI[0], _DIFF[0], _CS[0]),
    (1.0, 1.0, _DIFF[1], _ODI[1], _DIFF[1], _CS[1]),
    "extended_sandi",
)
_SPACES = {s.model_id: s for s in (BALL_STICK, STANDARD_MODEL, EXTENDED_SANDI)}
MODEL_IDS = tuple(_SPACES)


def get_space(model_id: str) -> ParameterSpace:
    try:
        return _SPACES[model_id]
    except KeyError:
        raise ConfigurationError(
            f"unknown model {model_id!r}; expected one of {', '.join(MODEL_IDS)}"
        ) from None


def odi_to_kappa(odi):
    """Watson concentration from orientation dispersion index, ``1/tan(ODI*pi/2)``."""
    return 1.0 / np.tan(np.asarray(odi, dtype=float) * np.pi / 2.0)


def kappa_to_odi(kappa):
    return (2.0 / np.pi) * np.arctan(1.0 / np.asarray(kappa, dtype=float))


# --------------------------------------------------------------------------
# Sphere (soma) compartment


def _sphere_condition(x):
    return special.jv(1.5, x) / x - special.jv(2.5, x)


@dataclass(frozen=True)
class SphereRootTable:
    """Dimensionless roots ``beta_m`` of ``J_{3/2}(b)/b = J_{5/2}(b)``."""

    roots: np.ndarray

    def __len__(self):
        return len(self.roots)


@functools.lru_cache(maxsize=8)
def _sphere_roots(n: int) -> tuple:
    roots = []
    step = 0.05
    lo = step
    f_lo = _sphere_condition(lo)
    while len(roots) < n:
        hi = lo + step
        f_hi = _sphere_condition(hi)
        if np.sign(f_lo) != np.sign(f_hi):
            roots.append(optimize.brentq(_sphere_condition, lo, hi, xtol=1e-14, maxiter=200))
        lo, f_lo = hi, f_hi
    return tuple(roots)


def sphere_roots(n: int = 20) -> SphereRootTable:
    """First ``n`` roots, found by scanning for sign changes and bisecting."""
    if n < 1:
        raise ValidationError("need at least one root")
    arr = np.array(_sphere_roots(int(n)))
    arr.setflags(write=False)
    return SphereRootTable(arr)


def sphere_cs(r_s, D_s=3.0, delta_small=7.0, delta_big=24.0, roots: SphereRootTable | None = None):
    """Soma proxy ``C_s`` (um^2) from radius (um) and diffusivity (um^2/ms).

    Truncated Bessel-root series of the Gaussian-phase approximation for
    restricted diffusion in a sphere; ``alpha_m = beta_m / r_s``. The two
    middle exponentials carry a factor 2 (Murday-Cotts); with unit factors
    the series turns negative for large spheres.
    """
    r = np.asarray(r_s, dtype=float)
    for name, v in (("r_s", r), ("D_s", D_s), ("delta_small", delta_small), ("delta_big", delta_big)):
        if np.any(np.asarray(v) <= 0):
            raise ValidationError(f"{name} must be positive")
    beta = (roots or sphere_roots(20)).roots
    a2 = (beta / r[..., None]) ** 2
    D, d, Dl = float(D_s), float(delta_small), float(delta_big)
    num = (
        2.0
        + np.exp(-a2 * D * (Dl - d))
        - 2.0 * np.exp(-a2 * D * d)
        - 2.0 * np.exp(-a2 * D * Dl)
        + np.exp(-a2 * D * (Dl + d))
    )
    terms = a2**-2 / (a2 * r[..., None] ** 2 - 2.0) * (2.0 * d - num / (a2 * D))
    return 2.0 / (D * d**2) * terms.sum(axis=-1)


# --------------------------------------------------------------------------
# Watson-dispersed axially symmetric kernels


def _legendre_table(x, lmax):
    """``P_0..P_lmax`` at ``x``; result has a trailing axis of length lmax+1."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (lmax + 1,))
    out[..., 0] = 1.0
    if lmax >= 1:
        out[..., 1] = x
    for l in range(1, lmax):
        out[..., l + 1] = ((2 * l + 1) * x * out[..., l] - l * out[..., l - 1]) / (l + 1)
    return out


class WatsonConvolver:
    """Spherical convolution of ``exp(-beta (g.n)^2)`` with a Watson density.

    The integral ``int W(n; mu, kappa) exp(-beta (g.n)^2) dn`` is expanded with
    the Funk-Hecke theorem into even Legendre terms
    ``sum_l (2l+1)/2 K_l(beta) w_l(kappa) P_l(g.mu)``, whose 1-D coefficient
    integrals over ``t = cos`` are evaluated with ``order`` Gauss-Legendre
    nodes. Terms up to ``l = order // 2`` are kept.
    """

    def __init__(self, order: int = 64):
        if order < 16:
            raise ConfigurationError(f"quadrature_order must be >= 16, got {order}")
        self.order = int(order)
        self.lmax = 2 * (self.order // 4)
        t, v = np.polynomial.legendre.leggauss(self.order)
        self.t2 = t**2
        self.weights = v
        even = np.arange(0, self.lmax + 1, 2)
        self.even = even
        # weighted Legendre values at the nodes, even l only: (Q, L)
        self.vP = v[:, None] * _legendre_table(t, self.lmax)[:, even]
        self.norm = (2 * even + 1) / 2.0

    def watson_coefficients(self, kappa):
        """``w_l`` for each kappa: shape ``kappa.shape + (L,)``; ``w_0 == 1``."""
        k = np.asarray(kappa, dtype=float)[..., None]
        dens = np.exp(k * (self.t2 - 1.0))
        c = dens @ self.vP
        return c / c[..., :1]

    def kernel_coefficients(self, beta):
        """``(2l+1)/2 * int exp(-beta t^2) P_l(t) dt``: shape ``beta.shape + (L,)``."""
        b = np.asarray(beta, dtype=float)[..., None]
        return (np.exp(-b * self.t2) @ self.vP) * self.norm

    def legendre(self, cos):
        return _legendre_table(cos, self.lmax)[..., self.even]


@functools.lru_cache(maxsize=16)
def _convolver(order: int) -> WatsonConvolver:
    return WatsonConvolver(order)


# --------------------------------------------------------------------------
# Signal models


def _as_batch(theta, orientation, d):
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.shape[-1] != d:
        raise ValidationError(f"expected {d} parameters, got {theta.shape[-1]}")
    if orientation is None:
        orientation = np.array([0.0, 0.0, 1.0])
    mu = np.asarray(orientation, dtype=float)
    mu = np.broadcast_to(np.atleast_2d(mu), (theta.shape[0], 3))
    norms = np.linalg.norm(mu, axis=1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValidationError("orientation must be a unit vector")
    return theta, mu, single


def _unpack(theta, orientation, d):
    if isinstance(theta, ParameterVector):
        return _as_batch(theta.values, theta.orientation if orientation is None else orientation, d)
    return _as_batch(theta, orientation, d)


def _check_range(name, values, lo, hi, tol=1e-9):
    if np.any(values < lo - tol) or np.any(values > hi + tol) or not np.all(np.isfinite(values)):
        raise ValidationError(f"{name} outside [{lo}, {hi}]")


def _bshell_index(protocol: AcquisitionProtocol):
    ub, inv = np.unique(protocol.bvalues, return_inverse=True)
    return ub, inv


def _dispersed(conv, beta_u, inv, wl, P):
    """Dispersed kernel signal for every measurement.

    ``beta_u``: (n, nb) per unique b-value, ``wl``: (n, L), ``P``: (n, m, L).
    """
    coef = conv.kernel_coefficients(beta_u) * wl[:, None, :]  # (n, nb, L)
    return np.einsum("nml,nml->nm", coef[:, inv, :], P)


def signal_ball_stick(theta, protocol: AcquisitionProtocol, orientation=None):
    """``f_in exp(-b D_in (g.n)^2) + (1 - f_in) exp(-b D_e)``."""
    th, mu, single = _unpack(theta, orientation, 3)
    f, Din, De = th.T
    _check_range("f_in", f, 0.0, 1.0)
    b = protocol.bvalues
    c2 = (mu @ protocol.directions.T) ** 2
    s = f[:, None] * np.exp(-b * Din[:, None] * c2) + (1.0 - f[:, None]) * np.exp(-b * De[:, None])
    s[:, b == 0] = 1.0
    return s[0] if single else s


def _chunks(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _get_convolver(order) -> WatsonConvolver:
    order = int(order)
    return _convolver(order) if order >= 16 else WatsonConvolver(order)


def _standard_model_core(conv, th, P, protocol, shells):
    ub, inv = shells
    f, Da, odi, Dpar, Dperp = th.T
    wl = conv.watson_coefficients(odi_to_kappa(odi))
    stick = _dispersed(conv, Da[:, None] * ub, inv, wl, P)
    zep = _dispersed(conv, (Dpar - Dperp)[:, None] * ub, inv, wl, P)
    zep *= np.exp(-protocol.bvalues * Dperp[:, None])
    return f[:, None] * stick + (1.0 - f[:, None]) * zep


def _sandi_core(conv, th, P, protocol, shells):
    ub, inv = shells
    fn, fs, Dn, odi, De, Cs = th.T
    fe = np.clip(1.0 - fn - fs, 0.0, 1.0)
    wl = conv.watson_coefficients(odi_to_kappa(odi))
    neur = _dispersed(conv, Dn[:, None] * ub, inv, wl, P)
    return (
        fn[:, None] * neur
        + fs[:, None] * np.exp(-_sphere_q2(protocol) * Cs[:, None])
        + fe[:, None] * np.exp(-protocol.bvalues * De[:, None])
    )


def _check_standard_model(th):
    _check_range("f", th[:, 0], 0.0, 1.0)
    if np.any(th[:, 4] > th[:, 3] + 1e-12):
        raise ValidationError("standard model requires D_e_perp < D_e_par")


def _check_sandi(th):
    _check_range("f_n", th[:, 0], 0.0, 1.0)
    _check_range("f_s", th[:, 1], 0.0, 1.0)
    if np.any(th[:, 0] + th[:, 1] > 1.0 + 1e-9):
        raise ValidationError("extended SANDI requires f_n + f_s <= 1")


def _dispersed_model(core, check, d, theta, protocol, orientation, quadrature_order):
    conv = _get_convolver(quadrature_order)
    th, mu, single = _unpack(theta, orientation, d)
    check(th)
    shells = _bshell_index(protocol)
    out = np.empty((th.shape[0], protocol.m))
    for sl in _chunks(th.shape[0], 2048):
        P = conv.legendre(mu[sl] @ protocol.directions.T)
        out[sl] = core(conv, th[sl], P, protocol, shells)
    out[:, protocol.bvalues == 0] = 1.0
    return out[0] if single else out


def signal_standard_model(theta, protocol: AcquisitionProtocol, orientation=None, quadrature_order: int = 64):
    """Watson-dispersed stick + zeppelin.

    ``theta = (f, D_a, ODI, D_e_par, D_e_perp)``; the zeppelin's parallel axis
    follows each stick so both compartments share the Watson dispersion.
    """
    return _dispersed_model(
        _standard_model_core, _check_standard_model, 5, theta, protocol, orientation, quadrature_order
    )


def _sphere_q2(protocol: AcquisitionProtocol):
    return protocol.bvalues / (protocol.delta_big - protocol.delta_small / 3.0)


def signal_extended_sandi(theta, protocol: AcquisitionProtocol, orientation=None, quadrature_order: int = 64):
    """Dispersed sticks + sphere + ball with ``f_e = 1 - f_n - f_s``.

    ``theta = (f_n, f_s, D_n, ODI, D_e, C_s)``. The sphere attenuates as
    ``exp(-q^2 C_s)`` with ``q^2 = b / (Delta - delta/3)`` (Gaussian phase).
    """
    return _dispersed_model(_sandi_core, _check_sandi, 6, theta, protocol, orientation, quadrature_order)


_SIMULATORS = {
    "ball_stick": signal_ball_stick,
    "standard_model": signal_standard_model,
    "extended_sandi": signal_extended_sandi,
}


def simulate(model_id: str, theta, protocol: AcquisitionProtocol, orientation=None, **kwargs):
    """Noise-free signal of ``model_id`` for the given parameters."""
    get_space(model_id)
    if model_id == "ball_stick":
        kwargs.pop("quadrature_order", None)
    return _SIMULATORS[model_id](theta, protocol, orientation, **kwargs)


class ForwardModel:
    """Single-voxel evaluator for repeated calls with a slowly changing orientation.

    Likelihood-based samplers update one coordinate at a time, so the
    orientation-dependent Legendre table is cached and reused until the
    orientation changes. Input checks are skipped; callers guarantee support.
    """

    def __init__(self, model_id: str, protocol: AcquisitionProtocol, quadrature_order: int = 64):
        self.space = get_space(model_id)
        self.model_id = model_id
        self.protocol = protocol
        self.conv = _get_convolver(quadrature_order)
        self._shells = _bshell_index(protocol)
        self._b_zero = protocol.bvalues == 0
        self._key = None
        self._cache = None

    def _orientation_table(self, mu):
        key = mu.tobytes()
        if key != self._key:
            cos = self.protocol.directions @ mu
            if self.model_id == "ball_stick":
                self._cache = cos**2
            else:
                self._cache = self.conv.legendre(cos)[None]
            self._key = key
        return self._cache

    def __call__(self, theta, orientation) -> np.ndarray:
        th = np.asarray(theta, dtype=float).reshape(1, -1)
        table = self._orientation_table(np.asarray(orientation, dtype=float))
        if self.model_id == "ball_stick":
            f, Din, De = th[0]
            b = self.protocol.bvalues
            s = f * np.exp(-b * Din * table) + (1.0 - f) * np.exp(-b * De)
        else:
            core = _standard_model_core if self.model_id == "standard_model" else _sandi_core
            s = core(self.conv, th, table, self.protocol, self._shells)[0]
        s[self._b_zero] = 1.0
        return s


# --------------------------------------------------------------------------
# Noise and training data


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def add_noise(signal, snr: float, mode: str = "rician", rng_seed=None):
    """Magnitude of the signal after complex Gaussian noise with ``sigma = 1/snr``.

    ``rician`` and ``complex_gaussian_magnitude`` are the same construction:
    independent N(0, sigma^2) noise on real and imaginary channels.
    """
    if mode not in ("rician", "complex_gaussian_magnitude"):
        raise ConfigurationError(f"unknown noise mode {mode!r}")
    if not snr > 0:
        raise ValidationError("snr must be positive")
    rng = _rng(rng_seed)
    s = np.asarray(signal, dtype=float)
    sigma = 1.0 / snr
    n1 = rng.standard_normal(s.shape)
    n2 = rng.standard_normal(s.shape)
    return np.sqrt((s + sigma * n1) ** 2 + (sigma * n2) ** 2)


def random_orientations(n: int, rng_seed=None) -> np.ndarray:
    """``n`` unit vectors uniformly distributed on the sphere."""
    rng = _rng(rng_seed)
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_training_set(
    space: ParameterSpace,
    protocol: AcquisitionProtocol,
    n: int,
    snr: float | None = None,
    rng_seed=None,
    noise_mode: str = "rician",
    quadrature_order: int = 64,
    return_orientations: bool = False,
):
    """Paired ``(theta, x)`` prior-predictive draws.

    ``snr=None`` yields noise-free signals. The same seed reproduces the
    output bit for bit.
    """
    from .priors import PriorSpec, sample_prior

    if n < 1:
        raise ValidationError("n must be >= 1")
    if space.model_id not in _SIMULATORS:
        raise ConfigurationError(f"no simulator for model {space.model_id!r}")
    rng = _rng(rng_seed)
    theta = sample_prior(PriorSpec.for_space(space), n, rng)
    mu = random_orientations(n, rng)
    kwargs = {} if space.model_id == "ball_stick" else {"quadrature_order": quadrature_order}
    x = _SIMULATORS[space.model_id](theta, protocol, mu, **kwargs)
    if snr is not None:
        x = add_noise(x, snr, noise_mode, rng)
    if return_orientations:
        return theta, x, mu
    return theta, x
