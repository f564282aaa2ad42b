"""Conditional masked autoregressive flow with a jointly trained MLP embedding.

The flow maps standardised parameters ``theta`` to a standard-normal latent
``z`` through a stack of affine MADE blocks; consecutive blocks see the
parameters in reversed order. Each block is conditioned on features computed
from the signal by :class:`MlpEmbedding`.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "made_degrees",
    "MaskedLinear",
    "MadeBlock",
    "MlpEmbedding",
    "ConditionalMAF",
    "autoregressive_check",
]

LOG_SCALE_BOUND = 7.0
_LOG_2PI = math.log(2.0 * math.pi)

_ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU, "silu": nn.SiLU, "elu": nn.ELU, "gelu": nn.GELU}


def _activation(name: str) -> nn.Module:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def made_degrees(d: int, hidden_sizes, rng: np.random.Generator | None = None):
    """Degree labels for the input, hidden and output units of a MADE.

    Inputs are labelled ``1..d``. Hidden units cycle deterministically through
    ``1..d-1`` (drawn at random when ``rng`` is given); with ``d == 1`` they
    get label 0 and see no inputs. Outputs repeat the input labels.
    """
    inputs = np.arange(1, d + 1)
    hidden = []
    for h in hidden_sizes:
        if d == 1:
            hidden.append(np.zeros(h, dtype=int))
        elif rng is None:
            hidden.append(np.arange(h) % (d - 1) + 1)
        else:
            low = 1 if not hidden else int(hidden[-1].min())
            hidden.append(rng.integers(low, d, size=h))
    return inputs, hidden, inputs.copy()


def _mask(in_deg, out_deg, strict=False):
    if strict:
        return torch.as_tensor(out_deg[:, None] > in_deg[None, :], dtype=torch.get_default_dtype())
    return torch.as_tensor(out_deg[:, None] >= in_deg[None, :], dtype=torch.get_default_dtype())


class MaskedLinear(nn.Linear):
    """Linear layer whose weight is multiplied by a fixed binary mask."""

    def __init__(self, in_features, out_features, mask):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask.to(self.weight.dtype))

    def forward(self, x):
        return F.linear(x, self.weight * self.mask, self.bias)


class MadeBlock(nn.Module):
    """Affine autoregressive transform whose conditioner is a masked MLP.

    For standardised input ``u`` the block returns
    ``z_i = (u_i - shift_i(u_<i, c)) * exp(-log_scale_i(u_<i, c))``; the log
    scale is softly bounded to ``[-7, 7]``. The output layer is zero
    initialised so that a fresh block is the identity map.
    """

    def __init__(self, d, context_dim, hidden_sizes=(64, 64), activation="tanh", degree_rng=None):
        super().__init__()
        self.d = d
        self.context_dim = context_dim
        in_deg, hidden_deg, out_deg = made_degrees(d, hidden_sizes, degree_rng)
        self.input_degrees = in_deg
        self.hidden_degrees = hidden_deg
        self.output_degrees = out_deg
        layers = []
        prev, prev_deg = d, in_deg
        for h, deg in zip(hidden_sizes, hidden_deg):
            layers.append(MaskedLinear(prev, h, _mask(prev_deg, deg)))
            prev, prev_deg = h, deg
        self.hidden_layers = nn.ModuleList(layers)
        self.context_layer = nn.Linear(context_dim, hidden_sizes[0], bias=False) if context_dim else None
        out_mask = _mask(prev_deg, np.concatenate([out_deg, out_deg]), strict=True)
        self.output_layer = MaskedLinear(prev, 2 * d, out_mask)
        nn.init.zeros_(self.output_layer.weight)
        nn.init.zeros_(self.output_layer.bias)
        self.act = _activation(activation)

    def masks(self):
        return [layer.mask for layer in self.hidden_layers] + [self.output_layer.mask]

    def conditioner(self, u, context=None):
        """Per-dimension ``(shift, log_scale)``."""
        ctx = self.context_layer(context) if self.context_layer is not None else None
        weights = [layer.weight * layer.mask for layer in self.hidden_layers]
        return self._conditioner(u, ctx, weights, self.output_layer.weight * self.output_layer.mask)

    def _conditioner(self, u, ctx, weights, out_weight):
        h = F.linear(u, weights[0], self.hidden_layers[0].bias)
        if ctx is not None:
            h = h + ctx
        h = self.act(h)
        for w, layer in zip(weights[1:], self.hidden_layers[1:]):
            h = self.act(F.linear(h, w, layer.bias))
        shift, raw = F.linear(h, out_weight, self.output_layer.bias).chunk(2, dim=-1)
        log_scale = LOG_SCALE_BOUND * torch.tanh(raw / LOG_SCALE_BOUND)
        return shift, log_scale

    def forward(self, u, context=None):
        """``u -> z`` with the log-determinant of the Jacobian."""
        shift, log_scale = self.conditioner(u, context)
        return (u - shift) * torch.exp(-log_scale), -log_scale.sum(dim=-1)

    def inverse(self, z, context=None):
        """``z -> u``, one dimension per pass in degree order."""
        # masked weights and the context projection are fixed across the passes
        ctx = None
        if self.context_layer is not None:
            if context.dim() == 2 and context.shape[0] > 1 and context.stride(0) == 0:
                context = context[:1]  # one signal broadcast over all draws
            ctx = self.context_layer(context)
        weights = [layer.weight * layer.mask for layer in self.hidden_layers]
        out_weight = self.output_layer.weight * self.output_layer.mask
        u = torch.zeros_like(z)
        for i in np.argsort(self.output_degrees, kind="stable"):
            shift, log_scale = self._conditioner(u, ctx, weights, out_weight)
            u = u.clone()
            u[..., i] = z[..., i] * torch.exp(log_scale[..., i]) + shift[..., i]
        return u


class MlpEmbedding(nn.Module):
    """Three fully connected layers compressing the signal to ``n_features``."""

    def __init__(self, n_inputs, n_features=6, hidden_sizes=(256, 128), activation="silu"):
        super().__init__()
        sizes = [n_inputs, *hidden_sizes, n_features]
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(sizes) - 2:
                layers.append(_activation(activation))
        self.net = nn.Sequential(*layers)
        self.n_features = n_features

    def forward(self, x):
        return self.net(x)


class ConditionalMAF(nn.Module):
    """Standardiser + embedding + stacked MADE blocks.

    Parameters are standardised with ``(theta - theta_loc) / theta_scale``
    and signals with ``(x - x_loc) / x_scale`` before anything else; the
    standardiser's log-Jacobian is included in :meth:`log_prob`.
    """

    def __init__(
        self,
        d,
        n_inputs,
        n_features=6,
        n_blocks=5,
        made_hidden=(64, 64),
        embedding_hidden=(256, 128),
        embedding=True,
        made_activation="tanh",
        embedding_activation="silu",
        random_degrees_seed=None,
    ):
        super().__init__()
        self.d = d
        self.n_inputs = n_inputs
        if embedding:
            self.embedding = MlpEmbedding(n_inputs, n_features, embedding_hidden, embedding_activation)
            context_dim = n_features
        else:
            self.embedding = nn.Identity()
            context_dim = n_inputs
        rng = None if random_degrees_seed is None else np.random.default_rng(random_degrees_seed)
        self.blocks = nn.ModuleList(
            MadeBlock(d, context_dim, made_hidden, made_activation, rng) for _ in range(n_blocks)
        )
        self.register_buffer("theta_loc", torch.zeros(d))
        self.register_buffer("theta_scale", torch.ones(d))
        self.register_buffer("x_loc", torch.zeros(n_inputs))
        self.register_buffer("x_scale", torch.ones(n_inputs))
        # block k sees the parameters reversed k times
        rev = torch.arange(d - 1, -1, -1)
        self.register_buffer("reverse_index", rev)

    def set_standardizer(self, theta_loc, theta_scale, x_loc, x_scale):
        for name, value in (
            ("theta_loc", theta_loc),
            ("theta_scale", theta_scale),
            ("x_loc", x_loc),
            ("x_scale", x_scale),
        ):
            getattr(self, name).copy_(torch.as_tensor(np.asarray(value), dtype=getattr(self, name).dtype))

    def block_orders(self):
        """Parameter index processed at each autoregressive position, per block."""
        order = np.arange(self.d)
        out = []
        for k in range(len(self.blocks)):
            out.append(order.copy())
            order = order[::-1]
        return out

    def features(self, x):
        return self.embedding((x - self.x_loc) / self.x_scale)

    def transform(self, u, context):
        """Standardised ``u`` to latent ``z``; returns ``(z, total_logdet, per_block)``."""
        per_block = []
        h = u
        for k, block in enumerate(self.blocks):
            h, ld = block(h, context)
            per_block.append(ld)
            if k < len(self.blocks) - 1:
                h = h[..., self.reverse_index]
        return h, torch.stack(per_block, dim=0).sum(dim=0), per_block

    def inverse_transform(self, z, context):
        h = z
        for k in range(len(self.blocks) - 1, -1, -1):
            if k < len(self.blocks) - 1:
                h = h[..., self.reverse_index]
            h = self.blocks[k].inverse(h, context)
        return h

    def log_prob(self, theta, x):
        """``log q(theta | x)`` in the original parameter units."""
        context = self.features(x)
        u = (theta - self.theta_loc) / self.theta_scale
        z, logdet, _ = self.transform(u, context)
        base = -0.5 * (z**2).sum(dim=-1) - 0.5 * self.d * _LOG_2PI
        return base + logdet - torch.log(self.theta_scale).sum()

    def sample(self, x, n, generator=None):
        """``n`` draws for a single signal ``x`` of shape ``(n_inputs,)``."""
        context = self.features(x.reshape(1, -1)).expand(n, -1)
        z = torch.randn(n, self.d, generator=generator, dtype=self.theta_loc.dtype)
        u = self.inverse_transform(z, context)
        return u * self.theta_scale + self.theta_loc


def autoregressive_check(block: MadeBlock, n_points: int = 5, eps: float = 1e-6, tol: float = 1e-7, seed=0) -> bool:
    """Finite-difference test that block outputs only depend on earlier inputs.

    Shift and log-scale outputs are perturbed against every input at random
    points; the Jacobian entry for output ``i`` and input ``j`` must stay below
    ``tol`` whenever ``degree(j) >= degree(i)``.
    """
    gen = torch.Generator().manual_seed(seed)
    dtype = block.output_layer.weight.dtype
    d = block.d
    with torch.no_grad():
        for _ in range(n_points):
            u = torch.randn(1, d, generator=gen, dtype=dtype)
            ctx = torch.randn(1, block.context_dim, generator=gen, dtype=dtype) if block.context_dim else None
            for j in range(d):
                step = torch.zeros_like(u)
                step[0, j] = eps
                sp, lp = block.conditioner(u + step, ctx)
                sm, lm = block.conditioner(u - step, ctx)
                jac = torch.cat([(sp - sm), (lp - lm)], dim=-1)[0] / (2 * eps)
                deg_out = np.concatenate([block.output_degrees, block.output_degrees])
                forbidden = deg_out <= block.input_degrees[j]
                if torch.any(torch.abs(jac[torch.as_tensor(forbidden)]) >= tol):
                    return False
    return True
