"""Gaussian RBF basis-vector generators with exact forward/backward passes.

A generator maps a latent vector ``z`` (length ``d``) to a basis vector of
the same length. ``z`` is split into ``G`` groups of width ``d_g``; each
group is standardised on its own and pushed through a scalar function

    phi(t) = w_base * silu(t) + sum_k w_k * exp(-((t - mu_k) / h) ** 2)

with one ``(w_base, w_1..w_K)`` set per group. Several generators that
read the same latent (a "bank", one per rank) share the normalisation and
the Gaussian responses, so banks are evaluated in one pass: parameters then
carry a leading bank axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class GridSpec:
    """``k_centers`` evenly spaced centres on ``[lo, hi]``; bandwidth is the spacing."""

    k_centers: int
    lo: float
    hi: float

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.k_centers)

    @property
    def bandwidth(self) -> float:
        return (self.hi - self.lo) / (self.k_centers - 1)


def make_grid(k_centers: int = 15, lo: float = -3.0, hi: float = 3.0) -> GridSpec:
    if int(k_centers) != k_centers or k_centers < 2:
        raise ParameterError(f"grid needs at least 2 centers, got {k_centers}")
    if not lo < hi:
        raise ParameterError(f"grid needs lo < hi, got [{lo}, {hi}]")
    return GridSpec(int(k_centers), float(lo), float(hi))


@dataclass(frozen=True)
class GroupLayout:
    dim: int
    groups: int

    def __post_init__(self):
        if self.groups < 1 or self.dim < 1:
            raise ParameterError(f"invalid layout dim={self.dim} groups={self.groups}")
        if self.dim % self.groups:
            raise ParameterError(f"dim {self.dim} is not divisible by {self.groups} groups")
        if self.dim // self.groups < 2:
            raise ParameterError(
                f"group width {self.dim // self.groups} < 2: normalisation would map every input to 0"
            )

    @property
    def group_dim(self) -> int:
        return self.dim // self.groups


@dataclass
class GeneratorParams:
    """RBF weights ``(..., G, K)`` and base weights ``(..., G)``.

    A leading axis, when present, indexes generators of a bank.
    """

    rbf_weights: np.ndarray
    base_weights: np.ndarray

    def __post_init__(self):
        self.rbf_weights = np.asarray(self.rbf_weights, dtype=np.float64)
        self.base_weights = np.asarray(self.base_weights, dtype=np.float64)
        if self.rbf_weights.shape[:-1] != self.base_weights.shape:
            raise ShapeError(
                f"rbf weights {self.rbf_weights.shape} do not match base weights {self.base_weights.shape}"
            )

    @classmethod
    def zeros(cls, groups: int, k_centers: int, bank: int | None = None) -> "GeneratorParams":
        lead = () if bank is None else (bank,)
        return cls(np.zeros(lead + (groups, k_centers)), np.zeros(lead + (groups,)))

    @property
    def is_bank(self) -> bool:
        return self.base_weights.ndim == 2

    def __len__(self) -> int:
        if not self.is_bank:
            raise TypeError("single generator has no length")
        return self.base_weights.shape[0]

    def __getitem__(self, i) -> "GeneratorParams":
        return GeneratorParams(self.rbf_weights[i], self.base_weights[i])

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.rbf_weights.copy(), self.base_weights.copy())

    @property
    def size(self) -> int:
        return self.rbf_weights.size + self.base_weights.size


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float


def instance_normalize(x, epsilon: float = DEFAULT_EPSILON):
    """Standardise along the last axis: ``(x - mean) / (std + epsilon)``.

    Uses the population (1/n) standard deviation. Returns ``(x_hat, stats)``.
    """
    if epsilon <= 0:
        raise ParameterError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1)
    centred = x - mean[..., None]
    std = np.sqrt((centred * centred).mean(axis=-1))
    x_hat = centred / (std[..., None] + epsilon)
    return x_hat, NormStats(mean, std, float(epsilon))


def instance_normalize_vjp(x, stats: NormStats, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`instance_normalize` along the last axis.

    Where ``std == 0`` the term carrying ``1/std`` is taken to be zero, which
    leaves ``(upstream - mean(upstream)) / epsilon``.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match input {x.shape}")
    n = x.shape[-1]
    sigma = stats.std[..., None]
    denom = sigma + stats.epsilon
    centred = x - stats.mean[..., None]
    proj = (upstream * centred).sum(axis=-1, keepdims=True)
    safe = np.where(sigma > 0, sigma, 1.0)
    third = np.where(sigma > 0, centred * proj / (n * safe * denom), 0.0)
    return (upstream - upstream.mean(axis=-1, keepdims=True) - third) / denom


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(t):
    return t * sigmoid(t)


def silu_grad(t):
    s = sigmoid(t)
    return s * (1.0 + t * (1.0 - s))


def rbf_responses(x_hat, grid: GridSpec) -> np.ndarray:
    """Gaussian responses, shape ``x_hat.shape + (K,)``; a vector gives a ``(d_g, K)`` matrix."""
    u = (np.asarray(x_hat, dtype=np.float64)[..., None] - grid.centers) / grid.bandwidth
    return np.exp(-(u * u))


@dataclass
class GeneratorTape:
    """Everything the backward pass needs from one forward evaluation.

    All arrays are per group, shape ``(G, d_g)`` (``phi`` adds a ``K`` axis).
    Memory is linear in ``d * K`` and independent of the bank size.
    """

    layout: GroupLayout
    x: np.ndarray
    stats: NormStats | None
    x_hat: np.ndarray
    phi: np.ndarray
    silu: np.ndarray
    dsilu: np.ndarray
    normalized: bool = field(default=True)


def encode(z, layout: GroupLayout, grid: GridSpec, epsilon: float = DEFAULT_EPSILON,
           normalize: bool = True) -> GeneratorTape:
    """Parameter-independent half of the forward pass (normalise, expand)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (layout.dim,):
        raise ShapeError(f"latent has shape {z.shape}, layout expects ({layout.dim},)")
    x = z.reshape(layout.groups, layout.group_dim)
    if normalize:
        x_hat, stats = instance_normalize(x, epsilon)
    else:
        x_hat, stats = x.copy(), None
    return GeneratorTape(
        layout=layout,
        x=x,
        stats=stats,
        x_hat=x_hat,
        phi=rbf_responses(x_hat, grid),
        silu=silu(x_hat),
        dsilu=silu_grad(x_hat),
        normalized=normalize,
    )


def _check_params(params: GeneratorParams, layout: GroupLayout, grid: GridSpec):
    want = (layout.groups, grid.k_centers)
    if params.rbf_weights.shape[-2:] != want or params.rbf_weights.ndim not in (2, 3):
        raise ShapeError(f"rbf weights {params.rbf_weights.shape} do not match (G, K) = {want}")


def decode(tape: GeneratorTape, params: GeneratorParams) -> np.ndarray:
    """Apply weights to a recorded encoding; ``(d,)`` or ``(bank, d)``."""
    w, wb = params.rbf_weights, params.base_weights
    if params.is_bank:
        out = wb[:, :, None] * tape.silu + np.einsum("igk,gjk->igj", w, tape.phi)
        return out.reshape(w.shape[0], tape.layout.dim)
    out = wb[:, None] * tape.silu + np.einsum("gk,gjk->gj", w, tape.phi)
    return out.reshape(tape.layout.dim)


def generator_forward(z, params: GeneratorParams, layout: GroupLayout, grid: GridSpec,
                      epsilon: float = DEFAULT_EPSILON, normalize: bool = True):
    """Synthesise basis vector(s) from latent ``z``.

    Returns ``(out, tape)``; ``out`` is ``(d,)`` for a single generator or
    ``(bank, d)`` when ``params`` carries a bank axis.
    """
    _check_params(params, layout, grid)
    tape = encode(z, layout, grid, epsilon, normalize)
    return decode(tape, params), tape


def generator_backward(tape: GeneratorTape, params: GeneratorParams, grid: GridSpec, upstream):
    """Reverse pass of :func:`generator_forward`.

    Returns ``(grad_z, grad_params)``. For a bank, gradients from all
    generators are summed into ``grad_z``.
    """
    _check_params(params, tape.layout, grid)
    layout = tape.layout
    upstream = np.asarray(upstream, dtype=np.float64)
    single = not params.is_bank
    w, wb = params.rbf_weights, params.base_weights
    if single:
        w, wb = w[None], wb[None]
        upstream = upstream[None]
    if upstream.shape != (w.shape[0], layout.dim):
        raise ShapeError(f"upstream {upstream.shape} does not match output {(w.shape[0], layout.dim)}")
    up = upstream.reshape(w.shape[0], layout.groups, layout.group_dim)

    grad_w = np.einsum("igj,gjk->igk", up, tape.phi)
    grad_wb = np.einsum("igj,gj->ig", up, tape.silu)

    # d phi_k / d x_hat = -2 (x_hat - mu_k) / h^2 * phi_k
    h = grid.bandwidth
    dphi = (-2.0 / (h * h)) * (tape.x_hat[..., None] - grid.centers) * tape.phi
    slope = wb[:, :, None] * tape.dsilu + np.einsum("igk,gjk->igj", w, dphi)
    grad_xhat = (up * slope).sum(axis=0)
    if tape.normalized:
        grad_x = instance_normalize_vjp(tape.x, tape.stats, grad_xhat)
    else:
        grad_x = grad_xhat
    grad_z = grad_x.reshape(layout.dim)
    if single:
        return grad_z, GeneratorParams(grad_w[0], grad_wb[0])
    return grad_z, GeneratorParams(grad_w, grad_wb)
