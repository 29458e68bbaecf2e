"""Spectrum metrics for weight updates and the basis-reconstruction experiment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import RngStream, as_matrix, rng_normal, rng_uniform, svd
from .rbf import (DEFAULT_EPSILON, GeneratorParams, GridSpec, GroupLayout, decode, encode,
                  generator_backward, make_grid)

DEFAULT_TAU = 0.005


def effective_rank(m, tau: float = DEFAULT_TAU) -> int:
    """Number of singular values strictly greater than ``tau``."""
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    s = svd(m).singular_values
    return int(np.count_nonzero(s > tau))


def spectral_energy(m) -> float:
    """Sum of squared singular values (equals the squared Frobenius norm)."""
    s = svd(m).singular_values
    return float(np.sum(s * s))


def frobenius_sq(m) -> float:
    a = as_matrix(m)
    return float(np.sum(a * a))


@dataclass
class SpectrumReport:
    name: str
    singular_values: np.ndarray
    tau: float
    effective_rank: int
    energy: float
    params: int | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "singular_values": [float(v) for v in self.singular_values],
            "tau": self.tau,
            "effective_rank": self.effective_rank,
            "energy": self.energy,
            "params": self.params,
        }


def spectrum_report(name: str, m, tau: float = DEFAULT_TAU, params: int | None = None) -> SpectrumReport:
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    s = svd(m).singular_values
    return SpectrumReport(name, s, float(tau), int(np.count_nonzero(s > tau)),
                          float(np.sum(s * s)), params)


# --- reconstruction of explicit basis vectors from a shared prototype ----------


@dataclass
class FitReport:
    per_row_mse: list
    mean_mse: float
    initial_mse: float
    ls_per_row_mse: list
    ls_mean_mse: float
    param_ratio: float
    epochs: int
    lr: float
    groups: int
    k_centers: int
    history: list = field(default_factory=list)

    @property
    def ls_gap(self) -> float:
        return self.mean_mse - self.ls_mean_mse

    @property
    def relative_gap(self) -> float:
        if self.ls_mean_mse == 0.0:
            return 0.0 if self.mean_mse == 0.0 else float("inf")
        return self.ls_gap / self.ls_mean_mse

    def to_dict(self) -> dict:
        return {
            "per_row_mse": self.per_row_mse,
            "mean_mse": self.mean_mse,
            "initial_mse": self.initial_mse,
            "ls_per_row_mse": self.ls_per_row_mse,
            "ls_mean_mse": self.ls_mean_mse,
            "ls_gap": self.ls_gap,
            "relative_gap": self.relative_gap,
            "param_ratio": self.param_ratio,
            "epochs": self.epochs,
            "lr": self.lr,
            "groups": self.groups,
            "k_centers": self.k_centers,
            "history": self.history,
        }


def param_ratio(dim: int, groups: int, k_centers: int) -> float:
    """Generator parameters per synthesised row relative to storing the row."""
    return groups * (k_centers + 1) / dim


def least_squares_floor(tape, target: np.ndarray) -> np.ndarray:
    """Per-row optimal MSE over the fixed features ``[silu, phi_1..phi_K]`` of each group."""
    layout = tape.layout
    r = target.shape[0]
    t = target.reshape(r, layout.groups, layout.group_dim)
    sq = np.zeros(r)
    for g in range(layout.groups):
        feats = np.column_stack([tape.silu[g], tape.phi[g]])
        coef, *_ = np.linalg.lstsq(feats, t[:, g, :].T, rcond=None)
        resid = feats @ coef - t[:, g, :].T
        sq += (resid * resid).sum(axis=0)
    return sq / layout.dim


def reconstruct_basis(target, groups: int = 16, grid: GridSpec | None = None, epochs: int = 2000,
                      lr: float = 1e-3, seed: int = 0, epsilon: float = DEFAULT_EPSILON,
                      init: str = "zeros", betas=(0.9, 0.999), adam_eps: float = 1e-8,
                      log_every: int = 100) -> FitReport:
    """Fit one generator per target row, all reading the row-mean prototype.

    The prototype is fixed, so its encoding is computed once and the
    objective is linear in the generator weights; Adam (no weight decay)
    minimises the per-row MSE. The closed-form least-squares optimum over
    the same features is reported alongside.
    """
    target = as_matrix(target, "target")
    grid = grid or make_grid()
    if epochs < 0:
        raise ParameterError("epochs must be non-negative")
    r, d = target.shape
    if r < 1:
        raise ShapeError("target needs at least one row")
    layout = GroupLayout(d, groups)
    tape = encode(target.mean(axis=0), layout, grid, epsilon)
    k = grid.k_centers
    if init == "zeros":
        params = GeneratorParams.zeros(groups, k, bank=r)
    elif init == "normal":
        rng = RngStream(seed)
        std = 1.0 / np.sqrt(layout.group_dim)
        params = GeneratorParams(rng_normal(rng, 0.0, std, r * groups * k).reshape(r, groups, k),
                                 rng_normal(rng, 0.0, std, r * groups).reshape(r, groups))
    else:
        raise ParameterError(f"unknown init {init!r}")

    def row_mse(out):
        diff = out - target
        return (diff * diff).mean(axis=1), diff

    b1, b2 = betas
    m = GeneratorParams.zeros(groups, k, bank=r)
    v = GeneratorParams.zeros(groups, k, bank=r)
    mse, diff = row_mse(decode(tape, params))
    initial = float(mse.mean())
    history = [(0, initial)]
    for epoch in range(1, epochs + 1):
        _, grad = generator_backward(tape, params, grid, (2.0 / d) * diff)
        bc1, bc2 = 1.0 - b1 ** epoch, 1.0 - b2 ** epoch
        for p, g, mm, vv in ((params.rbf_weights, grad.rbf_weights, m.rbf_weights, v.rbf_weights),
                             (params.base_weights, grad.base_weights, m.base_weights, v.base_weights)):
            mm *= b1
            mm += (1.0 - b1) * g
            vv *= b2
            vv += (1.0 - b2) * (g * g)
            p -= lr * (mm / bc1) / (np.sqrt(vv / bc2) + adam_eps)
        mse, diff = row_mse(decode(tape, params))
        if epoch % log_every == 0 or epoch == epochs:
            history.append((epoch, float(mse.mean())))

    ls = least_squares_floor(tape, target)
    return FitReport(
        per_row_mse=[float(x) for x in mse],
        mean_mse=float(mse.mean()),
        initial_mse=initial,
        ls_per_row_mse=[float(x) for x in ls],
        ls_mean_mse=float(ls.mean()),
        param_ratio=param_ratio(d, groups, k),
        epochs=epochs,
        lr=lr,
        groups=groups,
        k_centers=k,
        history=history,
    )


def sinusoid_fixture(rows: int = 4, dim: int = 512, seed: int = 0, amplitude: float = 0.1) -> np.ndarray:
    """Rows that are each a sum of three sinusoids over the coordinate index.

    Frequencies are integers in [1, 8]; coefficients are ``amplitude * N(0, 1)``
    and phases uniform on [0, 2*pi). The default amplitude puts entries on the
    scale of trained low-rank factors.
    """
    rng = RngStream(seed)
    j = np.arange(dim) / dim
    out = np.zeros((rows, dim))
    for i in range(rows):
        freq = 1.0 + np.floor(rng_uniform(rng, 0.0, 8.0, 3))
        amp = amplitude * rng_normal(rng, 0.0, 1.0, 3)
        phase = rng_uniform(rng, 0.0, 2 * np.pi, 3)
        for f, a, p in zip(freq, amp, phase):
            out[i] += a * np.sin(2 * np.pi * f * j + p)
    return out
