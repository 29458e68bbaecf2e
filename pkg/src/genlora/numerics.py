"""Dense linear algebra, SVD and seeded randomness.

Matrices are plain 2-D ``float64`` numpy arrays. Everything here is
deterministic for fixed inputs: ``matmul`` accumulates over the inner
dimension in a fixed order, and the SVD is a one-sided (Hestenes) Jacobi
iteration with a fixed round-robin pair schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError

__all__ = [
    "as_matrix",
    "matmul",
    "SvdResult",
    "svd",
    "RngStream",
    "rng_uniform",
    "rng_normal",
]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate ``x`` as a finite 2-D float64 matrix and return a C-contiguous copy."""
    m = np.array(x, dtype=np.float64, order="C", copy=True)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ParameterError(f"{name} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order.

    ``out[i, j] = ((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + a[i,2]*b[2,j]) + ...``
    with each product and sum rounded separately (no fused multiply-add),
    which makes the result bitwise equal to a naive triple loop.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for p in range(a.shape[1]):
        out += np.multiply.outer(a[:, p], b[p, :])
    return out


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = U diag(S) V^T`` with ``k = min(rows, cols)`` components."""

    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return matmul(self.left_vectors * self.singular_values, self.right_vectors.T)


MAX_SWEEPS = 80


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: n-1 rounds of n/2 disjoint pairs (n even).
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        top, bot = players[:half], players[half:][::-1]
        p = np.array([min(i, j) for i, j in zip(top, bot)])
        q = np.array([max(i, j) for i, j in zip(top, bot)])
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, null_cols: np.ndarray) -> None:
    # Replace columns in null_cols with unit vectors orthogonal to all others.
    m = u.shape[0]
    keep = [j for j in range(u.shape[1]) if j not in set(null_cols.tolist())]
    basis = [u[:, j] for j in keep]
    candidate = 0
    for j in null_cols:
        while True:
            if candidate >= m:
                raise NumericalError("could not complete orthonormal basis")
            v = np.zeros(m)
            v[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for w in basis:
                    v -= (w @ v) * w
            norm = np.sqrt(v @ v)
            if norm > 0.5:
                v /= norm
                u[:, j] = v
                basis.append(v)
                break


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    npad = n + (n % 2)
    if npad != n:
        w = np.hstack([w, np.zeros((m, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    tol = np.finfo(np.float64).eps * max(m, 2)
    # Columns below this squared norm are roundoff of a rank-deficient input;
    # rotating them against each other never converges, so they are left alone
    # and later reported as exact zeros.
    noise = tol * np.sqrt(np.sum(a * a))
    noise_sq = noise * noise
    schedule = _round_robin(npad) if npad > 1 else []
    for _sweep in range(MAX_SWEEPS):
        rotated = False
        for p, q in schedule:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            active &= (alpha > noise_sq) & (beta > noise_sq)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")

    w, v = w[:, :n], v[:n, :n]
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    live = (sigma > noise) & (sigma >= np.finfo(np.float64).tiny)
    null = np.flatnonzero(~live)
    u = np.divide(w, sigma, out=np.zeros_like(w), where=live)
    if null.size:
        sigma[null] = 0.0
        _complete_basis(u, null)
    return SvdResult(sigma, u, v)


def svd(m) -> SvdResult:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Singular values are returned in non-increasing order. Left and right
    singular vectors are column-orthonormal. Singular values at the roundoff
    floor (below about ``eps * max(m, n) * ||M||_F``) are reported as exactly 0
    and their left vectors are completed to an orthonormal set.

    Raises
    ------
    NumericalError
        If the rotations have not converged after ``MAX_SWEEPS`` sweeps.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        k = min(rows, cols)
        return SvdResult(np.zeros(k), np.zeros((rows, k)), np.zeros((cols, k)))
    if rows >= cols:
        return _jacobi_tall(a)
    res = _jacobi_tall(a.T)
    return SvdResult(res.singular_values, res.right_vectors, res.left_vectors)


# --- randomness -----------------------------------------------------------
#
# SplitMix64 (Steele, Lea & Flood 2014) used as a counter-based generator:
# draw i of a stream is mix(key + i * GOLDEN_GAMMA), so any block of draws
# can be produced with vectorised uint64 arithmetic. The key itself is the
# first SplitMix64 output for the user seed.

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX_1
    z = (z ^ (z >> np.uint64(27))) * _MIX_2
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Seeded counter-based random stream.

    Identical seeds give identical sequences on every platform for the raw
    64-bit draws and uniforms; normals additionally depend on libm ``log``,
    ``cos`` and ``sin``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.key = int(_mix64(np.array([self.seed], dtype=np.uint64) + GOLDEN_GAMMA)[0])
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ParameterError("n must be non-negative")
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(np.uint64(self.key) + idx * GOLDEN_GAMMA)

    def fork(self, tag: int) -> "RngStream":
        """Independent stream derived from this stream's key and ``tag``."""
        z = _mix64(np.array([self.key ^ (int(tag) & _MASK64)], dtype=np.uint64))
        return RngStream(int(z[0]))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"


def _unit_uniform(stream: RngStream, n: int) -> np.ndarray:
    return (stream.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def rng_uniform(stream: RngStream, lo: float, hi: float, n: int) -> np.ndarray:
    """``n`` draws from U[lo, hi) using 53-bit mantissas."""
    if not lo < hi:
        raise ParameterError(f"uniform range needs lo < hi, got [{lo}, {hi})")
    x = lo + (hi - lo) * _unit_uniform(stream, n)
    return np.where(x >= hi, np.nextafter(hi, lo), x)


def rng_normal(stream: RngStream, mean: float, std: float, n: int) -> np.ndarray:
    """``n`` normal draws via Box-Muller (both outputs of each pair are used)."""
    if std < 0:
        raise ParameterError(f"std must be non-negative, got {std}")
    pairs = (n + 1) // 2
    u = _unit_uniform(stream, 2 * pairs)
    u1, u2 = 1.0 - u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(2.0 * np.pi * u2)
    z[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return mean + std * z[:n]
