"""Central finite-difference checks for the adapter backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import adapter_backward, adapter_forward
from .errors import ParameterError
from .numerics import RngStream, rng_normal, rng_uniform
from .rbf import GeneratorParams, make_grid

FD_STEP = 1e-6
TOLERANCE = 1e-6


def central_difference(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Gradient of scalar ``f()`` w.r.t. array ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(1, max|a|, max|n|)``.

    A unit floor in the denominator keeps blocks whose true gradient is zero
    (e.g. ``z_b`` at initialisation) from turning round-off into huge ratios.
    """
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale = max(1.0, np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    return float(diff / scale)


def check_adapter(state, w0, x, weights=None, step: float = FD_STEP,
                  backward=adapter_backward) -> dict[str, float]:
    """Compare ``backward`` with finite differences of ``sum(weights * h)``.

    ``weights`` defaults to all ones (loss = sum of outputs). Returns the
    relative error per parameter block and for the input ``x``.
    """
    if weights is None:
        weights = np.ones((state.m, x.shape[1]))
    x = np.array(x, dtype=np.float64)

    def loss():
        h, _ = adapter_forward(state, w0, x)
        return float(np.sum(weights * h))

    _, tape = adapter_forward(state, w0, x)
    analytic = backward(state, tape, weights)
    errors = {}
    for name, arr in state.blocks().items():
        if state.is_frozen(name):
            continue
        errors[name] = relative_error(analytic[name], central_difference(loss, arr, step))
    errors["x"] = relative_error(analytic["x"], central_difference(loss, x, step))
    return errors


@dataclass
class GradcheckResult:
    trials: int
    max_errors: dict
    configs: list

    @property
    def passed(self) -> bool:
        return all(v < TOLERANCE for v in self.max_errors.values())

    def failing_blocks(self) -> list[str]:
        return sorted(k for k, v in self.max_errors.items() if v >= TOLERANCE)


def random_genlora_state(m: int, n: int, rank: int, groups: int, k_centers: int, rng: RngStream,
                         normalize: bool = True):
    """GenLoRA state with every block drawn at random (no zero-initialised bank)."""
    from .adapters import GenLoraState

    def bank():
        std = 1.0 / np.sqrt(k_centers + 1)
        return GeneratorParams(
            rng_normal(rng, 0.0, std, rank * groups * k_centers).reshape(rank, groups, k_centers),
            rng_normal(rng, 0.0, std, rank * groups).reshape(rank, groups),
        )

    return GenLoraState(
        m, n, rank, groups, make_grid(k_centers),
        z_b=rng_uniform(rng, -1.0, 1.0, m), z_a=rng_uniform(rng, -1.0, 1.0, n),
        theta_b=bank(), theta_a=bank(), normalize=normalize,
    )


def run_gradcheck(m: int, n: int, rank: int, groups: int, k_centers: int, seed: int = 0,
                  trials: int = 1, batch: int = 4, backward=adapter_backward) -> GradcheckResult:
    """Repeated finite-difference checks on fresh random states of one configuration."""
    if trials < 1:
        raise ParameterError("trials must be at least 1")
    rng = RngStream(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        state = random_genlora_state(m, n, rank, groups, k_centers, rng)
        w0 = rng_normal(rng, 0.0, 1.0 / np.sqrt(n), m * n).reshape(m, n)
        x = rng_normal(rng, 0.0, 1.0, n * batch).reshape(n, batch)
        for name, err in check_adapter(state, w0, x, backward=backward).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return GradcheckResult(trials, worst, [dict(m=m, n=n, rank=rank, groups=groups, k_centers=k_centers)])


def random_configs(count: int, seed: int = 0, dims=(4, 32), ranks=(1, 8), groups=(1, 8),
                   centers=(3, 15)) -> list[dict]:
    """Random valid configurations: G divides both dims and leaves groups of width >= 2."""
    rng = RngStream(seed)

    def pick(lo, hi):
        return int(lo + np.floor(rng_uniform(rng, 0.0, 1.0, 1)[0] * (hi - lo + 1)))

    out = []
    while len(out) < count:
        g = pick(*groups)
        m, n = pick(*dims), pick(*dims)
        if m % g or n % g or m // g < 2 or n // g < 2:
            continue
        out.append(dict(m=m, n=n, rank=pick(*ranks), groups=g, k_centers=pick(*centers)))
    return out
