"""GenLoRA and LoRA adapters for a single frozen linear layer.

Both adapter kinds expose the same surface: ``delta_w``, ``forward``,
``backward``, ``merge`` and ``blocks`` (named views of the trainable
arrays, used by the optimiser, checkpointing and gradient checks).
Gradients come back as a dict keyed like ``blocks`` plus ``"x"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rbf
from .config import validate_model_spec
from .errors import ParameterError, SchemaError, ShapeError
from .numerics import RngStream, as_matrix, matmul, rng_normal, rng_uniform
from .rbf import GeneratorParams, GeneratorTape, GridSpec, GroupLayout, make_grid

GENLORA_BLOCKS = ("z_a", "z_b", "theta_a.rbf", "theta_a.base", "theta_b.rbf", "theta_b.base")
FREEZABLE = ("z_a", "z_b", "theta_a", "theta_b")


def _block_owner(name: str) -> str:
    return name.split(".")[0]


@dataclass
class GenLoraState:
    """Latents plus generator banks for one adapted ``m x n`` matrix.

    ``theta_b`` / ``theta_a`` are banks: arrays with a leading axis of
    length ``rank``, one generator per basis vector.
    """

    m: int
    n: int
    rank: int
    groups: int
    grid: GridSpec
    z_b: np.ndarray
    z_a: np.ndarray
    theta_b: GeneratorParams
    theta_a: GeneratorParams
    epsilon: float = rbf.DEFAULT_EPSILON
    scale: float = 1.0
    normalize: bool = True
    frozen: frozenset = field(default_factory=frozenset)

    kind = "genlora"

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError(f"rank must be >= 1, got {self.rank}")
        self.layout_b = GroupLayout(self.m, self.groups)
        self.layout_a = GroupLayout(self.n, self.groups)
        bad = set(self.frozen) - set(FREEZABLE)
        if bad:
            raise ParameterError(f"unknown freeze flags {sorted(bad)}; expected a subset of {FREEZABLE}")
        self.frozen = frozenset(self.frozen)
        want = {
            "z_b": (self.m,),
            "z_a": (self.n,),
            "theta_b.rbf": (self.rank, self.groups, self.grid.k_centers),
            "theta_a.rbf": (self.rank, self.groups, self.grid.k_centers),
            "theta_b.base": (self.rank, self.groups),
            "theta_a.base": (self.rank, self.groups),
        }
        for name, arr in self.blocks().items():
            if arr.shape != want[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {want[name]}")

    def blocks(self) -> dict[str, np.ndarray]:
        return {
            "z_a": self.z_a,
            "z_b": self.z_b,
            "theta_a.rbf": self.theta_a.rbf_weights,
            "theta_a.base": self.theta_a.base_weights,
            "theta_b.rbf": self.theta_b.rbf_weights,
            "theta_b.base": self.theta_b.base_weights,
        }

    def is_frozen(self, block: str) -> bool:
        return _block_owner(block) in self.frozen

    def num_trainable(self) -> int:
        return sum(a.size for k, a in self.blocks().items() if not self.is_frozen(k))

    def copy(self) -> "GenLoraState":
        return GenLoraState(
            self.m, self.n, self.rank, self.groups, self.grid,
            self.z_b.copy(), self.z_a.copy(), self.theta_b.copy(), self.theta_a.copy(),
            self.epsilon, self.scale, self.normalize, self.frozen,
        )

    def synthesize(self):
        return synthesize(self)

    def delta_w(self) -> np.ndarray:
        b, a, _ = synthesize(self)
        return matmul(b, a)

    def delta_w_outer(self) -> np.ndarray:
        b, a, _ = synthesize(self)
        return _outer_sum(b, a)

    def factors(self):
        b, a, _ = synthesize(self)
        return b, a


def genlora_param_count(m: int, n: int, rank: int, groups: int, k_centers: int,
                        frozen=()) -> int:
    """Closed-form trainable-parameter count of one GenLoRA matrix."""
    if m % groups or n % groups:
        raise ParameterError(f"{groups} groups do not divide dims ({m}, {n})")
    per_bank = rank * groups * (k_centers + 1)
    sizes = {"z_b": m, "z_a": n, "theta_b": per_bank, "theta_a": per_bank}
    return sum(v for k, v in sizes.items() if k not in set(frozen))


def genlora_init(m: int, n: int, rank: int, groups: int, grid: GridSpec | None = None,
                 epsilon: float = rbf.DEFAULT_EPSILON, rng: RngStream | int = 0,
                 scale: float = 1.0, normalize: bool = True, frozen=()) -> GenLoraState:
    """Zero-update initialisation.

    ``z_a`` is Kaiming-uniform on ``[-sqrt(3/n), sqrt(3/n)]``; every weight of
    the A bank (RBF and base) is drawn from N(0, 1/d_g), independently per
    generator. ``z_b`` and the B bank start at zero, so B and the update are
    exactly zero.
    """
    grid = grid or make_grid()
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    GroupLayout(m, groups)
    layout_a = GroupLayout(n, groups)
    if not isinstance(rng, RngStream):
        rng = RngStream(rng)
    k = grid.k_centers
    bound = np.sqrt(3.0 / n)
    z_a = rng_uniform(rng, -bound, bound, n)
    std = 1.0 / np.sqrt(layout_a.group_dim)
    theta_a = GeneratorParams(
        rng_normal(rng, 0.0, std, rank * groups * k).reshape(rank, groups, k),
        rng_normal(rng, 0.0, std, rank * groups).reshape(rank, groups),
    )
    return GenLoraState(
        m, n, rank, groups, grid,
        z_b=np.zeros(m), z_a=z_a,
        theta_b=GeneratorParams.zeros(groups, k, bank=rank), theta_a=theta_a,
        epsilon=epsilon, scale=scale, normalize=normalize, frozen=frozenset(frozen),
    )


@dataclass
class SynthesisTape:
    b: GeneratorTape
    a: GeneratorTape


def synthesize(state: GenLoraState):
    """Build ``B`` (m x r, one generated column per rank) and ``A`` (r x n).

    Returns ``(B, A, tapes)``.
    """
    out_b, tape_b = rbf.generator_forward(state.z_b, state.theta_b, state.layout_b,
                                          state.grid, state.epsilon, state.normalize)
    out_a, tape_a = rbf.generator_forward(state.z_a, state.theta_a, state.layout_a,
                                          state.grid, state.epsilon, state.normalize)
    return np.ascontiguousarray(out_b.T), out_a, SynthesisTape(tape_b, tape_a)


def _outer_sum(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = np.zeros((b.shape[0], a.shape[1]))
    for i in range(b.shape[1]):
        out += np.multiply.outer(b[:, i], a[i, :])
    return out


def delta_w(state) -> np.ndarray:
    """Unscaled low-rank update ``B @ A``."""
    return state.delta_w()


@dataclass
class LoraState:
    """Explicit-basis LoRA baseline; update is ``(alpha / r) * B @ A``."""

    b: np.ndarray
    a: np.ndarray
    alpha: float
    frozen: frozenset = field(default_factory=frozenset)

    kind = "lora"

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.b.ndim != 2 or self.a.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"LoRA factors {self.b.shape} and {self.a.shape} are not conformable")
        self.frozen = frozenset(self.frozen)

    @property
    def m(self) -> int:
        return self.b.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def blocks(self) -> dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b}

    def is_frozen(self, block: str) -> bool:
        return block in self.frozen

    def num_trainable(self) -> int:
        return sum(a.size for k, a in self.blocks().items() if not self.is_frozen(k))

    def copy(self) -> "LoraState":
        return LoraState(self.b.copy(), self.a.copy(), self.alpha, self.frozen)

    def factors(self):
        return self.b, self.a

    def delta_w(self) -> np.ndarray:
        return matmul(self.b, self.a)

    def delta_w_outer(self) -> np.ndarray:
        return _outer_sum(self.b, self.a)


def lora_init(m: int, n: int, rank: int, alpha: float | None = None,
              rng: RngStream | int = 0) -> LoraState:
    """``A ~ N(0, 1/n)``, ``B = 0``; ``alpha`` defaults to ``2 * rank``."""
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    if not isinstance(rng, RngStream):
        rng = RngStream(rng)
    a = rng_normal(rng, 0.0, 1.0 / np.sqrt(n), rank * n).reshape(rank, n)
    return LoraState(np.zeros((m, rank)), a, float(2 * rank if alpha is None else alpha))


# --- forward / backward through W0 x + s * dW x ------------------------------


@dataclass
class AdapterTape:
    w0: np.ndarray
    x: np.ndarray
    x_drop: np.ndarray
    keep_mask: np.ndarray | None
    keep_scale: float
    b: np.ndarray
    a: np.ndarray
    ax: np.ndarray
    synthesis: SynthesisTape | None


def adapter_forward(state, w0, x, dropout: float = 0.0, rng: RngStream | None = None):
    """``h = W0 x + s * B (A x~)``, where ``x~`` is ``x`` after optional
    inverted dropout on the adapter path. Returns ``(h, tape)``."""
    w0 = np.asarray(w0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w0.shape != (state.m, state.n):
        raise ShapeError(f"base weight {w0.shape} does not match adapter ({state.m}, {state.n})")
    if x.ndim != 2 or x.shape[0] != state.n:
        raise ShapeError(f"input {x.shape} must be ({state.n}, batch)")
    if not 0.0 <= dropout < 1.0:
        raise ParameterError(f"dropout must lie in [0, 1), got {dropout}")
    mask, keep_scale, x_drop = None, 1.0, x
    if dropout > 0.0:
        if rng is None:
            raise ParameterError("dropout needs an RngStream")
        mask = rng_uniform(rng, 0.0, 1.0, x.size).reshape(x.shape) >= dropout
        keep_scale = 1.0 / (1.0 - dropout)
        x_drop = np.where(mask, x * keep_scale, 0.0)
    if state.kind == "genlora":
        b, a, syn = synthesize(state)
    else:
        (b, a), syn = state.factors(), None
    ax = matmul(a, x_drop)
    h = matmul(w0, x) + state.scale * matmul(b, ax)
    return h, AdapterTape(w0, x, x_drop, mask, keep_scale, b, a, ax, syn)


def adapter_backward(state, tape: AdapterTape, upstream) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``upstream = dL/dh`` (m x batch).

    With ``G = s * upstream @ x~^T``: ``dL/dB = G A^T`` and ``dL/dA = B^T G``,
    evaluated without forming ``G``. Frozen blocks get zero gradients.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (state.m, tape.x.shape[1]):
        raise ShapeError(f"upstream {upstream.shape} does not match output ({state.m}, {tape.x.shape[1]})")
    s = state.scale
    grad_b = s * matmul(upstream, tape.ax.T)
    bt_up = matmul(tape.b.T, upstream)
    grad_a = s * matmul(bt_up, tape.x_drop.T)
    grad_x_drop = s * matmul(tape.a.T, bt_up)
    if tape.keep_mask is not None:
        grad_x_drop = np.where(tape.keep_mask, grad_x_drop * tape.keep_scale, 0.0)
    grads = {"x": matmul(tape.w0.T, upstream) + grad_x_drop}

    if state.kind == "genlora":
        gz_b, gth_b = rbf.generator_backward(tape.synthesis.b, state.theta_b, state.grid, grad_b.T)
        gz_a, gth_a = rbf.generator_backward(tape.synthesis.a, state.theta_a, state.grid, grad_a)
        grads.update({
            "z_a": gz_a, "z_b": gz_b,
            "theta_a.rbf": gth_a.rbf_weights, "theta_a.base": gth_a.base_weights,
            "theta_b.rbf": gth_b.rbf_weights, "theta_b.base": gth_b.base_weights,
        })
    else:
        grads.update({"a": grad_a, "b": grad_b})
    for name in state.blocks():
        if state.is_frozen(name):
            grads[name] = np.zeros_like(grads[name])
    return grads


lora_forward = adapter_forward
lora_backward = adapter_backward


def merge(state, w0) -> np.ndarray:
    """Fold the scaled update into the base weight: ``W0 + s * dW``."""
    w0 = as_matrix(w0, "base weight")
    if w0.shape != (state.m, state.n):
        raise ShapeError(f"base weight {w0.shape} does not match adapter ({state.m}, {state.n})")
    return w0 + state.scale * state.delta_w()


# --- parameter accounting ---------------------------------------------------


@dataclass(frozen=True)
class AdaptedMatrix:
    name: str
    out_dim: int
    in_dim: int
    repeat: int = 1


@dataclass(frozen=True)
class ModelSpec:
    name: str
    matrices: tuple[AdaptedMatrix, ...]

    def __post_init__(self):
        names = [mat.name for mat in self.matrices]
        if len(set(names)) != len(names):
            raise ParameterError(f"duplicate matrix names in model spec {self.name!r}")
        for mat in self.matrices:
            if mat.out_dim < 1 or mat.in_dim < 1 or mat.repeat < 1:
                raise ParameterError(f"matrix {mat.name!r} needs positive dims and repeat")

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        return cls(doc.get("name", "model"),
                   tuple(AdaptedMatrix(**entry) for entry in doc["matrices"]))


BUNDLED_SPECS = ("llama3-qkv", "gemma-qkv", "qwen25-qkv")


def load_model_spec(path_or_name) -> ModelSpec:
    """Load a model spec from a JSON file or by bundled name (e.g. ``llama3-qkv``)."""
    if str(path_or_name) in BUNDLED_SPECS:
        path = Path(__file__).parent / "specs" / f"{path_or_name}.json"
    else:
        path = Path(path_or_name)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model spec {path} is not valid JSON: {exc}") from None
    validate_model_spec(doc)
    return ModelSpec.from_dict(doc)


@dataclass(frozen=True)
class ParamCount:
    total: int
    per_matrix: dict[str, int]


def param_count_genlora(spec: ModelSpec, rank: int, groups: int, k_centers: int,
                        frozen=()) -> ParamCount:
    per = {}
    for mat in spec.matrices:
        try:
            count = genlora_param_count(mat.out_dim, mat.in_dim, rank, groups, k_centers, frozen)
        except ParameterError as exc:
            raise ParameterError(f"matrix {mat.name!r}: {exc}") from None
        per[mat.name] = count * mat.repeat
    return ParamCount(sum(per.values()), per)


def param_count_lora(spec: ModelSpec, rank: int) -> ParamCount:
    if rank < 0:
        raise ParameterError(f"rank must be non-negative, got {rank}")
    per = {mat.name: rank * (mat.out_dim + mat.in_dim) * mat.repeat for mat in spec.matrices}
    return ParamCount(sum(per.values()), per)
