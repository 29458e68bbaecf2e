"""Desk-scale training harness: synthetic tasks, AdamW, warmup/decay schedule.

The loop mirrors the adapter training recipe: synthesise the low-rank
factors, run ``W0 x + dW x`` through every layer, take the loss, back-propagate
through the generators and latents, step the optimiser.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import adapter_backward, adapter_forward, genlora_init, lora_init
from .config import TrainConfig
from .errors import NumericalError, ParameterError, ShapeError
from .numerics import RngStream, matmul, rng_normal, svd
from .rbf import GeneratorParams, GroupLayout, generator_forward, make_grid

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10


# --- data -------------------------------------------------------------------


@dataclass
class SyntheticTask:
    kind: str
    x: np.ndarray                 # (n_in, N)
    y: np.ndarray                 # (m, N) targets, or (N,) integer labels
    base_weights: list            # frozen W0 per layer
    teacher_deltas: list          # hidden low-rank perturbation per layer


def make_synthetic_task(kind: str, dim_out: int, dim_in: int, layers: int = 1,
                        teacher_rank: int = 4, n_samples: int = 256,
                        teacher_scale: float = 1.0, seed: int = 0, teacher: str = "gaussian",
                        groups: int = 4, k_centers: int = 15) -> SyntheticTask:
    """Teacher-student data ``y = prod_l (W0_l + dW*_l) x``.

    ``teacher="genlora"`` draws ``dW*`` as the product of factors synthesised
    by a random rank-``r*`` generator bank (``groups`` groups, ``k_centers``
    centres), so a GenLoRA student of rank >= r* can represent it exactly.
    ``teacher="gaussian"`` uses ``U V^T / sqrt(n)`` with Gaussian factors.
    Either way ``dW*`` has rank ``r*`` almost surely and is scaled by
    ``teacher_scale``. For ``tiny-classification`` the labels are the
    teacher's argmax class.
    """
    if min(dim_out, dim_in, layers, n_samples) < 1:
        raise ParameterError("task dims must be positive")
    if layers > 1 and dim_out != dim_in:
        raise ParameterError("stacked layers need square weights")
    if kind not in ("teacher-student", "tiny-classification"):
        raise ParameterError(f"unknown task kind {kind!r}")
    if teacher not in ("genlora", "gaussian"):
        raise ParameterError(f"unknown teacher kind {teacher!r}")
    rng = RngStream(seed).fork(0xDA7A)
    w0s, deltas = [], []
    for _ in range(layers):
        w0 = rng_normal(rng, 0.0, 1.0 / np.sqrt(dim_in), dim_out * dim_in).reshape(dim_out, dim_in)
        if teacher_rank > 0 and teacher == "genlora":
            delta = teacher_scale * _genlora_teacher(dim_out, dim_in, teacher_rank, groups, k_centers, rng)
        elif teacher_rank > 0:
            u = rng_normal(rng, 0.0, 1.0, dim_out * teacher_rank).reshape(dim_out, teacher_rank)
            v = rng_normal(rng, 0.0, 1.0, dim_in * teacher_rank).reshape(dim_in, teacher_rank)
            delta = teacher_scale * matmul(u, v.T) / np.sqrt(dim_in)
        else:
            delta = np.zeros((dim_out, dim_in))
        w0s.append(w0)
        deltas.append(delta)
    x = rng_normal(rng, 0.0, 1.0, dim_in * n_samples).reshape(dim_in, n_samples)
    h = x
    for w0, delta in zip(w0s, deltas):
        h = matmul(w0 + delta, h)
    y = np.argmax(h, axis=0) if kind == "tiny-classification" else h
    return SyntheticTask(kind, x, y, w0s, deltas)


def task_from_config(config: TrainConfig) -> SyntheticTask:
    """The synthetic task :func:`train` builds when none is passed in."""
    return make_synthetic_task(config.task, config.dim_out, config.dim_in, config.layers,
                               config.teacher_rank, config.n_samples, config.teacher_scale,
                               config.seed, config.teacher, config.teacher_groups)


def _genlora_teacher(m, n, rank, groups, k_centers, rng):
    grid = make_grid(k_centers)
    factors = []
    for dim in (m, n):
        layout = GroupLayout(dim, groups)
        z = rng_normal(rng, 0.0, 1.0, dim)
        std = 1.0 / np.sqrt(k_centers + 1)
        theta = GeneratorParams(
            rng_normal(rng, 0.0, std, rank * groups * k_centers).reshape(rank, groups, k_centers),
            rng_normal(rng, 0.0, std, rank * groups).reshape(rank, groups),
        )
        factors.append(generator_forward(z, theta, layout, grid)[0])
    return matmul(factors[0].T, factors[1])


# --- losses -------------------------------------------------------------------


def mse_loss(h: np.ndarray, y: np.ndarray):
    diff = h - y
    loss = float((diff * diff).sum() / diff.size)
    return loss, (2.0 / diff.size) * diff


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=0, keepdims=True)
    ez = np.exp(z)
    total = ez.sum(axis=0, keepdims=True)
    batch = logits.shape[1]
    cols = np.arange(batch)
    loss = float((np.log(total[0]) - z[labels, cols]).sum() / batch)
    grad = ez / total
    grad[labels, cols] -= 1.0
    return loss, grad / batch


# --- schedule and optimiser ---------------------------------------------------


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr`` over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    total, warm, base = config.total_steps, config.warmup_steps, config.lr
    if not 0 <= step <= total:
        raise ParameterError(f"step {step} outside [0, {total}]")
    if step < warm:
        return base * step / warm
    if total == warm:
        return base
    return base * (total - step) / (total - warm)


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, opt: OptimizerState, lr: float, frozen=()):
    """One decoupled-weight-decay Adam update, in place.

    Blocks named in ``frozen`` are skipped entirely (no decay, no moment
    update), so they stay bit-identical.
    """
    opt.step += 1
    b1, b2 = opt.betas
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    frozen = set(frozen)
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = opt.exp_avg.setdefault(name, np.zeros_like(p))
        v = opt.exp_avg_sq.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if opt.weight_decay:
            p *= 1.0 - lr * opt.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return params, opt


# --- model ------------------------------------------------------------------


@dataclass
class ToyModel:
    """Stack of frozen linear layers, each carrying one adapter."""

    base_weights: list
    adapters: list
    names: list

    def forward(self, x, dropout: float = 0.0, rng: RngStream | None = None):
        tapes, h = [], x
        for w0, state in zip(self.base_weights, self.adapters):
            h, tape = adapter_forward(state, w0, h, dropout, rng)
            tapes.append(tape)
        return h, tapes

    def backward(self, tapes, upstream) -> dict:
        grads = {}
        for name, state, tape in reversed(list(zip(self.names, self.adapters, tapes))):
            g = adapter_backward(state, tape, upstream)
            upstream = g.pop("x")
            grads.update({f"{name}/{k}": v for k, v in g.items()})
        return grads

    def params(self) -> dict:
        return {f"{name}/{k}": v for name, state in zip(self.names, self.adapters)
                for k, v in state.blocks().items()}

    def frozen_blocks(self) -> set:
        return {f"{name}/{k}" for name, state in zip(self.names, self.adapters)
                for k in state.blocks() if state.is_frozen(k)}


def build_model(config: TrainConfig, task: SyntheticTask) -> ToyModel:
    ad = config.adapter
    rng = RngStream(config.seed).fork(0xADA9)
    adapters = []
    for _ in range(config.layers):
        if ad.kind == "genlora":
            state = genlora_init(
                config.dim_out, config.dim_in, ad.rank, config.effective_groups,
                make_grid(ad.centers, *ad.grid), ad.epsilon, rng,
                scale=ad.scale, normalize=not config.disable_norm, frozen=config.freeze,
            )
        else:
            state = lora_init(config.dim_out, config.dim_in, ad.rank, ad.alpha, rng)
            state.frozen = frozenset(config.freeze)
        adapters.append(state)
    names = [f"layer{i}" for i in range(config.layers)]
    return ToyModel([w.copy() for w in task.base_weights], adapters, names)


# --- spectrum helpers ---------------------------------------------------------


def numerical_rank(m: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = svd(m).singular_values
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


# --- training loop ------------------------------------------------------------


@dataclass
class TrainReport:
    config: dict
    seed: int
    steps: int
    losses: list
    lrs: list
    initial_loss: float
    final_loss: float
    rank_checkpoints: list
    spectrum: list
    wall_time: float = 0.0
    model: ToyModel | None = field(default=None, repr=False)

    def to_dict(self, include_timing: bool = False) -> dict:
        doc = {
            "config": self.config,
            "seed": self.seed,
            "steps": self.steps,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "losses": self.losses,
            "rank_checkpoints": self.rank_checkpoints,
            "spectrum": self.spectrum,
        }
        if include_timing:
            doc["wall_time"] = self.wall_time
        return doc


def _loss_fn(kind: str):
    return cross_entropy_loss if kind == "tiny-classification" else mse_loss


def _batch_targets(task: SyntheticTask, idx):
    return task.y[idx] if task.kind == "tiny-classification" else task.y[:, idx]


def evaluate(model: ToyModel, task: SyntheticTask) -> float:
    h, _ = model.forward(task.x)
    return _loss_fn(task.kind)(h, task.y)[0]


def _rank_checkpoint(model: ToyModel, step: int) -> dict:
    return {"step": step,
            "ranks": {name: numerical_rank(st.delta_w()) for name, st in zip(model.names, model.adapters)}}


def _spectrum(model: ToyModel, tau: float) -> list:
    from .analysis import spectrum_report

    return [spectrum_report(name, st.scale * st.delta_w(), tau, st.num_trainable()).to_dict()
            for name, st in zip(model.names, model.adapters)]


def train(config: TrainConfig, task: SyntheticTask | None = None) -> TrainReport:
    """Run the training loop; deterministic for a fixed config.

    Raises
    ------
    NumericalError
        If the loss or any gradient becomes non-finite; the message names the step.
    """
    start = time.perf_counter()
    if task is None:
        task = task_from_config(config)
    model = build_model(config, task)
    loss_fn = _loss_fn(task.kind)
    opt = OptimizerState(tuple(config.betas), config.adam_eps, config.weight_decay)
    params = model.params()
    frozen = model.frozen_blocks()
    order_rng = RngStream(config.seed).fork(0x0BDE)
    drop_rng = RngStream(config.seed).fork(0xD0D0)
    n_samples = task.x.shape[1]
    batch = min(config.batch_size, n_samples)

    initial_loss = evaluate(model, task)
    losses, lrs, checkpoints = [], [], [_rank_checkpoint(model, 0)]
    perm, cursor = None, n_samples
    for step in range(config.total_steps):
        if cursor + batch > n_samples:
            perm = np.argsort(order_rng.next_u64(n_samples), kind="stable")
            cursor = 0
        idx = perm[cursor:cursor + batch]
        cursor += batch

        h, tapes = model.forward(task.x[:, idx], config.adapter.dropout, drop_rng)
        loss, upstream = loss_fn(h, _batch_targets(task, idx))
        if not np.isfinite(loss):
            raise NumericalError(f"loss became non-finite at step {step}")
        grads = model.backward(tapes, upstream)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"gradient {name} became non-finite at step {step}")
        lr = lr_at(step, config)
        adamw_step(params, grads, opt, lr, frozen)
        losses.append(loss)
        lrs.append(lr)
        if (step + 1) % config.log_every == 0 or step + 1 == config.total_steps:
            checkpoints.append(_rank_checkpoint(model, step + 1))
            log.info("step %d loss %.6g lr %.3g", step + 1, loss, lr)

    final_loss = evaluate(model, task) if config.total_steps else initial_loss
    return TrainReport(
        config=config.to_dict(),
        seed=config.seed,
        steps=config.total_steps,
        losses=losses,
        lrs=lrs,
        initial_loss=initial_loss,
        final_loss=final_loss,
        rank_checkpoints=checkpoints,
        spectrum=_spectrum(model, config.tau),
        wall_time=time.perf_counter() - start,
        model=model,
    )
