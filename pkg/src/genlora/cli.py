"""Command-line interface: ``genlora <command> ...``.

Exit status is 0 on success, 1 when a check (gradcheck, merge --verify)
fails, and 2 for invalid input (schema, shape, divisibility, file format).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, gradcheck
from .adapters import adapter_backward, adapter_forward, load_model_spec, merge, param_count_genlora, param_count_lora
from .config import TrainConfig
from .errors import GenLoraError, NumericalError
from .numerics import RngStream, matmul, rng_normal
from .rbf import make_grid

log = logging.getLogger("genlora")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_BAD_INPUT = 0, 1, 2


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _millions(count: int) -> str:
    return f"{count / 1e6:.2f}M"


# --- param-count ---------------------------------------------------------------


def cmd_param_count(args) -> int:
    spec = load_model_spec(args.model_spec)
    if args.method == "genlora":
        result = param_count_genlora(spec, args.rank, args.groups, args.centers, args.freeze)
    else:
        result = param_count_lora(spec, args.rank)
    repeats = {mat.name: mat.repeat for mat in spec.matrices}
    for name, count in result.per_matrix.items():
        print(f"{name}\t{count}\t(x{repeats[name]})")
    print(f"total\t{result.total}\t{_millions(result.total)}")
    return EXIT_OK


# --- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise GenLoraError(f"config is not valid JSON: {exc}") from None
    config = TrainConfig.from_dict(doc)
    from .training import train

    try:
        report = train(config)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = report.model
    checkpoint.save_checkpoint(out / "checkpoint.glra", dict(zip(model.names, model.adapters)),
                               {"seed": config.seed})
    checkpoint.save_tensors(out / "base.glra", dict(zip(model.names, model.base_weights)),
                            {"format": "weights"})
    checkpoint.atomic_write_text(out / "report.json", _dump_json(report.to_dict()))
    rows = [(i, repr(lr), repr(loss)) for i, (lr, loss) in enumerate(zip(report.lrs, report.losses))]
    checkpoint.atomic_write_text(out / "loss.csv", _csv_text(("step", "lr", "loss"), rows))
    log.info("trained %d steps in %.2fs", report.steps, report.wall_time)
    print(f"initial_loss\t{report.initial_loss!r}")
    print(f"final_loss\t{report.final_loss!r}")
    return EXIT_OK


# --- gradcheck -----------------------------------------------------------------


def _parse_dims(text: str):
    try:
        m, n = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like MxN, got {text!r}") from None
    return m, n


def cmd_gradcheck(args, backward=adapter_backward) -> int:
    if args.trials < 1:
        raise GenLoraError("--trials must be at least 1")
    if args.random:
        configs = gradcheck.random_configs(args.random, seed=args.seed)
    else:
        m, n = args.dims
        configs = [dict(m=m, n=n, rank=args.rank, groups=args.groups, k_centers=args.centers)]
    worst: dict[str, float] = {}
    for i, cfg in enumerate(configs):
        res = gradcheck.run_gradcheck(**cfg, seed=args.seed + i, trials=args.trials, backward=backward)
        for name, err in res.max_errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    print(f"configs\t{len(configs)}\ttrials\t{args.trials}")
    for name, err in worst.items():
        status = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name}\t{err:.3e}\t{status}")
    failing = sorted(k for k, v in worst.items() if v >= gradcheck.TOLERANCE)
    if failing:
        print(f"gradient check failed for: {', '.join(failing)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# --- analyze -------------------------------------------------------------------


def cmd_analyze(args) -> int:
    states, _ = checkpoint.load_checkpoint(args.checkpoint)
    reports = [analysis.spectrum_report(name, st.scale * st.delta_w(), args.threshold, st.num_trainable())
               for name, st in states.items()]
    out = Path(args.out)
    rows = [(r.name, i, repr(float(s))) for r in reports for i, s in enumerate(r.singular_values)]
    checkpoint.atomic_write_text(out, _csv_text(("name", "sigma_index", "sigma_value"), rows))
    summary = [(r.name, r.effective_rank, repr(r.energy), r.params) for r in reports]
    summary_path = out.with_name(out.stem + "_summary.csv")
    checkpoint.atomic_write_text(summary_path,
                                 _csv_text(("name", "effective_rank", "energy", "params"), summary))
    json_path = Path(args.json) if args.json else out.with_suffix(".json")
    checkpoint.atomic_write_text(json_path, _dump_json([r.to_dict() for r in reports]))
    for r in reports:
        print(f"{r.name}\teffective_rank\t{r.effective_rank}\tenergy\t{r.energy:.6g}")
    return EXIT_OK


# --- reconstruct ---------------------------------------------------------------


def _load_target(args) -> np.ndarray:
    if args.fixture == "sinusoid":
        return analysis.sinusoid_fixture(args.rows, args.dim, args.seed)
    if args.target is None:
        raise GenLoraError("reconstruct needs --target FILE or --fixture sinusoid")
    if str(args.target).endswith(".npy"):
        target = np.load(args.target)
    else:
        _, tensors = checkpoint.load_tensors(args.target)
        if not tensors:
            raise GenLoraError(f"{args.target} holds no tensors")
        key = args.name or next(iter(tensors))
        if key not in tensors:
            raise GenLoraError(f"tensor {key!r} not in {args.target}")
        target = tensors[key]
    if target.ndim != 2:
        raise GenLoraError(f"target must be a 2-D row matrix, got shape {target.shape}")
    return target


def cmd_reconstruct(args) -> int:
    target = _load_target(args)
    fit = analysis.reconstruct_basis(target, args.groups, make_grid(args.centers), args.epochs,
                                     args.lr, args.seed)
    checkpoint.atomic_write_text(args.out, _dump_json(fit.to_dict()))
    print(f"param_ratio\t{fit.param_ratio:.4%}")
    print(f"mean_mse\t{fit.mean_mse:.6e}")
    print(f"ls_floor_mse\t{fit.ls_mean_mse:.6e}")
    print(f"relative_gap\t{fit.relative_gap:.4%}")
    return EXIT_OK


# --- merge ---------------------------------------------------------------------


def cmd_merge(args) -> int:
    states, _ = checkpoint.load_checkpoint(args.adapter)
    base_meta, base = checkpoint.load_tensors(args.base)
    missing = sorted(set(states) - set(base))
    if missing:
        raise GenLoraError(f"base file lacks weights for adapters: {', '.join(missing)}")
    merged = dict(base)
    for name, st in states.items():
        merged[name] = merge(st, base[name])
    checkpoint.save_tensors(args.out, merged, {"format": "weights", "merged_adapters": sorted(states)})
    print(f"merged\t{len(states)}\tadapters into {args.out}")
    if not args.verify:
        return EXIT_OK
    rng = RngStream(args.seed)
    worst = 0.0
    for name, st in states.items():
        x = rng_normal(rng, 0.0, 1.0, st.n * args.probes).reshape(st.n, args.probes)
        h, _ = adapter_forward(st, base[name], x)
        worst = max(worst, float(np.max(np.abs(matmul(merged[name], x) - h))))
    ok = worst < args.tolerance
    print(f"verify\tmax_abs_diff\t{worst:.3e}\t{'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genlora", description="Generative low-rank adapters with RBF generators.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("param-count", help="count trainable adapter parameters for a model spec")
    s.add_argument("--model-spec", required=True, help="JSON file or bundled name (llama3-qkv, gemma-qkv, qwen25-qkv)")
    s.add_argument("--method", choices=("genlora", "lora"), default="genlora")
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--groups", type=int, default=16)
    s.add_argument("--centers", type=int, default=15)
    s.add_argument("--freeze", nargs="*", default=(), choices=("z_a", "z_b", "theta_a", "theta_b"))
    s.set_defaults(func=cmd_param_count)

    s = sub.add_parser("train", help="train a toy model with adapters")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gradcheck", help="finite-difference check of the adapter backward pass")
    s.add_argument("--dims", type=_parse_dims, default=(6, 8))
    s.add_argument("--rank", type=int, default=2)
    s.add_argument("--groups", type=int, default=2)
    s.add_argument("--centers", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=1)
    s.add_argument("--random", type=int, default=0, metavar="N",
                   help="check N random configurations (dims 4-32, r 1-8, G 1-8, K 3-15) instead")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("analyze", help="singular value spectrum of checkpointed updates")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--threshold", type=float, default=analysis.DEFAULT_TAU)
    s.add_argument("--out", required=True, help="spectrum CSV path")
    s.add_argument("--json", default=None, help="JSON report path (default: OUT with .json suffix)")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("reconstruct", help="fit generators to explicit basis vectors")
    s.add_argument("--target", default=None, help="GLRA or .npy file holding an r x d row matrix")
    s.add_argument("--name", default=None, help="tensor name inside a GLRA target")
    s.add_argument("--fixture", choices=("sinusoid",), default=None)
    s.add_argument("--rows", type=int, default=4)
    s.add_argument("--dim", type=int, default=512)
    s.add_argument("--groups", type=int, default=16)
    s.add_argument("--centers", type=int, default=15)
    s.add_argument("--epochs", type=int, default=2000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("merge", help="fold adapters into base weights")
    s.add_argument("--base", required=True)
    s.add_argument("--adapter", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--verify", action="store_true")
    s.add_argument("--probes", type=int, default=100)
    s.add_argument("--tolerance", type=float, default=1e-9)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_merge)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GenLoraError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
