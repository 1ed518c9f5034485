"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage/format error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import os
import re
import sys
import time

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .backbone import format_census, param_census
from .checkpoint import FormatError
from .config import ConfigError, load_config
from .degradations import ALL_TASKS, COMPOSITES, DegradationKind, DegradedSample, make_sample
from .imageio import read_ppm, write_ppm
from .metrics import psnr, ssim
from .pip import ABLATIONS, pairwise_angles

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- omega parsing

def parse_omega(spec: str, tasks) -> np.ndarray | None:
    """Task name -> one-hot, comma list -> explicit vector, "auto" -> None."""
    spec = spec.strip()
    if spec == "auto":
        return None
    if spec in tasks:
        out = np.zeros(len(tasks), dtype=np.float32)
        out[list(tasks).index(spec)] = 1.0
        return out
    if spec in ALL_TASKS:
        raise UsageError(f"task {spec!r} is not one of this model's tasks {list(tasks)}")
    try:
        vec = np.array([float(v) for v in spec.split(",")], dtype=np.float32)
    except ValueError:
        raise UsageError(f"omega must be a task name {list(tasks)}, a comma-separated vector or 'auto'") from None
    if vec.shape != (len(tasks),):
        raise UsageError(f"omega vector has {vec.size} entries, model expects {len(tasks)} ({', '.join(tasks)})")
    if np.any(vec < 0) or not np.all(np.isfinite(vec)):
        raise UsageError("omega entries must be finite and nonnegative")
    return vec


def _load_classifier(path):
    from .controller import load_classifier
    if path is None:
        raise UsageError("this omega policy needs --classifier PATH")
    return load_classifier(path)


# ---------------------------------------------------------------- prompt report

_BANK_RE = re.compile(r"^(?:model\.)?pips\.(\d+)\.bank$")


def prompt_banks(tensors: dict[str, np.ndarray]) -> list[tuple[int, np.ndarray]]:
    found = []
    for name, arr in tensors.items():
        m = _BANK_RE.match(name)
        if m:
            found.append((int(m.group(1)), np.asarray(arr, dtype=np.float64)))
    return sorted(found, key=lambda kv: kv[0])


def angle_report(banks, tasks=None) -> str:
    """Per-instance T x T angle grids (degrees); '#' lines carry labels and summaries."""
    lines = []
    for idx, bank in banks:
        T, c = bank.shape
        names = " ".join(tasks) if tasks and len(tasks) == T else " ".join(f"t{i}" for i in range(T))
        lines.append(f"# pip{idx} c={c} T={T} order: {names}")
        ang = pairwise_angles(bank)
        lines += [" ".join(f"{v:.2f}" for v in row) for row in ang]
        off = ang[np.triu_indices(T, 1)]
        lines.append(f"# pip{idx} min_angle {off.min():.2f}" if off.size else f"# pip{idx} min_angle n/a")
    return "\n".join(lines)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .train import train, log_stderr
    cfg = load_config(args.config, args.seed)
    out = train(cfg, resume=args.resume, log=log_stderr)
    tensors, _ = checkpoint.load(out["checkpoint"])
    report = angle_report(prompt_banks(tensors), cfg.data.tasks)
    with open(os.path.join(cfg.paths.run_dir, "prompt_angles.txt"), "w") as fh:
        fh.write(report + "\n")
    print(report)
    print(f"checkpoint: {out['checkpoint']}")
    print(f"metrics log: {out['log_path']}")
    return EXIT_OK


def cmd_restore(args) -> int:
    from .train import load_model, restore
    model, cfg, _ = load_model(args.checkpoint)
    tasks = cfg.data.tasks
    try:
        img = read_ppm(args.input)
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc.strerror or exc}") from None
    model.check_input(img.shape)
    omega = parse_omega(args.omega, tasks)
    if omega is None:
        omega = _load_classifier(args.classifier).omega_for(img, tasks, hard=not args.soft)
    out = restore(model, img, omega)
    write_ppm(args.output, out)
    print("omega " + " ".join(f"{t}={w:.4f}" for t, w in zip(tasks, omega)))
    print(f"wrote {args.output}")
    if args.reference:
        try:
            ref = read_ppm(args.reference)
        except OSError as exc:
            raise UsageError(f"cannot read {args.reference}: {exc.strerror or exc}") from None
        if ref.shape != img.shape:
            raise UsageError(f"reference shape {ref.shape} differs from input {img.shape}")
        print(f"input    PSNR {psnr(img, ref):.3f} dB  SSIM {ssim(img, ref):.4f}")
        print(f"restored PSNR {psnr(out, ref):.3f} dB  SSIM {ssim(out, ref):.4f}")
    return EXIT_OK


def _eval_samples(tasks, eval_tasks, per_task, seed, size):
    out = []
    for ti, task in enumerate(tasks):
        if task not in eval_tasks:
            continue
        kind = DegradationKind.parse(task)
        out += [make_sample([seed, ti, i], kind, tasks, size) for i in range(per_task)]
    return out


def cmd_eval(args) -> int:
    from .train import composite_set, evaluate, load_model
    if args.ablation is not None and args.ablation not in ABLATIONS:
        raise UsageError(f"ablation letter must be one of {sorted(ABLATIONS)}, got {args.ablation!r}")
    model, cfg, _ = load_model(args.checkpoint)
    trained = cfg.train.ablation
    if args.ablation is not None and args.ablation != trained:
        raise UsageError(f"checkpoint was trained as config {trained!r}, not {args.ablation!r}")
    tasks = cfg.data.tasks
    eval_tasks = tasks if not args.tasks else [t.strip() for t in args.tasks.split(",")]
    bad = [t for t in eval_tasks if t not in tasks]
    if bad:
        raise UsageError(f"tasks {bad} are not among the model's tasks {tasks}")
    policy = args.policy
    if policy not in ("oracle", "wrong", "classifier", "classifier-soft"):
        policy = parse_omega(policy, tasks)
        if policy is None:
            policy = "classifier"
    classifier = _load_classifier(args.classifier) if isinstance(policy, str) and policy.startswith("classifier") else None
    seed = cfg.data.val_seed if args.seed is None else args.seed
    size = cfg.data.image_size
    samples = _eval_samples(tasks, eval_tasks, args.per_task, seed, size)
    if args.composites:
        for cname, clean, degraded, omega in composite_set(args.composites, tasks, args.per_task, seed, size):
            samples.append(DegradedSample(clean, degraded, cname, omega))
    result = evaluate(model, tasks, samples, policy, classifier)
    label = policy if isinstance(policy, str) else ",".join(f"{v:g}" for v in policy)
    print(f"config {trained}  policy {label}  images {len(samples)}")
    print(result.report.table())
    log_path = args.log or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval.jsonl")
    with open(log_path, "a") as fh:
        for rec in result.report.records(config=trained, policy=label,
                                         checkpoint=os.path.basename(args.checkpoint)):
            fh.write(rec + "\n")
    return EXIT_OK


def cmd_inspect_prompts(args) -> int:
    tensors, config = checkpoint.load(args.checkpoint)
    banks = prompt_banks(tensors)
    if not banks:
        raise UsageError(f"{args.checkpoint} holds no degradation-aware prompt tensors")
    tasks = None
    if config and "data" in config:
        tasks = config["data"].get("tasks")
    print(angle_report(banks, tasks))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    if args.corrupt_op:
        ad.CORRUPT_BACKWARD.add(args.corrupt_op)
    try:
        t0 = time.perf_counter()
        results = run_suite(seed=args.seed, verbose=True)
        elapsed = time.perf_counter() - t0
    finally:
        ad.CORRUPT_BACKWARD.discard(args.corrupt_op)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed in {elapsed:.1f}s")
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_classify(args) -> int:
    clf = _load_classifier(args.classifier)
    try:
        img = read_ppm(args.input)
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc.strerror or exc}") from None
    probs, k = clf.classify(img)
    print("omega " + " ".join(f"{w:.6f}" for w in probs))
    print("tasks " + " ".join(ALL_TASKS))
    print(f"argmax {ALL_TASKS[k]}")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    from .controller import ClassifierTrainConfig, train_classifier
    from .train import log_stderr
    cfg = ClassifierTrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                                eval_per_class=args.eval_per_class)
    _, acc = train_classifier(cfg, log=log_stderr, out_path=args.out)
    print(f"{'class':<10}{'accuracy':>10}")
    for name, value in acc.items():
        print(f"{name:<10}{value:>10.4f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_export_samples(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    tasks = [t.strip() for t in args.tasks.split(",")]
    for t in tasks:
        if t not in ALL_TASKS:
            raise UsageError(f"unknown task {t!r}; expected one of {list(ALL_TASKS)}")
    for ti, task in enumerate(tasks):
        kind = DegradationKind.parse(task)
        for i in range(args.count):
            s = make_sample([args.seed, ti, i], kind, tasks, args.size)
            write_ppm(os.path.join(args.out, f"{task}_{i:03d}_clean.ppm"), s.clean)
            write_ppm(os.path.join(args.out, f"{task}_{i:03d}_degraded.ppm"), s.degraded)
    print(f"wrote {2 * args.count * len(tasks)} images to {args.out}")
    return EXIT_OK


def cmd_census(args) -> int:
    cfg = load_config(args.config)
    print(format_census(param_census(cfg.build_model())))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipir", description="Prompt-in-prompt image restoration at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a restoration model from a JSON config")
    s.add_argument("config")
    s.add_argument("--seed", type=int, default=None, help="overrides PIP_SEED and the config seed")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("restore", help="restore one PPM image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--omega", required=True, help="task name, comma vector, or 'auto'")
    s.add_argument("--reference", default=None, help="clean PPM for PSNR/SSIM")
    s.add_argument("--classifier", default=None, help="classifier checkpoint for --omega auto")
    s.add_argument("--soft", action="store_true", help="with auto: use softmax weights instead of argmax")
    s.set_defaults(func=cmd_restore)

    s = sub.add_parser("eval", help="per-task PSNR/SSIM on held-out synthetic images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--policy", default="oracle",
                   help="oracle, wrong, classifier, classifier-soft, a task name or a comma vector")
    s.add_argument("--ablation", default=None, help="expected config letter a-e")
    s.add_argument("--tasks", default=None, help="comma list (default: the model's tasks)")
    s.add_argument("--composites", nargs="*", choices=sorted(COMPOSITES), default=None)
    s.add_argument("--per-task", type=int, default=16)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--classifier", default=None)
    s.add_argument("--log", default=None, help="JSON-lines output (default: eval.jsonl beside the checkpoint)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-prompts", help="pairwise angles between degradation-aware prompts")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_inspect_prompts)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite in wide precision")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("classify", help="predict omega for one PPM image")
    s.add_argument("--classifier", required=True)
    s.add_argument("input")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("train-classifier", help="train the degradation classifier")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eval-per-class", type=int, default=100)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("export-samples", help="write clean/degraded PPM pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", default=",".join(ALL_TASKS))
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_export_samples)

    s = sub.add_parser("census", help="parameter counts for a config")
    s.add_argument("config")
    s.set_defaults(func=cmd_census)
    return p


def main(argv=None) -> int:
    from .train import TrainingAborted
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, ad.ContractError, ad.DimensionError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except FileNotFoundError as exc:
        _err(f"{exc.filename}: no such file")
        return EXIT_USAGE
    except (TrainingAborted, ad.NonFiniteError) as exc:
        _err(str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
