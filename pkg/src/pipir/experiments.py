"""Desk-scale experiment runs with an on-disk result cache.

A run is identified by its resolved config plus a digest of the modules
that determine training numerics, so editing any of them invalidates stale
results.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np

from .config import parse_config
from .train import degraded_report, evaluate, log_stderr, train, validation_set

DESK = {
    "model": {"levels": 3, "base_channels": 8, "blocks_per_level": 1},
    "data": {"tasks": ["noise", "rain", "lowlight"], "image_size": 64, "val_per_task": 16},
    "train": {"total_epochs": 16, "steps_per_epoch": 150, "batch_size": 4, "warmup_epochs": 1},
}
HELD_OUT_SEED = 999
HELD_OUT_PER_TASK = 16


def cache_dir() -> Path:
    return Path(os.environ.get("PIPIR_CACHE", Path.home() / ".cache" / "pipir-desk"))


NUMERIC_MODULES = ("autodiff", "layers", "pip", "backbone", "degradations", "metrics", "train", "config",
                   "checkpoint")


def source_digest() -> str:
    h = hashlib.sha256()
    for name in NUMERIC_MODULES:
        path = Path(__file__).parent / f"{name}.py"
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def desk_raw(seed: int = 0, ablation: str = "e", theta_deg: float = 90.0, **train_overrides) -> dict:
    raw = copy.deepcopy(DESK)
    raw["train"].update(seed=seed, ablation=ablation, theta_thre=math.radians(theta_deg), **train_overrides)
    return raw


def run_key(raw: dict) -> str:
    blob = json.dumps({"raw": raw, "src": source_digest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _summary(model, cfg) -> dict:
    tasks = cfg.data.tasks
    held = validation_set(tasks, HELD_OUT_PER_TASK, HELD_OUT_SEED, cfg.data.image_size)
    out = {}
    for name, res in (("degraded", degraded_report(held)),
                      ("oracle", evaluate(model, tasks, held, "oracle")),
                      ("wrong", evaluate(model, tasks, held, "wrong"))):
        out[name] = {"rows": res.report.rows(), "per_image": res.per_image_psnr}
    return out


def desk_run(seed: int = 0, ablation: str = "e", theta_deg: float = 90.0, refresh: bool = False,
             log=log_stderr, **train_overrides) -> dict:
    """Train (or fetch from cache) one desk configuration and summarise it on held-out images."""
    raw = desk_raw(seed, ablation, theta_deg, **train_overrides)
    key = run_key(raw)
    root = cache_dir() / key
    result_path = root / "result.json"
    if result_path.exists() and not refresh:
        return json.loads(result_path.read_text())
    raw = {**raw, "paths": {"run_dir": str(root)}}
    cfg = parse_config(raw)
    if log is not None:
        log(f"desk run seed={seed} ablation={ablation} theta={theta_deg} -> {root}")
    t0 = time.perf_counter()
    out = train(cfg, log=log)
    elapsed = time.perf_counter() - t0
    log_bytes = Path(out["log_path"]).read_bytes()
    result = {
        "key": key, "seed": seed, "ablation": ablation, "theta_deg": theta_deg,
        "train_overrides": train_overrides,
        "steps": cfg.train.total_steps, "train_seconds": elapsed,
        "history": out["history"], "log_sha256": hashlib.sha256(log_bytes).hexdigest(),
        "checkpoint": out["checkpoint"],
        **_summary(out["model"], cfg),
    }
    result_path.write_text(json.dumps(result, indent=1))
    return result


def average_psnr(result: dict, policy: str = "oracle") -> float:
    return result[policy]["rows"][-1][1]


def per_task_psnr(result: dict, policy: str = "oracle") -> dict[str, float]:
    return {t: p for t, p, _ in result[policy]["rows"] if t != "Average"}


def desk_classifier(cfg=None, refresh: bool = False, log=log_stderr):
    """Train (or fetch from cache) the degradation classifier; returns (classifier, accuracy table)."""
    from dataclasses import asdict

    from . import controller

    cfg = cfg or controller.ClassifierTrainConfig()
    src = source_digest() + hashlib.sha256((Path(__file__).parent / "controller.py").read_bytes()).hexdigest()
    key = hashlib.sha256(json.dumps({"cfg": asdict(cfg), "src": src}, sort_keys=True).encode()).hexdigest()[:20]
    root = cache_dir() / f"classifier-{key}"
    path, acc_path = root / "classifier.pipc", root / "accuracy.json"
    if path.exists() and acc_path.exists() and not refresh:
        return controller.load_classifier(path), json.loads(acc_path.read_text())
    root.mkdir(parents=True, exist_ok=True)
    if log is not None:
        log(f"training classifier -> {root}")
    clf, acc = controller.train_classifier(cfg, log=log, out_path=str(path))
    acc_path.write_text(json.dumps(acc, indent=1))
    return clf, acc


def oracle_beats_wrong(result: dict) -> float:
    o = np.array(result["oracle"]["per_image"])
    w = np.array(result["wrong"]["per_image"])
    return float(np.mean(o > w))
