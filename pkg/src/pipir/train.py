"""Training loop, Adam, learning-rate schedule and evaluation."""
from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import NonFiniteError, Tensor
from .backbone import UNet
from .config import ConfigError, RunConfig, TrainConfig, parse_config
from .degradations import (COMPOSITES, DegradationKind, degrade_composite, dmix, make_sample,
                           one_hot, sample_batch, synth_clean)
from .metrics import QualityReport, psnr, ssim
from .pip import pairwise_angles


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- loss and optimisation

def total_loss(pred: Tensor, target, model: UNet, alpha: float, theta_thre: float) -> Tensor:
    """Mean absolute error plus ``alpha`` times the instance-averaged decoupling loss."""
    l1 = ad.mean(ad.abs_(ad.sub(pred, ad._as_tensor(target))))
    if alpha == 0:
        return l1
    return ad.add(l1, ad.scale(model.ddl(theta_thre), alpha))


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to the peak, then one cosine decay reaching 0 at the last step."""
    peak = cfg.lr_peak * cfg.lr_scale
    warm, total = cfg.warmup_steps, cfg.total_steps
    if step < warm:
        return peak * step / warm
    if step >= total:
        return 0.0
    progress = (step - warm) / max(total - warm, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, named_params, lr: float) -> None:
        """One bias-corrected Adam step over ``named_params`` in their given order."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([self.step], dtype=np.float64)}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        self.step = int(tensors["adam.step"][0])
        self.m = {k[len("adam.m."):]: v.copy() for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in tensors.items() if k.startswith("adam.v.")}


def adam_step(named_params, state: Adam, lr: float) -> None:
    state.update(named_params, lr)


# ---------------------------------------------------------------- data helpers

def validation_set(tasks, per_task: int, seed: int, size: int) -> list:
    out = []
    for ti, task in enumerate(tasks):
        kind = DegradationKind.parse(task)
        for i in range(per_task):
            out.append(make_sample([seed, ti, i], kind, tasks, size))
    return out


def composite_set(names, tasks, per_task: int, seed: int, size: int) -> list[tuple[str, np.ndarray, np.ndarray, np.ndarray]]:
    """(name, clean, degraded, omega) with omega = mean of the component one-hots present in ``tasks``."""
    out = []
    for ci, name in enumerate(names):
        kinds = [k.task for k in COMPOSITES[name] if k.task in tasks]
        omega = np.mean([one_hot(tasks.index(k), len(tasks)) for k in kinds], axis=0) if kinds \
            else np.full(len(tasks), 1.0 / len(tasks), dtype=np.float32)
        for i in range(per_task):
            rng = np.random.default_rng([seed, 1000 + ci, i])
            clean = synth_clean(rng.integers(2**63), size, size)
            out.append((name, clean, degrade_composite(clean, name, rng.integers(2**63)), omega.astype(np.float32)))
    return out


def stack(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([s.degraded for s in batch])
    y = np.stack([s.clean for s in batch])
    w = np.stack([s.omega for s in batch])
    return x, y, w


# ---------------------------------------------------------------- training

def _model_state(model: UNet, opt: Adam, step: int, best: float) -> dict[str, np.ndarray]:
    state = {f"model.{k}": v for k, v in model.state_dict().items()}
    state.update(opt.state())
    state["state.step"] = np.array([step], dtype=np.float64)
    state["state.best_psnr"] = np.array([best], dtype=np.float64)
    return state


def load_model(path) -> tuple[UNet, RunConfig, dict[str, np.ndarray]]:
    tensors, raw = checkpoint.load(path)
    if raw is None:
        raise checkpoint.FormatError(f"{path}: checkpoint carries no run config")
    try:
        cfg = parse_config(raw)
    except ConfigError as exc:
        raise checkpoint.FormatError(f"{path}: embedded config invalid: {exc}") from None
    model = cfg.build_model()
    params = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise checkpoint.FormatError(f"{path}: checkpoint does not match its config: {exc}") from None
    return model, cfg, tensors


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def run_epoch_eval(model: UNet, cfg: RunConfig, val) -> QualityReport:
    return evaluate(model, cfg.data.tasks, val, "oracle").report


def train(cfg: RunConfig, resume: str | None = None, log=None, stop_after_epoch: int | None = None) -> dict:
    """Train the configured model; returns a summary dict.

    Writes ``last.pipc`` and ``epoch<k>.pipc`` checkpoints and the metrics
    log (``epoch task metric value`` lines) into ``cfg.paths.run_dir``.
    """
    tcfg = cfg.train
    os.makedirs(cfg.paths.run_dir, exist_ok=True)
    log_path = os.path.join(cfg.paths.run_dir, cfg.paths.log_name)
    model = cfg.build_model()
    opt = Adam(tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    start_step, best = 0, -math.inf
    if resume is not None:
        tensors, _ = checkpoint.load(resume)
        model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
        opt.load(tensors)
        start_step = int(tensors["state.step"][0])
        best = float(tensors["state.best_psnr"][0])
    mode = "a" if resume is not None else "w"
    tasks = cfg.data.tasks
    val = validation_set(tasks, cfg.data.val_per_task, cfg.data.val_seed, cfg.data.image_size)
    named = list(model.named_parameters())
    history: list[dict] = []
    with open(log_path, mode) as logf:
        if resume is None:
            logf.write(f"# config {json.dumps(cfg.to_dict(), sort_keys=True)}\n")
        epoch_losses: list[float] = []
        for step in range(start_step, tcfg.total_steps):
            batch = sample_batch([tcfg.seed, step], tasks, tcfg.batch_size, cfg.data.image_size)
            if tcfg.dmix_enabled:
                batch = dmix(batch, [tcfg.seed, step, 7])
            x, y, w = stack(batch)
            lr = lr_schedule(step + 1, tcfg)
            model.zero_grad()
            try:
                pred = model(ad.tensor(x), w)
                loss = total_loss(pred, y, model, tcfg.alpha, tcfg.theta_thre)
                ad.backward(loss)
            except NonFiniteError as exc:
                raise TrainingAborted(_diagnostics(step, lr, named, str(exc))) from None
            gnorm = _grad_norm(named)
            if not math.isfinite(gnorm):
                raise TrainingAborted(_diagnostics(step, lr, named, "non-finite gradient"))
            with np.errstate(over="ignore", invalid="ignore"):
                opt.update(named, lr)
            if not all(np.all(np.isfinite(p.data)) for _, p in named):
                raise TrainingAborted(_diagnostics(step, lr, named, "non-finite parameters after update"))
            epoch_losses.append(float(loss.data))
            if (step + 1) % tcfg.steps_per_epoch == 0:
                epoch = (step + 1) // tcfg.steps_per_epoch
                report = run_epoch_eval(model, cfg, val)
                angles = [float(_min_angle(b)) for b in model.banks()]
                rec = {"epoch": epoch, "loss": float(np.mean(epoch_losses)),
                       "psnr": report.average_psnr(), "min_angles": angles}
                history.append(rec)
                logf.write(f"{epoch} train loss {_fmt(rec['loss'])}\n")
                logf.write(f"{epoch} train lr {lr:.8e}\n")
                for task, p, s in report.rows():
                    logf.write(f"{epoch} {task} psnr {_fmt(p)}\n")
                    logf.write(f"{epoch} {task} ssim {_fmt(s)}\n")
                for i, a in enumerate(angles):
                    logf.write(f"{epoch} pip{i} min_angle {_fmt(a)}\n")
                logf.flush()
                best = max(best, rec["psnr"])
                state = _model_state(model, opt, step + 1, best)
                checkpoint.save(os.path.join(cfg.paths.run_dir, f"epoch{epoch}.pipc"), state, cfg.to_dict())
                checkpoint.save(os.path.join(cfg.paths.run_dir, "last.pipc"), state, cfg.to_dict())
                if log is not None:
                    log(f"epoch {epoch}: loss {rec['loss']:.5f} val psnr {rec['psnr']:.3f} "
                        f"min angles {[round(a, 2) for a in angles]}")
                epoch_losses = []
                if stop_after_epoch is not None and epoch >= stop_after_epoch:
                    break
    return {"model": model, "history": history, "log_path": log_path,
            "checkpoint": os.path.join(cfg.paths.run_dir, "last.pipc")}


def _min_angle(bank: np.ndarray) -> float:
    ang = pairwise_angles(bank)
    T = len(ang)
    if T < 2:
        return 180.0
    return float(ang[np.triu_indices(T, 1)].min())


def _grad_norm(named) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for _, p in named if p.grad is not None))


def _diagnostics(step: int, lr: float, named, reason: str) -> str:
    norms = []
    for name, p in named:
        if p.grad is not None:
            norms.append((name, float(np.sqrt(np.sum(p.grad.astype(np.float64) ** 2)))))
    worst = sorted(norms, key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
    return f"training aborted at step {step}: {reason}; last lr {lr:.3e}; largest grad norms {worst}"


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    report: QualityReport
    per_image_psnr: list
    tasks: list
    outputs: list | None = None


def restore(model: UNet, degraded: np.ndarray, omega: np.ndarray, batch: int = 8) -> np.ndarray:
    """Forward pass without gradient bookkeeping; output clamped to [0, 1]."""
    single = degraded.ndim == 3
    x = degraded[None] if single else degraded
    w = np.asarray(omega, dtype=np.float32)
    w = np.broadcast_to(w, (len(x), w.shape[-1])) if w.ndim == 1 else w
    outs = []
    with ad.no_grad():
        for i in range(0, len(x), batch):
            y = model(ad.tensor(x[i:i + batch]), w[i:i + batch])
            outs.append(np.clip(y.data, 0.0, 1.0))
    out = np.concatenate(outs)
    return out[0] if single else out


def policy_omega(policy, samples, tasks, classifier=None) -> np.ndarray:
    """Control weights per sample for an omega policy.

    ``policy`` is ``"oracle"``, ``"wrong"`` (cyclic label shift),
    ``"classifier"`` (hard argmax of ``classifier``), ``"classifier-soft"``
    or an explicit vector.
    """
    T = len(tasks)
    if isinstance(policy, str):
        if policy == "oracle":
            return np.stack([s.omega for s in samples])
        if policy == "wrong":
            return np.stack([np.roll(s.omega, 1) for s in samples])
        if policy in ("classifier", "classifier-soft"):
            if classifier is None:
                raise ValueError("classifier policy needs a classifier")
            hard = policy == "classifier"
            return np.stack([classifier.omega_for(s.degraded, tasks, hard=hard) for s in samples])
        raise ValueError(f"unknown omega policy {policy!r}")
    vec = np.asarray(policy, dtype=np.float32)
    if vec.shape != (T,) or np.any(vec < 0):
        raise ValueError(f"custom omega must be {T} nonnegative values")
    return np.broadcast_to(vec, (len(samples), T)).copy()


def _row_name(sample) -> str:
    # composite samples carry their composite name as the label
    return sample.label.task if isinstance(sample.label, DegradationKind) else str(sample.label)


def evaluate(model: UNet, tasks, samples, policy="oracle", classifier=None, keep_outputs=False) -> EvalResult:
    omegas = policy_omega(policy, samples, tasks, classifier)
    x = np.stack([s.degraded for s in samples])
    out = restore(model, x, omegas)
    report = QualityReport()
    per_image = []
    for s, o in zip(samples, out):
        p = psnr(o, s.clean)
        report.add(_row_name(s), p, ssim(o, s.clean))
        per_image.append(p)
    return EvalResult(report, per_image, list(tasks), list(out) if keep_outputs else None)


def degraded_report(samples) -> EvalResult:
    report = QualityReport()
    per_image = []
    for s in samples:
        p = psnr(s.degraded, s.clean)
        report.add(_row_name(s), p, ssim(s.degraded, s.clean))
        per_image.append(p)
    return EvalResult(report, per_image, [])


def log_stderr(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)
