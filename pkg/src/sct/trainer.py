"""Training loop: forward, loss, backward, AdamW, then QR retraction of every spectral layer."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from sct.data import DataConfig, make_batches
from sct.errors import ConfigError, NumericError
from sct.memory import sweep_table
from sct.model import Batch, ModelConfig, backward, build_model, forward_loss, save_checkpoint
from sct.numerics import random_orthonormal
from sct.optim import AdamW, OptimConfig, default_group_configs
from sct.retraction import OrthoReport, RetractionError, repair_degenerate, retract_layer
from sct.spectral import SpectralFactors, spectral_backward, spectral_forward

log = logging.getLogger(__name__)

SMOOTHING_WINDOW = 50
METRIC_COLUMNS = (
    "step",
    "loss",
    "smoothed_loss",
    "ppl",
    "step_s",
    "fwd_s",
    "bwd_s",
    "opt_s",
    "retract_s",
    "max_ortho_err",
)
TIMING_COLUMNS = ("step_s", "fwd_s", "bwd_s", "opt_s", "retract_s")
FD_STEP = 1e-6
# entries whose gradient is this far below the tensor's largest entry are
# compared on the tensor's scale instead of their own
REL_FLOOR = 1e-3


@dataclass
class TrainMetrics:
    step: int
    loss: float
    smoothed_loss: float
    ppl: float
    step_seconds: float
    phase_seconds: Dict[str, float]
    max_ortho_err: float
    reports: List[OrthoReport] = field(default_factory=list, repr=False)

    def row(self, timing=True):
        t = (lambda x: repr(x)) if timing else (lambda x: "")
        return {
            "step": self.step,
            "loss": repr(self.loss),
            "smoothed_loss": repr(self.smoothed_loss),
            "ppl": repr(self.ppl),
            "step_s": t(self.step_seconds),
            "fwd_s": t(self.phase_seconds["forward"]),
            "bwd_s": t(self.phase_seconds["backward"]),
            "opt_s": t(self.phase_seconds["optimizer"]),
            "retract_s": t(self.phase_seconds["retraction"]),
            "max_ortho_err": repr(self.max_ortho_err),
        }


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: Dict[str, OptimConfig] = field(default_factory=default_group_configs)
    schedule: str = "constant"
    steps: int = 100
    batch_size: int = 4
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    metrics_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    ortho_path: Optional[str] = None
    record_timing: bool = True
    base_dir: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"run.steps must be an integer >= 1, got {self.steps!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"run.batch_size must be an integer >= 1, got {self.batch_size!r}")


def smoothed(series, window=SMOOTHING_WINDOW):
    """Trailing mean over the last ``window`` values (the whole prefix when shorter)."""
    series = list(series)
    return [smoothed_at(series[: i + 1], window) for i in range(len(series))]


def smoothed_at(series, window=SMOOTHING_WINDOW):
    tail = series[-window:]
    return math.fsum(tail) / len(tail)


class Trainer:
    """Owns the model, optimizer and retraction bookkeeping for one run."""

    def __init__(self, model, optimizer, seed=0):
        self.model = model
        self.optimizer = optimizer
        self.losses: List[float] = []
        self.repairs = 0
        self._repair_seed = np.random.SeedSequence(seed).spawn(1)[0]

    def retract_all(self, step):
        reports = []
        for layer in self.model.spectral_layers():
            while True:
                try:
                    reports.append(retract_layer(layer.factors, layer.name, step))
                    break
                except RetractionError as exc:
                    mat = getattr(layer.factors, exc.factor)
                    seed = self._repair_seed.spawn(1)[0]
                    fixed, count = repair_degenerate(mat, exc.column, seed)
                    mat[...] = fixed
                    self.repairs += count
                    log.warning(
                        "step %d: %s.%s column %d was degenerate; replaced (%d repairs so far)",
                        step, layer.name, exc.factor, exc.column, self.repairs,
                    )
        return reports

    def step(self, batch: Batch):
        return train_step(self.model, self.optimizer, batch, trainer=self)


def train_step(model, optimizer, batch: Batch, trainer: Optional[Trainer] = None):
    """One step: forward, loss, backward, AdamW on all groups, retract u and v.

    ``trainer`` carries the loss history used for smoothing; without it the
    smoothed loss is the step loss.
    """
    step = optimizer.steps_taken + 1
    t0 = time.perf_counter()
    model.zero_grad()
    try:
        loss, _ = forward_loss(model, batch)
    except NumericError as exc:
        raise NumericError(f"step {step}: {exc}", exc.diagnostics) from exc
    t1 = time.perf_counter()
    backward(model)
    t2 = time.perf_counter()
    try:
        optimizer.step()
    except NumericError as exc:
        raise NumericError(f"step {step}: {exc}") from exc
    t3 = time.perf_counter()
    if trainer is not None:
        reports = trainer.retract_all(step)
    else:
        reports = [retract_layer(layer.factors, layer.name, step) for layer in model.spectral_layers()]
    t4 = time.perf_counter()

    history = trainer.losses if trainer is not None else []
    history.append(loss)
    smooth = smoothed_at(history) if history else loss
    errs = [max(r.err_u, r.err_v) for r in reports]
    metrics = TrainMetrics(
        step=step,
        loss=loss,
        smoothed_loss=smooth,
        ppl=math.exp(smooth),
        step_seconds=t4 - t0,
        phase_seconds={"forward": t1 - t0, "backward": t2 - t1, "optimizer": t3 - t2, "retraction": t4 - t3},
        max_ortho_err=max(errs) if errs else 0.0,
        reports=reports,
    )
    return metrics


@dataclass
class RunResult:
    metrics: List[TrainMetrics]
    model: object
    trainer: Trainer
    checkpoint: Optional[Path] = None

    @property
    def losses(self):
        return [m.loss for m in self.metrics]

    @property
    def final_smoothed_loss(self):
        return self.metrics[-1].smoothed_loss

    @property
    def mean_step_seconds(self):
        return float(np.mean([m.step_seconds for m in self.metrics]))

    def state_bytes(self):
        """Bytes of parameters + gradients + both Adam moments actually held."""
        params = self.model.parameters()
        return (
            sum(p.data.nbytes + p.grad.nbytes for p in params)
            + self.trainer.optimizer.state_bytes()
        )


def _resolve(path, base_dir):
    if path is None:
        return None
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    return p


def build_trainer(cfg: RunConfig):
    model = build_model(cfg.model)
    optimizer = AdamW(model.parameters(), cfg.optim, schedule=cfg.schedule, total_steps=cfg.steps)
    return Trainer(model, optimizer, seed=cfg.seed)


class Run:
    """One training run advanced a step at a time; owns its output files.

    ``train_run`` drives a single Run to completion. The rank sweep steps
    several Runs round-robin so host-load drift hits every rank alike.
    """

    def __init__(self, cfg: RunConfig, progress=None):
        self.cfg = cfg
        self.progress = progress
        self.trainer = build_trainer(cfg)
        mc = cfg.model
        self.batches = make_batches(cfg.data, mc.vocab, mc.seq_len, cfg.batch_size, cfg.seed, cfg.base_dir)
        self.history: List[TrainMetrics] = []
        self._files = []
        self._mw = self._ow = None
        try:
            metrics_path = _resolve(cfg.metrics_path, cfg.base_dir)
            if metrics_path is not None:
                self._mw = csv.DictWriter(self._open(metrics_path), fieldnames=METRIC_COLUMNS, lineterminator="\n")
                self._mw.writeheader()
            ortho_path = _resolve(cfg.ortho_path, cfg.base_dir)
            if ortho_path is not None:
                self._ow = csv.writer(self._open(ortho_path), lineterminator="\n")
                self._ow.writerow(["step", "layer", "err_u", "err_v"])
        except BaseException:
            self.close()
            raise

    def _open(self, path):
        path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(path, "w", newline="", encoding="utf-8")
        self._files.append(fh)
        return fh

    @property
    def done(self):
        return len(self.history) >= self.cfg.steps

    def step(self):
        m = self.trainer.step(next(self.batches))
        self.history.append(m)
        if self._mw is not None:
            self._mw.writerow(m.row(self.cfg.record_timing))
        if self._ow is not None:
            for r in m.reports:
                self._ow.writerow([r.timestamp_step, r.layer_id, repr(r.err_u), repr(r.err_v)])
        if self.progress is not None:
            self.progress(m)
        return m

    def close(self):
        for fh in self._files:
            fh.close()
        self._files = []

    def finish(self) -> RunResult:
        self.close()
        cfg = self.cfg
        ckpt = _resolve(cfg.checkpoint_path, cfg.base_dir)
        if ckpt is not None:
            ckpt = save_checkpoint(self.trainer.model, ckpt, extra={"steps": cfg.steps, "seed": cfg.seed})
        return RunResult(self.history, self.trainer.model, self.trainer, ckpt)


def train_run(cfg: RunConfig, progress=None) -> RunResult:
    """Run ``cfg.steps`` steps, streaming one metrics row per step, then checkpoint."""
    run = Run(cfg, progress)
    try:
        while not run.done:
            run.step()
    finally:
        run.close()
    return run.finish()


# ---------------------------------------------------------------- grad check


def relative_error(analytic, numeric):
    """Entrywise |a - fd| / max(|a|, |fd|, REL_FLOOR * max over the tensor)."""
    a = np.abs(analytic)
    f = np.abs(numeric)
    scale = max(float(a.max(initial=0.0)), float(f.max(initial=0.0)))
    if scale == 0.0:
        return np.zeros_like(a)
    denom = np.maximum(np.maximum(a, f), REL_FLOOR * scale)
    return np.abs(analytic - numeric) / denom


def central_difference(loss_fn, arr, step=FD_STEP):
    """Central-difference gradient of ``loss_fn()`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = loss_fn()
        flat[i] = orig - step
        minus = loss_fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: Dict[str, float] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)
    trials: int = 0

    @property
    def passed(self):
        return not self.failures

    def record(self, cls, rel, label):
        worst = float(rel.max(initial=0.0))
        self.max_rel_err[cls] = max(self.max_rel_err.get(cls, 0.0), worst)
        if worst > self.tol:
            idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
            self.failures.append(f"{label}: {cls}{list(map(int, idx))} rel err {worst:.3e} > {self.tol:.1e}")


def layer_grad_trial(rng, report, label, max_dim=16, max_batch=4):
    """Check one random SpectralLinear against central differences of sum(y * c)."""
    m = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(1, max_dim + 1))
    k = int(rng.integers(1, min(m, n) + 1))
    b = int(rng.integers(1, max_batch + 1))
    with_bias = bool(rng.integers(0, 2))
    f = SpectralFactors(
        u=random_orthonormal(m, k, rng.integers(2**32)),
        s=rng.standard_normal(k),
        v=random_orthonormal(n, k, rng.integers(2**32)),
        bias=rng.standard_normal(n) if with_bias else None,
    )
    x = rng.standard_normal((b, m))
    c = rng.standard_normal((b, n))
    _, cache = spectral_forward(f, x)
    g = spectral_backward(f, cache, c)
    loss = lambda: float(np.sum(spectral_forward(f, x)[0] * c))
    pairs = [("u", f.u, g.du), ("s", f.s, g.ds), ("v", f.v, g.dv), ("x", x, g.dx)]
    if with_bias:
        pairs.append(("bias", f.bias, g.dbias))
    for cls, arr, analytic in pairs:
        report.record(cls, relative_error(analytic, central_difference(loss, arr)), f"{label} ({m}x{n}, k={k}, b={b})")


def model_grad_check(model_cfg: ModelConfig, report, label, batch_size=2, seed=0):
    """Check every parameter of a small model against central differences of the CE loss."""
    model = build_model(model_cfg)
    rng = np.random.default_rng(seed)
    shape = (batch_size, model_cfg.seq_len)
    batch = Batch(rng.integers(0, model_cfg.vocab, shape), rng.integers(0, model_cfg.vocab, shape))
    model.zero_grad()
    forward_loss(model, batch)
    backward(model)
    loss = lambda: forward_loss(model, batch)[0]
    for p in model.parameters():
        analytic = p.grad.copy()
        report.record(p.kind, relative_error(analytic, central_difference(loss, p.data)), f"{label}:{p.name}")


def default_check_model(**overrides):
    base = dict(
        n_layers=1, d_model=8, d_ffn=16, vocab=16, seq_len=4, mlp_rank=4, attn_rank=4,
        attention_mode="causal_softmax", precision="float64", init_std=0.3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def grad_check(model_cfg: Optional[ModelConfig] = None, trials=100, tol=1e-5, seed=0, model_trials=2):
    """Analytic vs central-difference gradients, reported per parameter class.

    Runs ``trials`` random SpectralLinear shapes (m, n <= 16, b <= 4), then
    ``model_trials`` end-to-end checks of ``model_cfg`` (spectral MLP) plus a
    dense-MLP control model that validates the harness itself.
    """
    if trials < 1:
        raise ConfigError("grad_check needs trials >= 1")
    model_cfg = model_cfg or default_check_model()
    if model_cfg.precision != "float64":
        raise ConfigError("grad_check runs in float64 only")
    report = GradCheckReport(tol=tol)
    rng = np.random.default_rng(seed)
    for t in range(trials):
        layer_grad_trial(rng, report, f"trial {t}")
        report.trials += 1
    for t in range(model_trials):
        model_grad_check(replace(model_cfg, seed=model_cfg.seed + t), report, f"model {t}", seed=seed + t)
    control = replace(model_cfg, mlp_mode="dense", attention_param_mode="dense")
    control_report = GradCheckReport(tol=tol)
    model_grad_check(control, control_report, "dense control", seed=seed)
    for cls, err in control_report.max_rel_err.items():
        report.max_rel_err[f"control/{cls}"] = err
    report.failures.extend(control_report.failures)
    return report


# ---------------------------------------------------------------- rank sweep

SWEEP_COLUMNS = ("rank", "params", "mlp_compression", "final_smoothed_loss", "ppl", "mean_step_s", "est_state_bytes", "status")


@dataclass
class SweepResult:
    rank: int
    params: int
    mlp_compression: float
    final_smoothed_loss: float
    ppl: float
    mean_step_s: float
    est_state_bytes: int
    first_smoothed_loss: float = float("nan")
    status: str = "ok"
    losses: List[float] = field(default_factory=list)

    def row(self):
        return {
            "rank": self.rank,
            "params": self.params,
            "mlp_compression": repr(self.mlp_compression),
            "final_smoothed_loss": repr(self.final_smoothed_loss),
            "ppl": repr(self.ppl),
            "mean_step_s": repr(self.mean_step_s),
            "est_state_bytes": self.est_state_bytes,
            "status": self.status,
        }


def _failed(k, plan, exc):
    log.error("rank %d failed: %s", k, exc)
    nan = float("nan")
    params, comp, est = (plan.params, plan.mlp_compression, plan.est_state_bytes) if plan else (0, nan, 0)
    return SweepResult(k, params, comp, nan, nan, nan, est, status=f"error: {exc}")


def rank_sweep(cfg: RunConfig, ranks, out_dir=None, progress=None):
    """Train one run per rank on identical data and seed; write summary + loss curves.

    The runs are stepped round-robin (one step of each rank in turn) so that
    slow periods on the host inflate every rank's step times equally. Each run
    has its own model, optimizer and batch stream, so losses match sequential
    runs exactly.
    """
    ranks = list(ranks)
    if len(ranks) < 2:
        raise ConfigError("rank_sweep needs at least two ranks")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    elem = np.dtype(cfg.model.dtype).itemsize
    plans, runs, results = {}, {}, {}
    for k in ranks:
        plans[k] = None
        try:
            (plans[k],) = sweep_table(cfg.model, [k], elem_size=elem)
            run_cfg = replace(
                cfg,
                model=replace(cfg.model, mlp_rank=k, attn_rank=k),
                metrics_path=None if out_dir is None else str(out_dir / f"metrics_rank{k}.csv"),
                checkpoint_path=None,
                ortho_path=None,
            )
            runs[k] = Run(run_cfg, progress)
        except Exception as exc:  # one failed rank must not sink the sweep
            results[k] = _failed(k, plans[k], exc)
    try:
        while runs:
            for k in list(runs):
                try:
                    runs[k].step()
                    if runs[k].done:
                        results[k] = _summarize(k, plans[k], runs.pop(k).finish())
                except Exception as exc:
                    runs.pop(k).close()
                    results[k] = _failed(k, plans[k], exc)
    finally:
        for run in runs.values():
            run.close()
    ordered = [results[k] for k in ranks]
    if out_dir is not None:
        write_sweep(ordered, out_dir)
    return ordered


def _summarize(k, plan, res: RunResult):
    losses = res.losses
    smooth = smoothed(losses)
    return SweepResult(
        rank=k,
        params=res.model.param_count(),
        mlp_compression=plan.mlp_compression,
        final_smoothed_loss=smooth[-1],
        ppl=math.exp(smooth[-1]),
        mean_step_s=res.mean_step_seconds,
        est_state_bytes=plan.est_state_bytes,
        first_smoothed_loss=smooth[0],
        losses=losses,
    )


def write_sweep(results, out_dir):
    out_dir = Path(out_dir)
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.row())
    for r in results:
        with open(out_dir / f"loss_rank{r.rank}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "smoothed_loss"])
            for i, (loss, sm) in enumerate(zip(r.losses, smoothed(r.losses)), start=1):
                w.writerow([i, repr(loss), repr(sm)])
