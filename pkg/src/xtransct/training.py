"""End-to-end optimization of the reconstruction network.

Training runs in two stages. Stage 1 freezes the backbone (learning rate 0)
and trains everything else; once the running-mean training loss stops
improving, or a step cap is hit, stage 2 gives the backbone a small learning
rate. The switch is one-way.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .autodiff import Tensor, backward, ops
from .errors import ConfigurationError, ContractError, NumericError
from .model import Checkpoint, XTransCT, disassemble, group_of
from .volume import Volume

log = logging.getLogger(__name__)


def mse_loss(truth: Volume, pred: Volume) -> float:
    """Mean squared voxel difference between two volumes of equal dims."""
    a = np.asarray(getattr(truth, "values", truth), dtype=np.float64)
    b = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"mse_loss: dims {a.shape} and {b.shape} differ")
    return float(np.mean((a - b) ** 2))


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimState:
    lrs: dict = field(default_factory=lambda: {"backbone": 0.0, "rest": 1e-5})
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)  # per-parameter update count for bias correction

    def lr_for(self, group: str) -> float:
        return self.lrs.get(group, self.lrs.get("rest", 0.0))


def adam_step(params: dict, grads: dict, state: OptimState, groups: dict | None = None) -> dict:
    """Bias-corrected Adam update of the arrays in ``params``, in place.

    ``groups`` maps parameter name to a learning-rate group (default
    ``"rest"``). Parameters whose group rate is 0 are left untouched, moments
    included.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        lr = state.lr_for((groups or {}).get(name, "rest"))
        if lr == 0.0:
            continue
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        t = state.t[name] = state.t.get(name, 0) + 1
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
    return params


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


# -- configuration and schedule -------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr_stage1_rest: float = 1e-5
    lr_stage2_backbone: float = 1e-6
    lr_stage2_rest: float = 1e-5
    freeze_backbone_stage1: bool = True
    batch_size: int = 1
    max_steps: int = 5000
    eval_every: int = 100
    plateau_k: int = 10
    plateau_tol: float = 0.01
    stage2_step_cap: int | None = None
    clip_norm: float | None = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0
    validate_every: int = 0
    record_wall_time: bool = False

    def problems(self) -> list[str]:
        out = []
        for name in ("lr_stage1_rest", "lr_stage2_backbone", "lr_stage2_rest"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be > 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.max_steps < 0:
            out.append("max_steps must be >= 0")
        if self.eval_every < 1 or self.plateau_k < 1:
            out.append("eval_every and plateau_k must be >= 1")
        if not 0 <= self.plateau_tol < 1:
            out.append("plateau_tol must lie in [0, 1)")
        return out

    def validate(self) -> "TrainConfig":
        probs = self.problems()
        if probs:
            raise ConfigurationError("invalid train config:\n  " + "\n  ".join(probs))
        return self

    @property
    def step_cap(self) -> int:
        return self.stage2_step_cap if self.stage2_step_cap is not None else self.max_steps

    def stage_lrs(self, stage: int) -> dict:
        if stage == 1:
            bb = 0.0 if self.freeze_backbone_stage1 else self.lr_stage1_rest
            return {"backbone": bb, "rest": self.lr_stage1_rest}
        return {"backbone": self.lr_stage2_backbone, "rest": self.lr_stage2_rest}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {unknown}")
        return cls(**d)


def plateaued(history: Sequence[float], k: int, tol: float) -> bool:
    """True when the last ``k`` evaluations improved by less than ``tol`` (relative)."""
    if len(history) < k:
        return False
    first, last = history[-k], history[-1]
    if first <= 0:
        return True
    return (first - last) / first < tol


def two_stage_schedule(history: Sequence[float], cfg: TrainConfig, step: int = 0, stage: int = 1):
    """Active per-group learning rates and the stage flag.

    ``history`` holds one running-mean loss per evaluation. Stage 2 is entered
    when :func:`plateaued` fires or ``step`` reaches the step cap, and is never
    left again.
    """
    if stage == 1 and (plateaued(history, cfg.plateau_k, cfg.plateau_tol) or step >= cfg.step_cap):
        stage = 2
    return cfg.stage_lrs(stage), stage


# -- data -----------------------------------------------------------------------

class Sample:
    """A ground-truth volume with its two projections, rendered lazily and cached."""

    def __init__(self, name: str, volume: Volume, mask=None, projections=None, render: Callable | None = None):
        self.name = name
        self.volume = volume
        self.mask = mask
        self._projections = projections
        self._render = render
        self._lock = threading.Lock()

    def projections(self):
        with self._lock:
            if self._projections is None:
                if self._render is None:
                    raise ConfigurationError(f"sample {self.name!r} has no projections and no renderer")
                self._projections = self._render(self.volume)
            return self._projections


def prefetch(items: Iterable, fn: Callable, maxsize: int = 2) -> Iterator:
    """Yield ``(item, fn(item))`` in input order while a worker thread computes ahead.

    The bounded queue keeps at most ``maxsize`` results waiting.
    """
    q: queue.Queue = queue.Queue(maxsize)
    done = object()
    stop = threading.Event()

    def work():
        try:
            for it in items:
                if stop.is_set():
                    return
                q.put((it, fn(it)))
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
            return
        q.put(done)

    th = threading.Thread(target=work, daemon=True)
    th.start()
    try:
        while True:
            got = q.get()
            if got is done:
                break
            if isinstance(got, BaseException):
                raise got
            yield got
    finally:
        stop.set()
        # drain so a blocked producer can observe ``stop``
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.01)


# -- loop -----------------------------------------------------------------------

@dataclass
class TraceRow:
    step: int
    loss: float
    stage: int
    lr_backbone: float
    lr_rest: float
    wall_ms: float | None = None


TRACE_COLUMNS = ("step", "loss", "stage", "lr_backbone", "lr_rest", "wall_ms")


class TraceWriter:
    """Append-only CSV loss trace."""

    def __init__(self, path: str | os.PathLike):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(TRACE_COLUMNS)

    def __call__(self, row: TraceRow) -> None:
        wall = "" if row.wall_ms is None else f"{row.wall_ms:.3f}"
        self._w.writerow([row.step, repr(row.loss), row.stage, repr(row.lr_backbone), repr(row.lr_rest), wall])

    def close(self) -> None:
        self._fh.close()


def read_trace(path: str | os.PathLike) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [
            TraceRow(int(r["step"]), float(r["loss"]), int(r["stage"]), float(r["lr_backbone"]),
                     float(r["lr_rest"]), float(r["wall_ms"]) if r["wall_ms"] else None)
            for r in csv.DictReader(fh)
        ]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[TraceRow]
    history: list[float]
    validation: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def _check_finite(step: int, loss: float, grads: dict) -> None:
    bad = None
    if not math.isfinite(loss):
        bad = f"non-finite loss {loss} at step {step}"
    else:
        bad = next((f"non-finite gradient in {n} at step {step}" for n, g in grads.items()
                    if not np.isfinite(g).all()), None)
    if bad:
        exc = NumericError(bad)
        exc.step, exc.loss = step, loss
        raise exc


def loss_and_grads(model: XTransCT, sample: Sample, target_blocks: np.ndarray):
    """Forward + backward on one sample; returns (loss, {name: grad})."""
    p1, p2 = sample.projections()
    named = list(model.named_parameters())
    for _, p in named:
        p.grad = None
    pred = model(p1, p2)
    loss = ops.mse(pred, Tensor(target_blocks))
    backward(loss, params=[p for _, p in named])
    return float(loss.values), {n: p.grad for n, p in named}


def _epoch_order(n: int, rng: np.random.Generator, shuffle: bool) -> np.ndarray:
    return rng.permutation(n) if shuffle and n > 1 else np.arange(n)


def train_loop(
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    model: XTransCT,
    *,
    overfit: bool = False,
    on_trace: Callable[[TraceRow], None] | None = None,
    validation: Sequence[Sample] | None = None,
    on_validate: Callable[[int, object], bool] | None = None,
    on_checkpoint: Callable[[Checkpoint], None] | None = None,
) -> TrainResult:
    """Minimize voxel MSE over ``dataset`` with Adam and the two-stage schedule.

    ``on_validate(step, report)`` is called every ``cfg.validate_every`` steps
    with a metrics report over ``validation``; returning True stops training.
    """
    from . import metrics

    cfg.validate()
    samples = list(dataset)
    if not samples:
        raise ConfigurationError("training dataset is empty")
    if overfit:
        samples = samples[:1]
    mcfg = model.config
    for s in samples:
        if s.volume.dims != (mcfg.output_size,) * 3:
            raise ConfigurationError(
                f"sample {s.name!r} has dims {s.volume.dims}; model outputs {mcfg.output_size}^3"
            )
    targets = {id(s): disassemble(s.volume.values, mcfg.query_grid, mcfg.block).astype(model.dtype) for s in samples}

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    named = dict(model.named_parameters())
    params = {n: p.values for n, p in named.items()}
    groups = {n: ("backbone" if group_of(n) == "backbone" else "rest") for n in named}
    stage = 1
    lrs = cfg.stage_lrs(stage)
    state = OptimState(lrs=dict(lrs), beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    trace: list[TraceRow] = []
    history: list[float] = []
    window: list[float] = []
    val_log: list[dict] = []
    stopped = False

    def batches():
        while True:
            order = _epoch_order(len(samples), rng, cfg.shuffle)
            for i in order:
                yield samples[i]

    stream = prefetch(batches(), lambda s: s.projections(), maxsize=2)
    t_start = time.perf_counter()
    step = 0
    try:
        while step <= cfg.max_steps:
            t0 = time.perf_counter()
            loss_sum = 0.0
            acc: dict | None = None
            for _ in range(cfg.batch_size):
                sample, _ = next(stream)
                loss, grads = loss_and_grads(model, sample, targets[id(sample)])
                loss_sum += loss
                if acc is None:
                    acc = {n: g.copy() for n, g in grads.items()}
                else:
                    for n, g in grads.items():
                        acc[n] += g
            loss = loss_sum / cfg.batch_size
            if cfg.batch_size > 1:
                for g in acc.values():
                    g /= cfg.batch_size
            _check_finite(step, loss, acc)
            # ``step`` updates are done; the row records the stage of the next one
            window.append(loss)
            if len(window) == cfg.eval_every:
                history.append(float(np.mean(window)))
                window.clear()
            if stage == 1:
                lrs, stage = two_stage_schedule(history, cfg, step, stage)
                state.lrs = dict(lrs)
            wall = (time.perf_counter() - t0) * 1e3 if cfg.record_wall_time else None
            row = TraceRow(step, loss, stage, lrs["backbone"], lrs["rest"], wall)
            trace.append(row)
            if on_trace:
                on_trace(row)

            if cfg.validate_every and validation and step > 0 and step % cfg.validate_every == 0:
                report = metrics.evaluate(model, validation)
                agg = report.aggregate()
                val_log.append({"step": step, **{k: v["mean"] for k, v in agg.items()}})
                log.info("step %d validation %s", step, val_log[-1])
                if on_validate and on_validate(step, report):
                    stopped = True
                    break

            if step == cfg.max_steps:
                break
            if cfg.clip_norm:
                clip_global_norm({n: g for n, g in acc.items() if state.lr_for(groups[n]) > 0}, cfg.clip_norm)
            adam_step(params, acc, state, groups)
            step += 1
            if cfg.checkpoint_every and on_checkpoint and step % cfg.checkpoint_every == 0:
                on_checkpoint(Checkpoint.from_model(model, step=step, stage=stage))
    finally:
        stream.close()
    log.info("trained %d steps in %.1f s", step, time.perf_counter() - t_start)
    ckpt = Checkpoint.from_model(model, step=step, stage=stage)
    return TrainResult(ckpt, trace, history, val_log, stopped)
