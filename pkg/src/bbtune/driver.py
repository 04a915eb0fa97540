"""The tuning loop: ask, evaluate through the API, score, tell; plus the Adam baseline."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .objective import EvalBatch, LossKind, PlantedTask, World, accuracy, batch_loss
from .optimizer import CMAES, CmaConfig, adam_init, adam_step
from .protocol import (
    EvalRequest,
    Mode,
    Status,
    decode_response,
    encode_request,
    payload_sizes,
)
from .service.client import TransportError
from .subspace import Distribution, project

log = logging.getLogger(__name__)

ADAM_FLOPS_FACTOR = 3


class EvalMode(str, enum.Enum):
    SEQUENTIAL = "sequential"
    POPULATION_PARALLEL = "parallel"


class StopReason(str, enum.Enum):
    BUDGET_EXHAUSTED = "budget_exhausted"
    EARLY_STOPPED = "early_stopped"


class EvaluationError(RuntimeError):
    """The service answered, but not with logits."""


@dataclass
class TuneConfig:
    prompt_length: int = 50
    embed_dim: int = 16
    sub_dim: int = 500
    popsize: int = 20
    distribution: Distribution = Distribution.UNIFORM_FAN_IN
    loss: LossKind = LossKind.CE
    budget: int = 8000
    eval_mode: EvalMode = EvalMode.SEQUENTIAL
    early_stop_patience: int | None = 1000
    proj_seed: int = 0
    opt_seed: int = 0
    task_seed: int = 0
    model_seed: int = 0
    dev_eval: bool = True
    sigma0: float = 1.0
    bound: float = 5.0
    adam_lr: float = 1e-3

    def __post_init__(self):
        self.distribution = Distribution(self.distribution)
        self.loss = LossKind(self.loss)
        self.eval_mode = EvalMode(self.eval_mode)
        if self.budget < 0:
            raise ValueError("budget must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
        return d


class CurvePoint(NamedTuple):
    api_calls: int
    train_loss: float
    dev_acc: float
    train_acc: float


@dataclass
class TuneResult:
    best_z: np.ndarray | None
    curves: list[CurvePoint]
    stop_reason: StopReason
    wall_time: float = 0.0
    bytes_uploaded: int = 0
    bytes_downloaded: int = 0
    api_calls: int = 0
    generations: int = 0
    requests_sent: int = 0
    best_train_loss: float = math.inf
    best_train_acc: float = math.nan
    best_dev_acc: float = math.nan
    optimizer: str = "cma-es"
    cma_iteration_equivalents: int | None = None

    def summary(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "stop_reason": self.stop_reason.value,
            "api_calls": self.api_calls,
            "generations": self.generations,
            "requests_sent": self.requests_sent,
            "best_train_loss": _json_float(self.best_train_loss),
            "best_train_acc": _json_float(self.best_train_acc),
            "best_dev_acc": _json_float(self.best_dev_acc),
            "bytes_uploaded": self.bytes_uploaded,
            "bytes_downloaded": self.bytes_downloaded,
            "cma_iteration_equivalents": self.cma_iteration_equivalents,
            "wall_time": self.wall_time,
            "best_z": None if self.best_z is None else [float(v) for v in self.best_z],
        }


def _json_float(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


# -- objectives ---------------------------------------------------------------


class TaskObjective:
    """Few-shot classification behind the inference API.

    Candidates go out as subspace vectors (the server projects them) or, in
    full-prompt mode, as client-side projected prompts.
    """

    def __init__(self, transport, task: PlantedTask, num_classes: int,
                 mode: Mode = Mode.SUBSPACE_VEC, world: World | None = None):
        if mode == Mode.FULL_PROMPT and world is None:
            raise ValueError("full-prompt mode needs the projection on the client")
        self.transport = transport
        self.task = task
        self.num_classes = num_classes
        self.mode = mode
        self.world = world
        self.retries = 0
        self.bytes_uploaded = 0
        self.bytes_downloaded = 0

    has_dev = True

    def _payload(self, z: np.ndarray, batch: EvalBatch) -> bytes:
        if self.mode == Mode.SUBSPACE_VEC:
            prompt = np.asarray(z, dtype=np.float32)
        else:
            z32 = np.asarray(z, dtype=np.float32)
            prompt = project(self.world.A, z32, self.world.p0).astype(np.float32)
        req = EvalRequest(self.mode, prompt, batch, self.num_classes)
        sizes = payload_sizes(batch.size, batch.seq_len, self.num_classes, prompt.size)
        self.bytes_uploaded += sizes.upload
        self.bytes_downloaded += sizes.download
        return encode_request(req)

    def _decode(self, reply: bytes) -> np.ndarray:
        resp = decode_response(reply)
        if resp.status != Status.OK:
            raise EvaluationError(f"service returned {resp.status.name}")
        return resp.logits.astype(np.float64)

    def _send(self, payloads: list[bytes], parallel: bool) -> list[bytes]:
        for attempt in range(2):
            try:
                if parallel:
                    return self.transport.call_many(payloads)
                return [self.transport.call(p) for p in payloads]
            except TransportError:
                if attempt:
                    raise
                self.retries += 1
                log.warning("transport error, retrying once")

    def logits(self, zs, batch: EvalBatch, parallel: bool) -> list[np.ndarray]:
        if parallel:
            replies = self._send([self._payload(z, batch) for z in zs], True)
        else:
            replies = [self._send([self._payload(z, batch)], False)[0] for z in zs]
        return [self._decode(r) for r in replies]

    def train_losses(self, zs, loss: LossKind, parallel: bool):
        labels = self.task.train.labels.astype(np.intp)
        out = self.logits(zs, self.task.train, parallel)
        losses = np.array([batch_loss(loss, lg, labels) if np.all(np.isfinite(lg)) else np.nan for lg in out])
        accs = np.array([accuracy(lg, labels) for lg in out])
        return losses, accs

    def dev_accuracy(self, z) -> float:
        lg = self.logits([z], self.task.dev, False)[0]
        return accuracy(lg, self.task.dev.labels.astype(np.intp))

    def split_accuracy(self, z, split: str) -> float:
        batch = getattr(self.task, split)
        return accuracy(self.logits([z], batch, False)[0], batch.labels.astype(np.intp))


class FunctionObjective:
    """Plain scalar objective over z (benchmarks, planted quadratics)."""

    has_dev = False

    def __init__(self, fn, batch_fn=None):
        self.fn = fn
        self.batch_fn = batch_fn
        self.retries = 0
        self.bytes_uploaded = 0
        self.bytes_downloaded = 0
        self.calls = 0

    def train_losses(self, zs, loss=None, parallel=False):
        zs = np.asarray(zs)
        self.calls += 1 if parallel else len(zs)
        if self.batch_fn is not None:
            vals = np.asarray(self.batch_fn(zs), dtype=np.float64)
        else:
            vals = np.array([self.fn(z) for z in zs], dtype=np.float64)
        return vals, np.full(len(zs), np.nan)

    def dev_accuracy(self, z):
        raise NotImplementedError


# -- early stopping -------------------------------------------------------------


def early_stop_check(history, patience: int | None, now: int | None = None) -> bool:
    """True iff dev accuracy has not strictly improved within the last ``patience`` calls.

    ``history`` is a sequence of ``(api_calls, dev_acc)`` ordered by calls; the
    first record counts as an improvement. An improvement exactly ``patience``
    calls ago still keeps the run alive.
    """
    if not patience or not history:
        return False
    if now is None:
        now = history[-1][0]
    best = -math.inf
    last_improvement = history[0][0]
    for calls, acc in history:
        if acc > best:
            best = acc
            last_improvement = calls
    return now - last_improvement > patience


# -- loops --------------------------------------------------------------------


def _worst_fill(losses: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(losses)
    if not bad.any():
        return losses
    finite = losses[~bad]
    worst = finite.max() if finite.size else 0.0
    out = losses.copy()
    out[bad] = worst
    return out


def tune(config: TuneConfig, objective) -> TuneResult:
    """Run CMA-ES against ``objective`` until the budget is spent or dev accuracy stalls."""
    t0 = time.perf_counter()
    es = CMAES(CmaConfig(
        dim=config.sub_dim, popsize=config.popsize, sigma0=config.sigma0,
        seed=config.opt_seed, bounds=(-config.bound, config.bound),
    ))
    parallel = config.eval_mode is EvalMode.POPULATION_PARALLEL
    gen_cost = 1 if parallel else es.lam
    use_dev = config.dev_eval and objective.has_dev

    calls = 0
    curves: list[CurvePoint] = []
    dev_history: list[tuple[int, float]] = []
    best_z, best_loss, best_acc, best_dev = None, math.inf, math.nan, math.nan
    reason = StopReason.BUDGET_EXHAUSTED

    while calls + gen_cost <= config.budget:
        zs = es.ask()
        retries_before = objective.retries
        losses, accs = objective.train_losses(zs, config.loss, parallel)
        calls += gen_cost + (objective.retries - retries_before)
        fitness = _worst_fill(losses)
        es.tell(zs, fitness)

        i = int(np.argmin(np.where(np.isfinite(losses), losses, np.inf)))
        if np.isfinite(losses[i]) and losses[i] < best_loss:
            best_z, best_loss, best_acc = zs[i].copy(), float(losses[i]), float(accs[i])
            if use_dev and calls < config.budget:
                best_dev = objective.dev_accuracy(best_z)
                calls += 1
                dev_history.append((calls, best_dev))
        curves.append(CurvePoint(calls, best_loss, best_dev, best_acc))
        if use_dev and early_stop_check(dev_history, config.early_stop_patience, calls):
            reason = StopReason.EARLY_STOPPED
            break

    return TuneResult(
        best_z=best_z,
        curves=curves,
        stop_reason=reason,
        wall_time=time.perf_counter() - t0,
        bytes_uploaded=objective.bytes_uploaded,
        bytes_downloaded=objective.bytes_downloaded,
        api_calls=calls,
        generations=es.state.generation,
        requests_sent=getattr(getattr(objective, "transport", None), "requests", 0),
        best_train_loss=best_loss,
        best_train_acc=best_acc,
        best_dev_acc=max((a for _, a in dev_history), default=math.nan),
    )


class GradientTask:
    """Local surrogate with analytic gradients of batch CE w.r.t. z (Adam baseline only)."""

    has_dev = True

    def __init__(self, world: World, task: PlantedTask):
        self.world = world
        self.task = task
        A = np.asarray(world.A, dtype=np.float64)
        # d(prompt mean)/dz: average of the L row blocks of A
        self._dmean_dz = A.reshape(world.prompt_length, world.model.embed_dim, -1).mean(axis=0)

    def loss_and_grad(self, z) -> tuple[float, np.ndarray]:
        prompt = project(self.world.A, z, self.world.p0)
        loss, g_mean = self.world.model.ce_grad_prompt_mean(prompt, self.task.train)
        return loss, self._dmean_dz.T @ g_mean

    def loss(self, z) -> float:
        return self.loss_and_grad(z)[0]

    def accuracy_on(self, z, batch):
        lg = self.world.model.forward(project(self.world.A, z, self.world.p0), batch)
        return accuracy(lg, batch.labels.astype(np.intp))

    def train_accuracy(self, z) -> float:
        return self.accuracy_on(z, self.task.train)

    def dev_accuracy(self, z) -> float:
        return self.accuracy_on(z, self.task.dev)


class GradientFunction:
    """Wraps an objective exposing ``__call__`` and ``gradient`` (e.g. PlantedQuadratic)."""

    has_dev = False

    def __init__(self, fn):
        self.fn = fn

    def loss_and_grad(self, z):
        return float(self.fn(z)), self.fn.gradient(z)

    def train_accuracy(self, z):
        return math.nan


def adam_tune(config: TuneConfig, objective, z0=None) -> TuneResult:
    """Full-batch Adam in the subspace; one step costs one API call."""
    t0 = time.perf_counter()
    st = adam_init(np.zeros(config.sub_dim) if z0 is None else z0, lr=config.adam_lr)
    use_dev = config.dev_eval and objective.has_dev
    calls = 0
    curves: list[CurvePoint] = []
    dev_history: list[tuple[int, float]] = []
    best_z, best_loss, best_acc, best_dev = None, math.inf, math.nan, math.nan
    reason = StopReason.BUDGET_EXHAUSTED

    while calls + 1 <= config.budget:
        loss, grad = objective.loss_and_grad(st.point)
        calls += 1
        if math.isfinite(loss) and loss < best_loss:
            best_z, best_loss = st.point.copy(), loss
            best_acc = objective.train_accuracy(best_z)
            if use_dev and calls < config.budget:
                best_dev = objective.dev_accuracy(best_z)
                calls += 1
                dev_history.append((calls, best_dev))
        curves.append(CurvePoint(calls, best_loss, best_dev, best_acc))
        if use_dev and early_stop_check(dev_history, config.early_stop_patience, calls):
            reason = StopReason.EARLY_STOPPED
            break
        st = adam_step(st, grad)

    return TuneResult(
        best_z=best_z,
        curves=curves,
        stop_reason=reason,
        wall_time=time.perf_counter() - t0,
        api_calls=calls,
        generations=st.step,
        best_train_loss=best_loss,
        best_train_acc=best_acc,
        best_dev_acc=max((a for _, a in dev_history), default=math.nan),
        optimizer="adam",
        cma_iteration_equivalents=ADAM_FLOPS_FACTOR * st.step,
    )


# -- reporting ------------------------------------------------------------------

CSV_HEADER = ("api_calls", "train_loss", "dev_acc", "train_acc")


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def report(result: TuneResult, path: str | Path, config: TuneConfig | None = None) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (curves) and ``<path>.json`` (summary)."""
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    json_path = path.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for pt in result.curves:
            w.writerow([pt.api_calls, _fmt(pt.train_loss), _fmt(pt.dev_acc), _fmt(pt.train_acc)])
    summary = result.summary()
    if config is not None:
        summary["config"] = config.to_dict()
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_curves(csv_path: str | Path) -> list[CurvePoint]:
    def num(s):
        return math.nan if s == "" else float(s)

    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{csv_path}: unexpected header {rows[0]}")
    return [CurvePoint(int(r[0]), num(r[1]), num(r[2]), num(r[3])) for r in rows[1:]]
