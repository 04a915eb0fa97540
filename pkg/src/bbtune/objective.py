"""Losses over label-word logits, a toy masked-LM surrogate, and planted tasks."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .subspace import (
    Distribution,
    PromptBase,
    PromptSource,
    ProjectionSpec,
    make_projection,
    make_prompt_base,
    project,
)

__all__ = [
    "EvalBatch",
    "LossKind",
    "PlantedQuadratic",
    "PlantedTask",
    "SurrogateModel",
    "TaskFile",
    "accuracy",
    "batch_loss",
    "cross_entropy",
    "hinge",
    "neg_accuracy",
    "plant_task",
    "read_task_file",
    "rosenbrock",
    "sphere",
    "surrogate_forward",
    "write_task_file",
]

HINGE_MARGIN = 2.0
TASK_MAGIC = b"BBTK"


class LossKind(str, enum.Enum):
    CE = "ce"
    HINGE = "hinge"
    NEG_ACC = "acc"


def _check_label(logits, label):
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")


def cross_entropy(logits_row, label: int) -> float:
    y = np.asarray(logits_row, dtype=np.float64)
    _check_label(y, label)
    return float(_ce_rows(y[None, :], np.array([label]))[0])


def hinge(logits_row, label: int, margin: float = HINGE_MARGIN) -> float:
    y = np.asarray(logits_row, dtype=np.float64)
    _check_label(y, label)
    terms = np.maximum(0.0, margin + y - y[label])
    terms[label] = 0.0
    return float(terms.sum())


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("logits and labels disagree on batch size")
    # np.argmax returns the first maximal index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def neg_accuracy(logits, labels) -> float:
    return -accuracy(logits, labels)


def _ce_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # log-sum-exp taken relative to the label logit; log1p keeps tiny losses
    # positive when the label already wins by a wide margin
    rows = np.arange(logits.shape[0])
    rel = logits - logits[rows, labels][:, None]
    top = rel.max(axis=1)
    others = np.exp(rel - top[:, None])
    others[rows, labels] = 0.0
    own = np.exp(-top)
    return np.where(top > 0, top + np.log(own + others.sum(axis=1)),
                    np.log1p(others.sum(axis=1) * np.exp(top)))


def _row_losses(kind: LossKind, logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError("label out of range")
    rows = np.arange(logits.shape[0])
    if kind is LossKind.CE:
        return _ce_rows(logits, labels)
    terms = np.maximum(0.0, HINGE_MARGIN + logits - logits[rows, labels][:, None])
    terms[rows, labels] = 0.0
    return terms.sum(axis=1)


def batch_loss(kind, logits, labels) -> float:
    """Mean of per-row CE or hinge losses; negative accuracy for ``acc``."""
    kind = LossKind(kind)
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError("logits must be (B, K) with B matching labels")
    if kind is LossKind.NEG_ACC:
        return neg_accuracy(logits, labels)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    return float(np.mean(_row_losses(kind, logits, labels)))


@dataclass(frozen=True, eq=False)
class EvalBatch:
    input_ids: np.ndarray  # (B, S) uint16
    attention_mask: np.ndarray  # (B, S) uint8
    mask_pos: np.ndarray  # (B,) uint16
    labels: np.ndarray  # (B,) uint8

    def __post_init__(self):
        ids = np.asarray(self.input_ids, dtype=np.uint16)
        mask = np.asarray(self.attention_mask, dtype=np.uint8)
        pos = np.asarray(self.mask_pos, dtype=np.uint16)
        labels = np.asarray(self.labels, dtype=np.uint8)
        if ids.ndim != 2 or mask.shape != ids.shape:
            raise ValueError("input_ids and attention_mask must be equal (B, S) matrices")
        if pos.shape != (ids.shape[0],) or labels.shape != (ids.shape[0],):
            raise ValueError("mask_pos and labels must have length B")
        if np.any(mask > 1):
            raise ValueError("attention_mask must be 0/1")
        if ids.shape[0] and np.any(pos >= ids.shape[1]):
            raise ValueError("mask position outside the sequence")
        object.__setattr__(self, "input_ids", ids)
        object.__setattr__(self, "attention_mask", mask)
        object.__setattr__(self, "mask_pos", pos)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.input_ids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EvalBatch):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("input_ids", "attention_mask", "mask_pos", "labels")
        )


class SurrogateModel:
    """Embedding table, masked mean pooling and a two-layer tanh MLP.

    The pooled input tokens are concatenated with the mean of the L prompt
    position vectors, so ``h = tanh(Wx x_bar + Wp p_bar + b1)`` and
    ``logits = W2 h + b2``. Weights are fixed by ``seed``.
    """

    def __init__(self, vocab_embeddings, w_in, b_in, w_out, b_out, seed=0):
        self.vocab_embeddings = np.asarray(vocab_embeddings, dtype=np.float32)
        self.w_in = np.asarray(w_in, dtype=np.float64)
        self.b_in = np.asarray(b_in, dtype=np.float64)
        self.w_out = np.asarray(w_out, dtype=np.float64)
        self.b_out = np.asarray(b_out, dtype=np.float64)
        self.seed = seed
        e = self.embed_dim
        self._w_tokens = self.w_in[:, :e]
        self._w_prompt = self.w_in[:, e:]

    @classmethod
    def create(cls, seed: int = 0, vocab_size: int = 2000, embed_dim: int = 16,
               hidden: int = 4, num_classes: int = 2,
               token_gain: float = 6.0, prompt_gain: float = 2.0, out_gain: float = 16.0):
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((vocab_size, embed_dim)).astype(np.float32)
        w_tok = rng.standard_normal((hidden, embed_dim)) * token_gain / math.sqrt(embed_dim)
        w_prm = rng.standard_normal((hidden, embed_dim)) * prompt_gain / math.sqrt(embed_dim)
        b_in = rng.standard_normal(hidden) * 0.1
        w_out = rng.standard_normal((num_classes, hidden)) * out_gain / math.sqrt(hidden)
        b_out = np.zeros(num_classes)
        return cls(table, np.hstack([w_tok, w_prm]), b_in, w_out, b_out, seed)

    @property
    def vocab_size(self) -> int:
        return self.vocab_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.vocab_embeddings.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w_out.shape[0]

    def pooled_tokens(self, batch: EvalBatch) -> np.ndarray:
        if np.any(batch.input_ids >= self.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {self.vocab_size}")
        mask = batch.attention_mask.astype(np.float64)
        counts = mask.sum(axis=1)
        if batch.size == 0 or np.any(counts == 0):
            raise ValueError("every sample needs at least one attended token")
        emb = self.vocab_embeddings[batch.input_ids].astype(np.float64)
        return np.einsum("bs,bse->be", mask, emb) / counts[:, None]

    def prompt_mean(self, prompts) -> np.ndarray:
        p = np.asarray(prompts, dtype=np.float64)
        e = self.embed_dim
        if p.shape[-1] % e:
            raise ValueError(f"prompt length {p.shape[-1]} is not a multiple of embed_dim {e}")
        return p.reshape(*p.shape[:-1], -1, e).mean(axis=-2)

    def forward_many(self, prompts, batch: EvalBatch) -> np.ndarray:
        """Logits ``(n, B, K)`` for ``n`` prompts on one batch."""
        x_part = self.pooled_tokens(batch) @ self._w_tokens.T
        p_part = self.prompt_mean(np.atleast_2d(prompts)) @ self._w_prompt.T
        hidden = np.tanh(x_part[None, :, :] + p_part[:, None, :] + self.b_in)
        return hidden @ self.w_out.T + self.b_out

    def forward(self, prompt, batch: EvalBatch) -> np.ndarray:
        prompt = np.asarray(prompt, dtype=np.float64)
        if prompt.ndim != 1:
            raise ValueError("forward takes a single prompt vector")
        return self.forward_many(prompt[None, :], batch)[0]

    def ce_grad_prompt_mean(self, prompt, batch: EvalBatch) -> tuple[float, np.ndarray]:
        """Mean batch cross entropy and its gradient w.r.t. the prompt mean vector."""
        x_part = self.pooled_tokens(batch) @ self._w_tokens.T
        p_bar = self.prompt_mean(prompt)
        hidden = np.tanh(x_part + p_bar @ self._w_prompt.T + self.b_in)
        logits = hidden @ self.w_out.T + self.b_out
        labels = batch.labels.astype(np.intp)
        loss = float(np.mean(_row_losses(LossKind.CE, logits, labels)))
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(batch.size), labels] -= 1.0
        d_hidden = (probs @ self.w_out) * (1.0 - hidden**2)
        grad = d_hidden.sum(axis=0) @ self._w_prompt / batch.size
        return loss, grad


def surrogate_forward(model: SurrogateModel, prompt, batch: EvalBatch) -> np.ndarray:
    return model.forward(prompt, batch)


def sphere(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(z @ z)


def rosenbrock(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(np.sum(100.0 * (z[1:] - z[:-1] ** 2) ** 2 + (1.0 - z[:-1]) ** 2))


class PlantedQuadratic:
    """``g(z) = ||A z + p0 - (A z* + p0)||^2``, minimal (zero) at ``z = z*``.

    ``p0`` cancels, so ``g(z) = r^T (A^T A) r`` with ``r = z - z*``. When the
    prompt is much longer than the subspace the Gram matrix is formed once and
    evaluations cost ``O(d^2)`` instead of ``O(D d)``.
    """

    def __init__(self, A: np.ndarray, z_star, p0, gram: bool | None = None):
        self.A = np.asarray(A, dtype=np.float64)
        self.z_star = np.asarray(z_star, dtype=np.float64)
        self.p0 = p0
        self.target = project(self.A, self.z_star, p0)
        D, d = self.A.shape
        if gram is None:
            gram = D >= 4 * d
        self.gram = self.A.T @ self.A if gram else None

    def __call__(self, z) -> float:
        return float(self.batch(np.asarray(z)[None, :])[0])

    def batch(self, zs) -> np.ndarray:
        zs = np.asarray(zs, dtype=np.float64)
        if self.gram is not None:
            r = zs - self.z_star
            return np.einsum("nd,nd->n", r @ self.gram, r)
        r = project(self.A, zs, self.p0) - self.target
        return np.einsum("nd,nd->n", r, r)

    def gradient(self, z) -> np.ndarray:
        if self.gram is not None:
            return 2.0 * (self.gram @ (np.asarray(z, dtype=np.float64) - self.z_star))
        r = project(self.A, z, self.p0) - self.target
        return 2.0 * (self.A.T @ r)


@dataclass(frozen=True, eq=False)
class PlantedTask:
    train: EvalBatch
    dev: EvalBatch
    test: EvalBatch
    teacher_z: np.ndarray
    spec: ProjectionSpec
    p0: PromptBase
    shots: int
    num_classes: int
    vocab_size: int

    @property
    def seq_len(self) -> int:
        return self.train.seq_len


def _random_sequences(rng, n, seq_len, vocab_size):
    lengths = rng.integers(max(2, seq_len // 2), seq_len + 1, size=n)
    ids = rng.integers(1, vocab_size, size=(n, seq_len))
    cols = np.arange(seq_len)
    mask = (cols[None, :] < lengths[:, None]).astype(np.uint8)
    ids = np.where(mask == 1, ids, 0)
    return ids.astype(np.uint16), mask, (lengths - 1).astype(np.uint16)


def plant_task(seed: int, shots: int, num_classes: int, spec: ProjectionSpec,
               seq_len: int, vocab_size: int, model: SurrogateModel, p0: PromptBase,
               test_per_class: int = 64, min_margin: float = 0.1,
               max_draws: int = 10**6) -> PlantedTask:
    """Sample a class-balanced k-shot task labeled by a hidden teacher prompt.

    The teacher vector is uniform in ``[-4, 4]^d``; sequences whose teacher
    top-1/top-2 logit gap is below ``min_margin`` are redrawn.
    """
    if shots < 1 or num_classes < 2:
        raise ValueError("need shots >= 1 and at least two classes")
    if model.num_classes != num_classes or model.vocab_size < vocab_size:
        raise ValueError("model does not match the requested task shape")
    rng = np.random.default_rng(seed)
    teacher_z = rng.uniform(-4.0, 4.0, size=spec.sub_dim)
    A = make_projection(spec)
    teacher_prompt = project(A, teacher_z, p0)
    need = 2 * shots + test_per_class
    buckets: list[list[tuple]] = [[] for _ in range(num_classes)]
    drawn = 0
    chunk = 256
    while any(len(b) < need for b in buckets):
        if drawn >= max_draws:
            raise RuntimeError(
                f"could not fill all classes after {drawn} draws; degenerate model seed?"
            )
        ids, mask, pos = _random_sequences(rng, chunk, seq_len, vocab_size)
        drawn += chunk
        probe = EvalBatch(ids, mask, pos, np.zeros(chunk, dtype=np.uint8))
        logits = model.forward(teacher_prompt, probe)
        top2 = np.sort(logits, axis=1)[:, -2:]
        labels = np.argmax(logits, axis=1)
        for i in np.flatnonzero(top2[:, 1] - top2[:, 0] >= min_margin):
            bucket = buckets[labels[i]]
            if len(bucket) < need:
                bucket.append((ids[i], mask[i], pos[i]))

    def split(lo, hi):
        rows = [(c, r) for c in range(num_classes) for r in buckets[c][lo:hi]]
        order = rng.permutation(len(rows))
        rows = [rows[i] for i in order]
        return EvalBatch(
            np.stack([r[0] for _, r in rows]),
            np.stack([r[1] for _, r in rows]),
            np.array([r[2] for _, r in rows]),
            np.array([c for c, _ in rows]),
        )

    return PlantedTask(
        train=split(0, shots),
        dev=split(shots, 2 * shots),
        test=split(2 * shots, need),
        teacher_z=teacher_z.astype(np.float32).astype(np.float64),
        spec=spec,
        p0=p0,
        shots=shots,
        num_classes=num_classes,
        vocab_size=vocab_size,
    )


@dataclass(frozen=True, eq=False)
class TaskFile:
    """Raw contents of a task file; seeds for model and projection travel separately."""

    shots: int
    num_classes: int
    seq_len: int
    vocab_size: int
    sub_dim: int
    full_dim: int
    teacher_z: np.ndarray
    train: EvalBatch
    dev: EvalBatch
    test: EvalBatch


def write_task_file(task: PlantedTask, path: str | Path) -> None:
    header = struct.pack(
        "<4s6I", TASK_MAGIC, task.shots, task.num_classes, task.seq_len,
        task.vocab_size, task.spec.sub_dim, task.spec.full_dim,
    )
    parts = [header, np.asarray(task.teacher_z, dtype="<f4").tobytes()]
    for b in (task.train, task.dev, task.test):
        parts += [
            struct.pack("<I", b.size),
            b.input_ids.astype("<u2").tobytes(),
            b.attention_mask.astype("u1").tobytes(),
            b.labels.astype("u1").tobytes(),
            b.mask_pos.astype("<u2").tobytes(),
        ]
    Path(path).write_bytes(b"".join(parts))


def read_task_file(path: str | Path) -> TaskFile:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4s6I")
    if len(data) < head or data[:4] != TASK_MAGIC:
        raise ValueError(f"{path}: not a task file")
    _, k, K, S, V, d, D = struct.unpack_from("<4s6I", data, 0)
    off = head

    def take(n, dtype):
        nonlocal off
        size = n * np.dtype(dtype).itemsize
        if off + size > len(data):
            raise ValueError(f"{path}: truncated task file")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
        off += size
        return arr

    teacher_z = take(d, "<f4").astype(np.float64)
    splits = []
    for _ in range(3):
        (B,) = take(1, "<u4")
        B = int(B)
        ids = take(B * S, "<u2").reshape(B, S)
        mask = take(B * S, "u1").reshape(B, S)
        labels = take(B, "u1")
        pos = take(B, "<u2")
        splits.append(EvalBatch(ids, mask, pos, labels))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return TaskFile(k, K, S, V, d, D, teacher_z, *splits)


def rebuild_task(tf: TaskFile, spec: ProjectionSpec, p0: PromptBase) -> PlantedTask:
    if spec.sub_dim != tf.sub_dim or spec.full_dim != tf.full_dim:
        raise ValueError("projection does not match the task file dimensions")
    return PlantedTask(tf.train, tf.dev, tf.test, tf.teacher_z, spec, p0,
                       tf.shots, tf.num_classes, tf.vocab_size)


@dataclass(frozen=True, eq=False)
class World:
    """Everything client and server must agree on, regenerated from seeds."""

    model: SurrogateModel
    spec: ProjectionSpec
    A: np.ndarray
    p0: PromptBase

    @property
    def prompt_length(self) -> int:
        return self.spec.full_dim // self.model.embed_dim


def build_world(model_seed: int = 0, proj_seed: int = 0, sub_dim: int = 500,
                prompt_length: int = 50, embed_dim: int = 16, hidden: int = 4,
                num_classes: int = 2, vocab_size: int = 2000,
                distribution=Distribution.UNIFORM_FAN_IN,
                p0_source=PromptSource.RANDOM_VOCAB_TOKENS) -> World:
    model = SurrogateModel.create(model_seed, vocab_size, embed_dim, hidden, num_classes)
    spec = ProjectionSpec(prompt_length * embed_dim, sub_dim, distribution, proj_seed)
    p0 = make_prompt_base(p0_source, prompt_length, embed_dim, model.vocab_embeddings, proj_seed + 1)
    return World(model, spec, make_projection(spec), p0)
