"""Seeded random projections from a low-dimensional search space to prompt space."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Distribution",
    "PromptBase",
    "PromptSource",
    "ProjectionSpec",
    "load_prompt_base",
    "make_projection",
    "make_prompt_base",
    "project",
    "save_prompt_base",
]

PROMPT_MAGIC = b"BBP0"


class Distribution(str, enum.Enum):
    UNIFORM_FAN_IN = "uniform"
    NORMAL_ONE_OVER_D = "normal"


class PromptSource(str, enum.Enum):
    RANDOM_VOCAB_TOKENS = "random-vocab"
    ZEROS = "zeros"
    LOADED = "loaded"


@dataclass(frozen=True)
class ProjectionSpec:
    full_dim: int
    sub_dim: int
    distribution: Distribution = Distribution.UNIFORM_FAN_IN
    seed: int = 0

    def __post_init__(self):
        if self.full_dim < 1 or self.sub_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.sub_dim > self.full_dim:
            raise ValueError(f"sub_dim {self.sub_dim} exceeds full_dim {self.full_dim}")
        object.__setattr__(self, "distribution", Distribution(self.distribution))


def make_projection(spec: ProjectionSpec) -> np.ndarray:
    """Build the ``(full_dim, sub_dim)`` float32 matrix for ``spec``.

    Uniform entries use the He bound with fan-in ``sub_dim``, i.e.
    ``U(-sqrt(6/d), sqrt(6/d))``; normal entries are ``N(0, 1/d)``.
    Regenerating from the same spec gives a bitwise-identical matrix.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.full_dim, spec.sub_dim)
    if spec.distribution is Distribution.UNIFORM_FAN_IN:
        bound = math.sqrt(6.0 / spec.sub_dim)
        a = rng.uniform(-bound, bound, size=shape)
        return np.clip(a.astype(np.float32), -np.float32(bound), np.float32(bound))
    return rng.normal(0.0, 1.0 / math.sqrt(spec.sub_dim), size=shape).astype(np.float32)


def project(A: np.ndarray, z, p0) -> np.ndarray:
    """Return ``A @ z + p0`` accumulated in float64.

    ``z`` may also be a ``(n, d)`` batch, giving ``(n, D)`` prompts.
    """
    z = np.asarray(z, dtype=np.float64)
    base = p0.values if isinstance(p0, PromptBase) else np.asarray(p0, dtype=np.float64)
    if z.shape[-1] != A.shape[1]:
        raise ValueError(f"z has dim {z.shape[-1]}, projection expects {A.shape[1]}")
    if base.shape != (A.shape[0],):
        raise ValueError(f"p0 has shape {base.shape}, projection expects ({A.shape[0]},)")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    A64 = A if A.dtype == np.float64 else A.astype(np.float64)
    return z @ A64.T + base


@dataclass(frozen=True, eq=False)
class PromptBase:
    values: np.ndarray
    source: PromptSource = PromptSource.ZEROS

    def __len__(self):
        return self.values.shape[0]


def make_prompt_base(
    kind,
    prompt_length: int,
    embed_dim: int,
    vocab_embeddings: np.ndarray | None = None,
    seed: int = 0,
    path: str | Path | None = None,
) -> PromptBase:
    kind = PromptSource(kind)
    full_dim = prompt_length * embed_dim
    if kind is PromptSource.ZEROS:
        return PromptBase(np.zeros(full_dim), kind)
    if kind is PromptSource.LOADED:
        if path is None:
            raise ValueError("a loaded prompt base needs a path")
        base = load_prompt_base(path)
        if len(base) != full_dim:
            raise ValueError(f"loaded prompt has {len(base)} values, expected {full_dim}")
        return base
    if vocab_embeddings is None:
        raise ValueError("random-vocab initialization needs an embedding table")
    table = np.asarray(vocab_embeddings)
    if table.shape[1] != embed_dim:
        raise ValueError(f"table width {table.shape[1]} != embed_dim {embed_dim}")
    if prompt_length > table.shape[0]:
        raise ValueError(f"cannot draw {prompt_length} distinct tokens from {table.shape[0]} rows")
    rng = np.random.default_rng(seed)
    rows = rng.choice(table.shape[0], size=prompt_length, replace=False)
    return PromptBase(table[rows].astype(np.float64).reshape(-1), kind)


def save_prompt_base(base: PromptBase, path: str | Path) -> None:
    values = np.asarray(base.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PROMPT_MAGIC + struct.pack("<I", values.size) + values.tobytes())


def load_prompt_base(path: str | Path) -> PromptBase:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != PROMPT_MAGIC:
        raise ValueError(f"{path}: not a prompt base file")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 4 * n:
        raise ValueError(f"{path}: expected {n} float32 values, file size is {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)
    return PromptBase(values, PromptSource.LOADED)
