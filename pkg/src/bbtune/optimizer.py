"""Ask/tell CMA-ES and an Adam baseline for local, differentiable surrogates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AdamState",
    "CMAES",
    "CmaConfig",
    "CmaParameters",
    "CmaState",
    "OptimizerError",
    "adam_init",
    "adam_step",
    "default_popsize",
]

EVALS_LIMIT = 2**63 - 1


class OptimizerError(RuntimeError):
    """Raised on protocol misuse (ask/tell ordering) or invalid input."""


def default_popsize(dim: int) -> int:
    """Population size rule ``4 + floor(3 ln d)``."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return 4 + int(math.floor(3.0 * math.log(dim)))


@dataclass(frozen=True)
class CmaConfig:
    dim: int
    popsize: int | None = None
    mean0: np.ndarray | float = 0.0
    sigma0: float = 1.0
    seed: int = 0
    bounds: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.popsize is not None and self.popsize < 2:
            raise ValueError(f"popsize must be >= 2, got {self.popsize}")
        if not (math.isfinite(self.sigma0) and self.sigma0 > 0):
            raise ValueError(f"sigma0 must be finite and > 0, got {self.sigma0}")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError(f"bounds must satisfy lo < hi, got {self.bounds}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def lam(self) -> int:
        return self.popsize if self.popsize is not None else default_popsize(self.dim)

    def initial_mean(self) -> np.ndarray:
        m = np.broadcast_to(np.asarray(self.mean0, dtype=np.float64), (self.dim,)).copy()
        if not np.all(np.isfinite(m)):
            raise ValueError("mean0 must be finite")
        return m


class CmaParameters:
    """Static strategy parameters (the standard tutorial defaults)."""

    def __init__(self, dim: int, lam: int):
        n = dim
        self.dim = n
        self.lam = lam
        self.mu = lam // 2
        if not 1 <= self.mu < lam:
            raise ValueError(f"popsize {lam} gives invalid parent count {self.mu}")
        raw = math.log(lam / 2 + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = raw / raw.sum()
        self.mueff = 1.0 / float(np.sum(self.weights**2))
        mueff = self.mueff

        self.cs = (mueff + 2) / (n + mueff + 5)
        self.damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        self.c1 = 2 / ((n + 1.3) ** 2 + mueff)
        self.cmu = min(1 - self.c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
        # generations between eigendecompositions
        self.eigen_gap = max(1, math.ceil(1 / (10 * n * (self.c1 + self.cmu))))


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    path_sigma: np.ndarray
    path_cov: np.ndarray
    eigen_basis: np.ndarray
    eigen_values: np.ndarray
    generation: int
    evals: int
    rng: np.random.Generator
    eigen_generation: int = 0
    best_x: np.ndarray | None = None
    best_f: float = math.inf

    def distribution_fields(self) -> dict:
        """The fields that define the search distribution, for comparisons."""
        return {
            "mean": self.mean,
            "sigma": self.sigma,
            "cov": self.cov,
            "path_sigma": self.path_sigma,
            "path_cov": self.path_cov,
            "eigen_basis": self.eigen_basis,
            "eigen_values": self.eigen_values,
            "generation": self.generation,
            "evals": self.evals,
            "rng": self.rng.bit_generator.state,
        }


class CMAES:
    """(mu/mu_w, lambda)-CMA-ES with box clipping, ask/tell interface.

    Minimizes. ``ask`` and ``tell`` must strictly alternate. Candidates are
    clipped into ``config.bounds`` and the clipped vectors are what ``tell``
    expects back.

    >>> es = CMAES(CmaConfig(dim=3, seed=7))
    >>> xs = es.ask()
    >>> es.tell(xs, [float(x @ x) for x in xs])
    >>> es.state.generation
    1
    """

    def __init__(self, config: CmaConfig):
        self.config = config
        self.params = CmaParameters(config.dim, config.lam)
        n = config.dim
        self.state = CmaState(
            mean=config.initial_mean(),
            sigma=float(config.sigma0),
            cov=np.eye(n),
            path_sigma=np.zeros(n),
            path_cov=np.zeros(n),
            eigen_basis=np.eye(n),
            eigen_values=np.ones(n),
            generation=0,
            evals=0,
            rng=np.random.default_rng(config.seed),
        )
        self._pending: np.ndarray | None = None

    @property
    def lam(self) -> int:
        return self.params.lam

    @property
    def pending(self) -> bool:
        return self._pending is not None

    def _refresh_eigensystem(self) -> None:
        st = self.state
        if st.generation - st.eigen_generation < self.params.eigen_gap and st.generation > 0:
            return
        st.cov = np.triu(st.cov) + np.triu(st.cov, 1).T
        vals, basis = np.linalg.eigh(st.cov)
        st.eigen_values = np.sqrt(np.maximum(vals, 0.0))
        st.eigen_basis = basis
        st.eigen_generation = st.generation

    def ask(self) -> np.ndarray:
        """Sample ``lam`` candidates as rows of a ``(lam, dim)`` array."""
        if self._pending is not None:
            raise OptimizerError("ask called twice without an intervening tell")
        st = self.state
        if st.evals > EVALS_LIMIT - self.lam:
            raise OptimizerError("evaluation counter overflow")
        self._refresh_eigensystem()
        u = st.rng.standard_normal((self.lam, self.config.dim))
        steps = (u * st.eigen_values) @ st.eigen_basis.T
        lo, hi = self.config.bounds
        candidates = np.clip(st.mean + st.sigma * steps, lo, hi)
        self._pending = candidates
        return candidates.copy()

    def tell(self, candidates, fitnesses) -> None:
        if self._pending is None:
            raise OptimizerError("tell called without a pending ask")
        x = np.asarray(candidates, dtype=np.float64)
        f = np.asarray(fitnesses, dtype=np.float64)
        if x.shape != self._pending.shape or f.shape != (self.lam,):
            raise OptimizerError(
                f"expected {self.lam} candidates of dim {self.config.dim} and {self.lam} fitnesses"
            )
        if not np.all(np.isfinite(f)):
            raise OptimizerError("fitnesses must be finite")
        if not np.array_equal(x, self._pending):
            raise OptimizerError("candidates do not match the pending ask")
        self._pending = None

        p, st = self.params, self.state
        n = self.config.dim
        order = np.argsort(f, kind="stable")
        if f[order[0]] < st.best_f:
            st.best_f = float(f[order[0]])
            st.best_x = x[order[0]].copy()

        old_mean = st.mean
        y = (x[order[: p.mu]] - old_mean) / st.sigma
        y_w = p.weights @ y
        st.mean = old_mean + st.sigma * y_w

        # C^{-1/2} y_w through the current eigensystem
        inv_sqrt = st.eigen_basis @ ((st.eigen_basis.T @ y_w) / np.where(st.eigen_values > 0, st.eigen_values, np.inf))
        st.path_sigma = (1 - p.cs) * st.path_sigma + math.sqrt(p.cs * (2 - p.cs) * p.mueff) * inv_sqrt
        ps_norm = float(np.linalg.norm(st.path_sigma))
        g1 = st.generation + 1
        h_sigma = ps_norm / math.sqrt(1 - (1 - p.cs) ** (2 * g1)) < (1.4 + 2 / (n + 1)) * p.chi_n
        st.path_cov = (1 - p.cc) * st.path_cov + h_sigma * math.sqrt(p.cc * (2 - p.cc) * p.mueff) * y_w

        delta_h = (1 - h_sigma) * p.cc * (2 - p.cc)
        rank_one = np.outer(st.path_cov, st.path_cov)
        rank_mu = (y.T * p.weights) @ y
        st.cov = (1 + p.c1 * delta_h - p.c1 - p.cmu) * st.cov + p.c1 * rank_one + p.cmu * rank_mu
        st.cov = (st.cov + st.cov.T) / 2

        st.sigma = st.sigma * math.exp((p.cs / p.damps) * (ps_norm / p.chi_n - 1))
        st.generation += 1
        st.evals += self.lam

    def recommend(self) -> np.ndarray:
        """Best evaluated candidate so far (not the mean)."""
        if self.state.best_x is None:
            raise OptimizerError("recommend called before any tell")
        return self.state.best_x.copy()


@dataclass
class AdamState:
    point: np.ndarray
    moment1: np.ndarray
    moment2: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(point, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    x = np.array(point, dtype=np.float64)
    return AdamState(x, np.zeros_like(x), np.zeros_like(x), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, gradient) -> AdamState:
    """One bias-corrected Adam update; returns a new state."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.point.shape:
        raise ValueError(f"gradient shape {g.shape} != point shape {state.point.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    t = state.step + 1
    m = state.beta1 * state.moment1 + (1 - state.beta1) * g
    v = state.beta2 * state.moment2 + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    point = state.point - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(point, m, v, t, state.lr, state.beta1, state.beta2, state.eps)
