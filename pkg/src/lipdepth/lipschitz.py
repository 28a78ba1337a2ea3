"""Lipschitz bound calculus under random layer drops, and an empirical local estimator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .rng import Rng
from .schedule import DropSchedule
from .tensor import Tensor, backward, mul, tsum

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkSpec:
    layer_lipschitz: tuple[float, ...]
    weights: tuple[np.ndarray, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        ell = tuple(float(v) for v in self.layer_lipschitz)
        if any(not math.isfinite(v) or v < 0 for v in ell):
            raise ValueError("layer Lipschitz constants must be finite and >= 0")
        object.__setattr__(self, "layer_lipschitz", ell)

    @property
    def L(self) -> int:
        return len(self.layer_lipschitz)

    @property
    def lam(self) -> float:
        """Uniform upper bound on the per-layer constants."""
        return max(self.layer_lipschitz)

    @classmethod
    def from_weights(cls, weights: Sequence[np.ndarray], rng: Rng | None = None) -> NetworkSpec:
        ell = tuple(spectral_norm(W, rng=rng) for W in weights)
        return cls(ell, tuple(np.asarray(W) for W in weights))


@dataclass(frozen=True)
class MaskSample:
    mask: tuple[int, ...]

    def __post_init__(self):
        m = tuple(int(v) for v in self.mask)
        if any(v not in (0, 1) for v in m):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "mask", m)

    @property
    def L(self) -> int:
        return len(self.mask)


class PowerIterationResult(NamedTuple):
    sigma: float
    vector: np.ndarray
    converged: bool
    iterations: int


def power_iteration(W, iters: int = 100, tol: float = 1e-9, rng: Rng | None = None) -> PowerIterationResult:
    """Largest singular value of ``W`` by power iteration on its smaller Gram matrix."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W.reshape(1, -1)
    if W.size == 0:
        raise ValueError("spectral norm of an empty matrix")
    if not np.isfinite(W).all():
        raise ValueError("matrix contains non-finite entries")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng or Rng(0)
    G = W.T @ W if W.shape[1] <= W.shape[0] else W @ W.T
    v = rng.gaussian(G.shape[0])
    v /= np.linalg.norm(v)
    prev = -np.inf
    sigma = 0.0
    for it in range(1, iters + 1):
        w = G @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return PowerIterationResult(0.0, v, True, it)
        # Rayleigh quotient of the Gram matrix gives sigma^2
        sigma = math.sqrt(max(float(v @ w), 0.0))
        v = w / nrm
        if abs(sigma - prev) < tol:
            return PowerIterationResult(sigma, v, True, it)
        prev = sigma
    return PowerIterationResult(sigma, v, False, iters)


def spectral_norm(W, iters: int = 100, tol: float = 1e-9, rng: Rng | None = None) -> float:
    res = power_iteration(W, iters=iters, tol=tol, rng=rng)
    if not res.converged:
        logger.warning("power iteration stopped after %d iterations without reaching tol=%g",
                       res.iterations, tol)
    return res.sigma


def full_lipschitz(spec: NetworkSpec) -> float:
    return math.prod(spec.layer_lipschitz)


def mask_lipschitz(spec: NetworkSpec, mask: MaskSample | Sequence[int]) -> float:
    """Product over active layers; dropped layers are identities with constant 1."""
    m = mask.mask if isinstance(mask, MaskSample) else tuple(mask)
    if len(m) != spec.L:
        raise ValueError(f"mask length {len(m)} != {spec.L} layers")
    return math.prod(ell for ell, on in zip(spec.layer_lipschitz, m) if on)


def expected_factor(p: float, ell: float) -> float:
    """E[ell**mask] when the layer is dropped with probability p: (1 - p) * ell + p."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"drop probability {p} outside [0, 1]")
    if ell < 0:
        raise ValueError("layer Lipschitz constant must be >= 0")
    return (1.0 - p) * ell + p


def expected_network_bound(spec: NetworkSpec, schedule: DropSchedule | Sequence[float]) -> float:
    probs = schedule.probs if isinstance(schedule, DropSchedule) else tuple(schedule)
    if len(probs) != spec.L:
        raise ValueError(f"schedule length {len(probs)} != {spec.L} layers")
    return math.prod(expected_factor(p, ell) for p, ell in zip(probs, spec.layer_lipschitz))


@dataclass
class KappaDistribution:
    mean: float
    stddev: float
    stderr: float
    samples: int
    histogram: tuple[np.ndarray, np.ndarray]


def monte_carlo_kappa(spec: NetworkSpec, schedule: DropSchedule | Sequence[float], samples: int,
                      rng: Rng, workers: int = 1, bins: int = 20, chunk: int = 65536) -> KappaDistribution:
    """Empirical distribution of kappa(mask) with layer l active w.p. 1 - p(l).

    ``workers`` independent streams are drawn from ``rng``; their partial sums
    are merged by addition, so the result depends only on (rng, workers).
    """
    probs = np.asarray(schedule.probs if isinstance(schedule, DropSchedule) else schedule, dtype=np.float64)
    if probs.shape[0] != spec.L:
        raise ValueError(f"schedule length {probs.shape[0]} != {spec.L} layers")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    ell = np.asarray(spec.layer_lipschitz)
    lo = float(np.prod(np.minimum(ell, 1.0)))
    hi = float(np.prod(np.maximum(ell, 1.0)))
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    counts = np.zeros(bins, dtype=np.int64)
    s1 = s2 = 0.0
    streams = rng.spawn(workers) if workers > 1 else [rng]
    per = [samples // len(streams) + (i < samples % len(streams)) for i in range(len(streams))]
    for stream, n in zip(streams, per):
        while n > 0:
            m = min(n, chunk)
            active = stream.bernoulli(1.0 - probs, (m, spec.L)).astype(bool)
            kappa = np.prod(np.where(active, ell, 1.0), axis=1)
            s1 += float(kappa.sum())
            s2 += float((kappa * kappa).sum())
            counts += np.histogram(kappa, bins=edges)[0]
            n -= m
    mean = s1 / samples
    var = max(s2 / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
    sd = math.sqrt(var)
    return KappaDistribution(mean, sd, sd / math.sqrt(samples), samples, (counts, edges))


@dataclass
class LipschitzReport:
    mean: float
    median: float
    max: float
    epsilon: float
    sample_count: int
    norm: str = "L2"
    ratios: np.ndarray | None = field(default=None, repr=False)

    CSV_COLUMNS = ("model", "mean", "median", "max", "epsilon", "samples")

    def csv_row(self, model_id: str) -> list[str]:
        return [model_id, f"{self.mean:.6g}", f"{self.median:.6g}", f"{self.max:.6g}",
                f"{self.epsilon:.6g}", str(self.sample_count)]


def as_function(model) -> Callable[[Tensor], Tensor]:
    """Deterministic forward map of a model (drops disabled) or a plain callable."""
    if hasattr(model, "forward") and hasattr(model, "schedule"):
        return lambda x: model.forward(x, training=False)
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate {type(model).__name__} as a function")


def _per_example_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(a.shape[0], -1).astype(np.float64) ** 2).sum(axis=1))


def _normalize_rows(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = _per_example_norm(v)
    bad = n == 0
    if bad.any():
        v = v.copy()
        v[bad] = fallback[bad]
        n = _per_example_norm(v)
    return v / n.reshape((-1,) + (1,) * (v.ndim - 1))


def _vjp(f, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """J(x)^T u, assuming f maps batch rows independently."""
    xt = Tensor(x, requires_grad=True)
    y = f(xt)
    backward(tsum(mul(y, Tensor(u.astype(y.dtype)))))
    return xt.grad


def local_lipschitz_estimate(model, batch, epsilon: float = 1 / 255, directions: str = "random",
                             rng: Rng | None = None, refine_steps: int = 3) -> LipschitzReport:
    """Per-example ratio ||f(x + d) - f(x)||_2 / ||d||_2 with ||d||_2 = epsilon.

    ``directions="random"`` uses a Gaussian direction; ``"gradient_aligned"``
    starts from grad_x ||f(x)||_2 and applies ``refine_steps`` power steps
    v <- J^T (f(x + eps v) - f(x)) to approach the worst-case direction.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if directions not in ("random", "gradient_aligned"):
        raise ValueError(f"unknown direction mode {directions!r}")
    f = as_function(model)
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    rng = rng or Rng(0)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    x = x.astype(dtype, copy=False)
    rand = rng.gaussian(x.shape, dtype=np.float64)
    fx = f(Tensor(x)).data
    if directions == "random":
        v = _normalize_rows(rand, rand)
    else:
        # d/dx 0.5 ||f||^2 = J^T f, parallel to grad ||f||
        v = _normalize_rows(_vjp(f, x, fx).astype(np.float64), rand)
        for _ in range(refine_steps):
            u = f(Tensor((x + epsilon * v).astype(dtype))).data - fx
            v = _normalize_rows(_vjp(f, x, u).astype(np.float64), v)
    xp = (x + epsilon * v).astype(dtype)
    # measure the perturbation that survived rounding to the working dtype
    applied = xp.astype(np.float64) - x.astype(np.float64)
    diff = f(Tensor(xp)).data.astype(np.float64) - fx.astype(np.float64)
    ratios = _per_example_norm(diff) / _per_example_norm(applied)
    return LipschitzReport(mean=float(ratios.mean()), median=float(np.median(ratios)),
                           max=float(ratios.max()), epsilon=float(epsilon),
                           sample_count=int(ratios.shape[0]), ratios=ratios)
