"""White-box L-infinity attacks (FGSM, PGD) and robust accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .lipschitz import as_function
from .rng import Rng
from .tensor import NonFiniteError, Tensor, backward, cross_entropy


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float = 2 / 255
    norm: str = "Linf"
    random_start: bool = True
    # >0: average input gradients over this many drop-sampled forwards
    eot_samples: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.steps > 1 and not self.step_size > 0:
            raise ValueError("step_size must be > 0 for multi-step attacks")
        if self.norm != "Linf":
            raise ValueError(f"unsupported norm {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def fgsm_config(epsilon: float = 8 / 255) -> AttackConfig:
    return AttackConfig(epsilon=epsilon, steps=1, step_size=epsilon, random_start=False)


def pgd_config(epsilon: float = 8 / 255, steps: int = 20, step_size: float = 2 / 255,
               random_start: bool = True) -> AttackConfig:
    return AttackConfig(epsilon=epsilon, steps=steps, step_size=step_size, random_start=random_start)


def _input_dtype(model) -> np.dtype:
    return getattr(model, "dtype", np.dtype(np.float64))


def loss_and_grad(model, x: np.ndarray, y, cfg: AttackConfig | None = None,
                  rng: Rng | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy at ``x`` and its gradient with respect to ``x``."""
    k = cfg.eot_samples if cfg is not None else 0
    dtype = _input_dtype(model)
    if k > 0 and hasattr(model, "schedule"):
        rng = rng or Rng(0)
        losses, grad = [], np.zeros(x.shape, dtype=np.float64)
        for _ in range(k):
            xt = Tensor(x.astype(dtype), requires_grad=True)
            loss = cross_entropy(model.forward(xt, training=True, rng=rng), y)
            backward(loss)
            losses.append(float(loss.data))
            grad += xt.grad
        value, grad = float(np.mean(losses)), grad / k
    else:
        f = as_function(model)
        xt = Tensor(x.astype(dtype), requires_grad=True)
        loss = cross_entropy(f(xt), y)
        backward(loss)
        value, grad = float(loss.data), xt.grad.astype(np.float64)
    if not np.isfinite(grad).all():
        raise NonFiniteError("non-finite input gradient")
    return value, grad


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _as_array(x) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return x.astype(np.float64)


def fgsm(model, x, y, cfg: AttackConfig | None = None, rng: Rng | None = None) -> np.ndarray:
    """x' = clip(x + eps * sign(grad_x CE), 0, 1). Works in float64."""
    cfg = cfg or fgsm_config()
    x = _as_array(x)
    if cfg.epsilon == 0:
        return x.copy()
    _, g = loss_and_grad(model, x, y, cfg, rng)
    return np.clip(x + cfg.epsilon * np.sign(g), 0.0, 1.0)


def pgd(model, x, y, cfg: AttackConfig | None = None, rng: Rng | None = None,
        on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Sign-gradient ascent projected onto the eps L-inf ball intersected with [0, 1]."""
    cfg = cfg or pgd_config()
    x = _as_array(x)
    if cfg.epsilon == 0:
        return x.copy()
    if cfg.random_start:
        rng = rng or Rng(0)
        x_adv = _project(x + rng.uniform(x.shape, -cfg.epsilon, cfg.epsilon), x, cfg.epsilon)
    else:
        x_adv = x.copy()
    if on_step is not None:
        on_step(0, x_adv)
    for t in range(1, cfg.steps + 1):
        _, g = loss_and_grad(model, x_adv, y, cfg, rng)
        x_adv = _project(x_adv + cfg.step_size * np.sign(g), x, cfg.epsilon)
        if on_step is not None:
            on_step(t, x_adv)
    return x_adv


ATTACKS = ("none", "fgsm", "pgd")


def attack_batch(model, x, y, attack: str, cfg: AttackConfig | None, rng: Rng | None = None) -> np.ndarray:
    if attack == "none":
        return _as_array(x)
    if attack == "fgsm":
        return fgsm(model, x, y, cfg, rng)
    if attack == "pgd":
        return pgd(model, x, y, cfg, rng)
    raise ValueError(f"unknown attack {attack!r}")


def predict(model, x: np.ndarray) -> np.ndarray:
    f = as_function(model)
    return f(Tensor(np.asarray(x).astype(_input_dtype(model)))).data.argmax(axis=1)


def robust_accuracy(model, dataset, attack: str = "none", cfg: AttackConfig | None = None,
                    rng: Rng | None = None, batch_size: int = 250) -> float:
    """Fraction of ``dataset`` classified correctly after ``attack``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if attack not in ATTACKS:
        raise ValueError(f"unknown attack {attack!r}")
    rng = rng or Rng(0)
    correct = 0
    for i in range(0, n, batch_size):
        x = dataset.images[i:i + batch_size]
        y = dataset.labels[i:i + batch_size]
        x_adv = attack_batch(model, x, y, attack, cfg, rng)
        correct += int((predict(model, x_adv) == y).sum())
    return correct / n
