"""AdamW, the minibatch training loop, and the per-model evaluation suite."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import attacks
from .attacks import AttackConfig
from .data import Dataset
from .flops import count_flops, expected_flops
from .lipschitz import local_lipschitz_estimate
from .model import DropTrace, Model
from .rng import Rng
from .tensor import NonFiniteError, Tensor, backward, cross_entropy

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> AdamWState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState,
               cfg: TrainConfig) -> AdamWState:
    """One in-place AdamW update with bias correction and decoupled weight decay.

    Parameters whose gradient is ``None`` took no part in the loss and are
    left untouched, moments included.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient in adamw_step")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay:
            p.data *= 1.0 - cfg.lr * cfg.weight_decay
        p.data -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float | None
    wall_time: float
    drop_frequency: list[float]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        expected = len(self.records) + 1
        if rec.epoch != expected:
            raise ValueError(f"epoch {rec.epoch} recorded out of order (expected {expected})")
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def deterministic_view(self) -> list[dict]:
        """Records without wall-clock time, for reproducibility comparisons."""
        return [{k: v for k, v in asdict(r).items() if k != "wall_time"} for r in self.records]


def evaluate_accuracy(model: Model, dataset: Dataset, batch_size: int = 250) -> float:
    return attacks.robust_accuracy(model, dataset, "none", batch_size=batch_size)


def train(model: Model, dataset: Dataset, cfg: TrainConfig, rng: Rng, test: Dataset | None = None,
          log_stream=None) -> TrainLog:
    """Seeded-shuffle minibatch AdamW. Drop masks are resampled on every forward.

    Each epoch's record holds the mean train loss, held-out accuracy (drops
    disabled) and the empirical per-block drop frequency.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    params = model.parameters()
    state = AdamWState.zeros(params)
    log = TrainLog()
    L = model.config.depth
    n = len(dataset)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        dropped = np.zeros(L)
        seen = 0
        loss_sum = 0.0
        for step, i in enumerate(range(0, n, cfg.batch_size)):
            idx = order[i:i + cfg.batch_size]
            x = Tensor(dataset.images[idx].astype(model.dtype))
            y = dataset.labels[idx]
            trace = DropTrace()
            model.zero_grad()
            try:
                loss = cross_entropy(model.forward(x, training=True, rng=rng, trace=trace), y)
                backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, step {step}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss is {value} at epoch {epoch}, step {step}")
            adamw_step(params, [p.grad for p in params], state, cfg)
            dropped += (~trace.as_array()).sum(axis=1)
            seen += len(idx)
            loss_sum += value * len(idx)
        acc = evaluate_accuracy(model, test) if test is not None and len(test) else None
        rec = EpochRecord(epoch=epoch, train_loss=loss_sum / n, test_accuracy=acc,
                          wall_time=time.perf_counter() - t0,
                          drop_frequency=[float(d) for d in dropped / max(seen, 1)])
        log.append(rec)
        logger.info("epoch %d loss %.4f acc %s (%.1fs)", epoch, rec.train_loss, acc, rec.wall_time)
        if log_stream is not None:
            log_stream.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
            log_stream.flush()
    model.zero_grad()
    return log


# -- evaluation --------------------------------------------------------------

EVAL_COLUMNS = ("method", "kind", "clean", "fgsm", "pgd20", "epsilon",
                "flops_total_g", "flops_expected_g", "weight_decay", "config_hash")
LIPSCHITZ_COLUMNS = ("model", "mean", "median", "max", "epsilon", "samples", "config_hash")


@dataclass
class EvalRow:
    method: str
    kind: str
    clean: float
    fgsm: float
    pgd20: float
    epsilon: float
    lip_mean: float
    lip_median: float
    lip_max: float
    lip_epsilon: float
    lip_samples: int
    flops_total: float
    flops_expected: float
    weight_decay: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config_hash: str = ""

    def eval_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in self.rows:
            w.writerow([r.method, r.kind, f"{100 * r.clean:.2f}", f"{100 * r.fgsm:.2f}",
                        f"{100 * r.pgd20:.2f}", f"{r.epsilon:.6g}", f"{r.flops_total / 1e9:.3f}",
                        f"{r.flops_expected / 1e9:.3f}",
                        "" if r.weight_decay is None else f"{r.weight_decay:g}", self.config_hash])
        return buf.getvalue()

    def lipschitz_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LIPSCHITZ_COLUMNS)
        for r in self.rows:
            w.writerow([r.method, f"{r.lip_mean:.4f}", f"{r.lip_median:.4f}", f"{r.lip_max:.4f}",
                        f"{r.lip_epsilon:.6g}", str(r.lip_samples), self.config_hash])
        return buf.getvalue()


def evaluate_suite(model: Model, test: Dataset, attack_cfgs: dict[str, AttackConfig] | None = None,
                   method: str | None = None, lipschitz_epsilon: float = 1 / 255,
                   lipschitz_directions: str = "random", rng: Rng | None = None,
                   flops_per_mac: int = 2, nonlinear_cost: float = 5.0,
                   weight_decay: float | None = None, batch_size: int = 250) -> EvalRow:
    """Clean/FGSM/PGD accuracy, local Lipschitz statistics and FLOPs for one model.

    ``attack_cfgs`` maps "fgsm" and "pgd" to their configs (defaults: eps 8/255,
    PGD-20 with step 2/255 and random start).
    """
    attack_cfgs = dict(attack_cfgs or {})
    fg = attack_cfgs.get("fgsm", attacks.fgsm_config())
    pg = attack_cfgs.get("pgd", attacks.pgd_config())
    rng = rng or Rng(0)
    r_fgsm, r_pgd, r_lip = rng.spawn(3)
    clean = attacks.robust_accuracy(model, test, "none", batch_size=batch_size)
    acc_fgsm = attacks.robust_accuracy(model, test, "fgsm", fg, r_fgsm, batch_size)
    acc_pgd = attacks.robust_accuracy(model, test, "pgd", pg, r_pgd, batch_size)
    ratios = []
    for i in range(0, len(test), batch_size):
        rep = local_lipschitz_estimate(model, test.images[i:i + batch_size], lipschitz_epsilon,
                                       lipschitz_directions, r_lip)
        ratios.append(rep.ratios)
    ratios = np.concatenate(ratios)
    fl = count_flops(model.config, flops_per_mac, nonlinear_cost)
    return EvalRow(
        method=method or model.schedule.kind, kind=model.schedule.kind,
        clean=clean, fgsm=acc_fgsm, pgd20=acc_pgd, epsilon=pg.epsilon,
        lip_mean=float(ratios.mean()), lip_median=float(np.median(ratios)), lip_max=float(ratios.max()),
        lip_epsilon=lipschitz_epsilon, lip_samples=int(ratios.size),
        flops_total=fl.total_full, flops_expected=expected_flops(fl, model.schedule),
        weight_decay=weight_decay,
    )
