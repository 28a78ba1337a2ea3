"""Analytic FLOPs for the ViT forward pass, in full and in expectation under drops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DropTrace, Model, ViTConfig
from .rng import Rng
from .schedule import DropSchedule


@dataclass
class FlopsReport:
    fixed_flops: float
    per_block_flops: list[float]
    flops_per_mac: int = 2
    nonlinear_cost: float = 5.0
    expected_under_schedule: float | None = None
    breakdown: dict = field(default_factory=dict)

    @property
    def total_full(self) -> float:
        return self.fixed_flops + sum(self.per_block_flops)

    @property
    def units(self) -> str:
        return "FLOPs (multiply and add counted separately, 2*MACs)" if self.flops_per_mac == 2 else "MACs"

    def to_dict(self) -> dict:
        return {
            "units": self.units,
            "flops_per_mac": self.flops_per_mac,
            "nonlinear_cost_per_element": self.nonlinear_cost,
            "fixed_flops": self.fixed_flops,
            "per_block_flops": list(self.per_block_flops),
            "total_full": self.total_full,
            "total_full_g": round(self.total_full / 1e9, 3),
            "expected_under_schedule": self.expected_under_schedule,
            "breakdown": self.breakdown,
        }


def linear_flops(tokens: int, m: int, n: int, flops_per_mac: int = 2) -> float:
    """An (m x n) linear map applied to ``tokens`` rows."""
    return float(flops_per_mac * tokens * m * n)


def block_flops(cfg: ViTConfig, flops_per_mac: int = 2, nonlinear_cost: float = 5.0) -> dict:
    T, D, Hd = cfg.tokens, cfg.embed_dim, cfg.mlp_hidden
    return {
        "norm1": nonlinear_cost * T * D,
        "qkv": linear_flops(T, D, 3 * D, flops_per_mac),
        # QK^T and AV, each T x T x head_dim per head, summed over heads
        "attn_scores": float(flops_per_mac * T * T * D),
        "softmax": nonlinear_cost * cfg.heads * T * T,
        "attn_values": float(flops_per_mac * T * T * D),
        "proj": linear_flops(T, D, D, flops_per_mac),
        "norm2": nonlinear_cost * T * D,
        "fc1": linear_flops(T, D, Hd, flops_per_mac),
        "gelu": nonlinear_cost * T * Hd,
        "fc2": linear_flops(T, Hd, D, flops_per_mac),
    }


def count_flops(config: ViTConfig, flops_per_mac: int = 2, nonlinear_cost: float = 5.0) -> FlopsReport:
    """Closed-form per-forward counts for one image.

    ``flops_per_mac=1`` reports multiply-accumulates instead, the convention
    most model zoos print under the name "FLOPs".
    """
    blk = block_flops(config, flops_per_mac, nonlinear_cost)
    per_block = sum(blk.values())
    fixed = {
        "patch_embed": linear_flops(config.num_patches, config.patch_dim, config.embed_dim, flops_per_mac),
        "final_norm": nonlinear_cost * config.tokens * config.embed_dim,
        "head": linear_flops(1, config.embed_dim, config.num_classes, flops_per_mac),
    }
    return FlopsReport(fixed_flops=sum(fixed.values()), per_block_flops=[per_block] * config.depth,
                       flops_per_mac=flops_per_mac, nonlinear_cost=nonlinear_cost,
                       breakdown={"fixed": fixed, "block": blk})


def expected_flops(report: FlopsReport, schedule: DropSchedule) -> float:
    """fixed + sum_l (1 - p(l)) * block_l under independent per-block drops."""
    if schedule.L != len(report.per_block_flops):
        raise ValueError(f"schedule has {schedule.L} blocks, report has {len(report.per_block_flops)}")
    keep = 1.0 - schedule.as_array()
    return float(report.fixed_flops + np.dot(keep, report.per_block_flops))


def with_expectation(report: FlopsReport, schedule: DropSchedule) -> FlopsReport:
    report.expected_under_schedule = expected_flops(report, schedule)
    return report


def flops_from_trace(report: FlopsReport, trace: DropTrace) -> np.ndarray:
    """Executed FLOPs per sample of one traced forward."""
    keep = trace.as_array().astype(np.float64)
    return report.fixed_flops + np.asarray(report.per_block_flops) @ keep


def measured_flops(model: Model, batch, samples: int, rng: Rng, chunk: int = 512,
                   report: FlopsReport | None = None) -> float:
    """Mean executed FLOPs over ``samples`` per-sample forwards with drops sampled.

    Rows of ``batch`` are cycled to reach ``samples`` sample-forwards.
    """
    if model.config.eval_mode != "sampled":
        raise ValueError("measured_flops needs a model with eval_mode='sampled'")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    report = report or count_flops(model.config)
    x = batch.data if hasattr(batch, "data") and not isinstance(batch, np.ndarray) else np.asarray(batch)
    total = 0.0
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        idx = (np.arange(done, done + n) % x.shape[0])
        trace = DropTrace()
        model.forward(x[idx], training=False, rng=rng, trace=trace)
        total += float(flops_from_trace(report, trace).sum())
        done += n
    return total / samples
