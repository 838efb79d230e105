"""Time and compute savings of multi-phase training over a flat baseline.

A growth pipeline trains several successively larger models, each phase
processing its own token budget at its own throughput. The baseline trains
the final model from scratch on the combined token budget. Both factors are
ratios of baseline cost to pipeline cost, so larger is better.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class PhaseSpec:
    """One training phase (or the from-scratch baseline)."""

    name: str
    devices: int
    gflops_per_device: float
    model_size_B: float
    trained_tokens_B: float
    tokens_per_day_B: float

    def validate(self) -> None:
        for fname in ("devices", "gflops_per_device", "model_size_B",
                      "trained_tokens_B", "tokens_per_day_B"):
            value = getattr(self, fname)
            if not value > 0:
                raise ValidationError(f"phase {self.name!r}: {fname} must be > 0, got {value}")

    @property
    def cluster_gflops(self) -> float:
        return self.devices * self.gflops_per_device

    @property
    def days(self) -> float:
        return self.trained_tokens_B / self.tokens_per_day_B

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "devices": self.devices,
            "gflops_per_device": self.gflops_per_device,
            "model_size_B": self.model_size_B,
            "trained_tokens_B": self.trained_tokens_B,
            "tokens_per_day_B": self.tokens_per_day_B,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseSpec":
        required = {"name", "devices", "gflops_per_device", "model_size_B",
                    "trained_tokens_B", "tokens_per_day_B"}
        if set(data) != required:
            raise ValidationError(f"phase spec must have exactly the fields {sorted(required)}")
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass(frozen=True)
class PhaseCost:
    name: str
    days: float
    cluster_gflops: float
    gflops_days: float


@dataclass(frozen=True)
class SavingsReport:
    time_factor: float
    power_factor: float
    baseline_days: float
    baseline_gflops_days: float
    phase_costs: tuple[PhaseCost, ...]

    def to_dict(self) -> dict:
        return {
            "time_factor": round(self.time_factor, 2),
            "power_factor": round(self.power_factor, 2),
            "baseline_days": self.baseline_days,
            "baseline_gflops_days": self.baseline_gflops_days,
            "phases": [
                {
                    "name": c.name,
                    "days": c.days,
                    "cluster_gflops": c.cluster_gflops,
                    "gflops_days": c.gflops_days,
                }
                for c in self.phase_costs
            ],
        }


def _validate_plan(phases: list[PhaseSpec], baseline: PhaseSpec) -> None:
    if not phases:
        raise ValidationError("plan needs at least one phase")
    for p in phases:
        p.validate()
    baseline.validate()


def time_savings_factor(phases: list[PhaseSpec], baseline: PhaseSpec) -> float:
    """Days to train all tokens at baseline throughput, over actual days."""
    _validate_plan(phases, baseline)
    total_tokens = sum(p.trained_tokens_B for p in phases)
    baseline_days = total_tokens / baseline.tokens_per_day_B
    actual_days = sum(p.days for p in phases)
    return baseline_days / actual_days


def power_savings_factor(phases: list[PhaseSpec], baseline: PhaseSpec) -> float:
    """Baseline GFLOPS-days over the summed per-phase GFLOPS-days."""
    _validate_plan(phases, baseline)
    total_tokens = sum(p.trained_tokens_B for p in phases)
    baseline_cost = baseline.cluster_gflops * (total_tokens / baseline.tokens_per_day_B)
    actual_cost = sum(p.cluster_gflops * p.days for p in phases)
    return baseline_cost / actual_cost


def savings_report(phases: list[PhaseSpec], baseline: PhaseSpec) -> SavingsReport:
    _validate_plan(phases, baseline)
    total_tokens = sum(p.trained_tokens_B for p in phases)
    return SavingsReport(
        time_factor=time_savings_factor(phases, baseline),
        power_factor=power_savings_factor(phases, baseline),
        baseline_days=total_tokens / baseline.tokens_per_day_B,
        baseline_gflops_days=baseline.cluster_gflops * total_tokens / baseline.tokens_per_day_B,
        phase_costs=tuple(
            PhaseCost(
                name=p.name,
                days=p.days,
                cluster_gflops=p.cluster_gflops,
                gflops_days=p.cluster_gflops * p.days,
            )
            for p in phases
        ),
    )


def load_plan(text: str) -> tuple[list[PhaseSpec], PhaseSpec]:
    """Parse a plan document: {"phases": [PhaseSpec...], "baseline": PhaseSpec}."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"unparseable plan: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"phases", "baseline"}:
        raise ValidationError("plan must be an object with exactly 'phases' and 'baseline'")
    if not isinstance(doc["phases"], list):
        raise ValidationError("'phases' must be a list")
    phases = [PhaseSpec.from_dict(p) for p in doc["phases"]]
    baseline = PhaseSpec.from_dict(doc["baseline"])
    _validate_plan(phases, baseline)
    return phases, baseline
