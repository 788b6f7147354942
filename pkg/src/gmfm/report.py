"""Fit bookkeeping shared by both estimation algorithms."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any


class FitError(RuntimeError):
    """Every restart of a fit failed."""

    def __init__(self, message: str, report: "FitReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass
class RestartRecord:
    restart: int
    loglik: float | None
    iterations: int
    converged: bool
    failed: bool = False
    stage_one_loglik: float | None = None
    message: str = ""


@dataclass
class FitReport:
    algorithm: str
    k1: int
    k2: int
    loglik: float | None = None
    best_restart: int | None = None
    loglik_trace: list[float] = field(default_factory=list)
    restarts: list[RestartRecord] = field(default_factory=list)
    residuals_before: dict | None = None
    residuals_after: dict | None = None
    clamped_cells: int = 0
    pi_clamp: float | None = None
    monotone_violations: int = 0
    skipped_corrections: int = 0
    curvature_bounds: dict[str, float] = field(default_factory=dict)
    index_set_sizes: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        if self.best_restart is None:
            return False
        return next(r.converged for r in self.restarts if r.restart == self.best_restart)

    def warn(self, message: str) -> None:
        if message not in self.warnings:
            self.warnings.append(message)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["converged"] = self.converged
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        d = dict(d)
        d.pop("converged", None)
        d["restarts"] = [RestartRecord(**r) for r in d.get("restarts", [])]
        return cls(**d)
