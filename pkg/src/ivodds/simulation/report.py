"""Serialization of simulation reports: JSON and an aligned text table."""

from __future__ import annotations

import json
import math

from .harness import SimulationReport


def _clean(v):
    if isinstance(v, float):
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return float(f"{v:.17g}")
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def report_dict(report: SimulationReport, provenance: dict | None = None) -> dict:
    """Plain-data view; excludes wall-clock time so reruns serialize identically."""
    return _clean(
        {
            "kind": "simulation",
            "reps": report.reps,
            "seed": report.seed,
            "configs": [c.to_dict() for c in report.configs],
            "cells": [c.to_dict() for c in report.cells],
            "provenance": provenance or {},
        }
    )


def to_json(report: SimulationReport, provenance: dict | None = None) -> str:
    return json.dumps(report_dict(report, provenance), sort_keys=True, indent=2, allow_nan=False)


def _fmt(v: float, scale: float = 100.0) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    x = v * scale
    if x == 0:
        return "0.00"
    digits = max(0, 2 - int(math.floor(math.log10(abs(x)))))
    return f"{x:.{digits}f}"


def to_text(report: SimulationReport) -> str:
    """Bias, ESE and SSE (x100) and coverage (%) per cell, one row per estimator."""
    head = f"{'Exp.':<5}{'E(Y)':>6}{'psi':>5}  {'Estimator':<13}{'Bias':>8}{'ESE':>8}{'SSE':>8}{'Cov.':>7}{'Fail':>6}"
    lines = [head, "-" * len(head)]
    for c in report.cells:
        cov = "-" if math.isnan(c.coverage) else f"{100 * c.coverage:.1f}"
        lines.append(
            f"{c.experiment:<5}{c.target_ey:>6g}{c.psi_true:>5g}  {c.estimator:<13}"
            f"{_fmt(c.bias):>8}{_fmt(c.ese):>8}{_fmt(c.sse):>8}{cov:>7}{c.n_fail:>6d}"
        )
    lines.append(f"reps={report.reps} seed={report.seed}")
    return "\n".join(lines) + "\n"
