"""CSV and JSON output for experiment and sweep results.

Accuracy columns are percentages with exactly two decimals, rounded
half-up via Decimal so 0.125-style ties never drift with the platform.
"""

from __future__ import annotations

import json
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path

from .errors import InputError

CSV_HEADER = "strategy,trainable_params,transfer_acc,source_acc,mean,drop"
SWEEP_HEADER = "p,lr,trainable_params,transfer_acc,source_acc,mean,drop,baseline_source_acc"


def format_pct(value: float) -> str:
    """Render a percentage with two decimals, ties away from zero."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _row_csv(row) -> str:
    return ",".join([
        row.strategy,
        str(row.trainable_params),
        format_pct(row.transfer_acc),
        format_pct(row.source_acc),
        format_pct(row.mean),
        format_pct(row.drop),
    ])


def _row_json(row) -> dict:
    return {
        "strategy": row.strategy,
        "trainable_params": row.trainable_params,
        "transfer_acc": format_pct(row.transfer_acc),
        "source_acc": format_pct(row.source_acc),
        "mean": format_pct(row.mean),
        "drop": format_pct(row.drop),
    }


def emit_report(report, path: str) -> None:
    """Write the experiment table as CSV plus a JSON sidecar.

    Rows keep the order the strategies were requested in. The sidecar
    lands next to the CSV with a .json suffix and echoes everything
    needed to rerun: config, seeds, baseline, the rapid-forgetting
    probe, and the formatted rows.
    """
    if not report.rows:
        raise InputError("report has no rows")
    lines = [CSV_HEADER] + [_row_csv(r) for r in report.rows]
    text = "\n".join(lines) + "\n"
    target = Path(path)
    target.write_text(text, encoding="utf-8")

    sidecar = {
        "baseline_source_acc": format_pct(report.baseline),
        "rows": [_row_json(r) for r in report.rows],
    }
    sidecar.update(report.config)
    side_path = target.with_suffix("") if target.suffix else target
    Path(str(side_path) + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def emit_sweep(grid, path: str) -> None:
    """Write the lr sweep as CSV; every row carries the shared baseline."""
    if not grid.cells:
        raise InputError("sweep has no cells")
    base = format_pct(grid.baseline)
    lines = [SWEEP_HEADER]
    for cell in grid.cells:
        rec = cell.record
        lines.append(",".join([
            str(cell.p),
            f"{cell.lr:g}",
            str(cell.trainable_params),
            format_pct(rec.transfer_acc),
            format_pct(rec.source_acc_after),
            format_pct(rec.mean),
            format_pct(rec.drop),
            base,
        ]))
    text = "\n".join(lines) + "\n"
    target = Path(path)
    target.write_text(text, encoding="utf-8")

    sidecar = {
        "baseline_source_acc": base,
        "cells": [{
            "p": cell.p,
            "lr": cell.lr,
            "trainable_params": cell.trainable_params,
            "transfer_acc": format_pct(cell.record.transfer_acc),
            "source_acc": format_pct(cell.record.source_acc_after),
            "mean": format_pct(cell.record.mean),
            "drop": format_pct(cell.record.drop),
        } for cell in grid.cells],
    }
    sidecar.update(grid.config)
    side_path = target.with_suffix("") if target.suffix else target
    Path(str(side_path) + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
