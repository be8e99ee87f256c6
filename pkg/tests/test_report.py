"""Report emission: CSV golden files, half-up percentage rounding, and
the JSON sidecar."""

import csv
import json

import pytest

from vitsurgery.errors import InputError
from vitsurgery.experiment import ExperimentReport, ReportRow, SweepCell, SweepGrid
from vitsurgery.knn import forgetting_report
from vitsurgery.report import (CSV_HEADER, SWEEP_HEADER, emit_report, emit_sweep,
                               format_pct)


def test_format_pct_half_up():
    assert format_pct(88.58) == "88.58"
    assert format_pct((88.58 + 74.61) / 2) == "81.60"  # 81.595 rounds up
    assert format_pct(0.125) == "0.13"
    assert format_pct(2.675) == "2.68"
    assert format_pct(0.0) == "0.00"
    assert format_pct(100.0) == "100.00"
    assert format_pct(38.875) == "38.88"


def _report():
    rows = [
        ReportRow("full", 85_875_556, 89.61, 41.12, 65.365, 54.88),
        ReportRow("blockexp p=3", 21_340_516, 88.58, 74.61, 81.595, 21.39),
        ReportRow("linear", 76_900, 50.0, 96.0, 73.0, 0.0),
    ]
    return ExperimentReport(rows=rows, baseline=96.0, config={"seed": 7, "steps": 2000})


def test_emit_report_golden(tmp_path):
    path = str(tmp_path / "out.csv")
    emit_report(_report(), path)
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    assert lines[0] == "strategy,trainable_params,transfer_acc,source_acc,mean,drop"
    assert lines[1] == "full,85875556,89.61,41.12,65.37,54.88"
    assert lines[2] == "blockexp p=3,21340516,88.58,74.61,81.60,21.39"
    assert lines[3] == "linear,76900,50.00,96.00,73.00,0.00"
    assert len(lines) == 4


def test_emit_report_sidecar(tmp_path):
    path = str(tmp_path / "out.csv")
    emit_report(_report(), path)
    with open(str(tmp_path / "out.json")) as f:
        side = json.load(f)
    assert side["baseline_source_acc"] == "96.00"
    assert side["rows"][1]["mean"] == "81.60"
    assert side["seed"] == 7
    assert side["steps"] == 2000


def test_emit_report_round_trip_arithmetic(tmp_path):
    path = str(tmp_path / "out.csv")
    emit_report(_report(), path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        mean = (float(row["transfer_acc"]) + float(row["source_acc"])) / 2
        assert abs(mean - float(row["mean"])) <= 0.01
    # order preserved as given
    assert [r["strategy"] for r in rows] == ["full", "blockexp p=3", "linear"]


def test_emit_report_empty_rejected(tmp_path):
    with pytest.raises(InputError):
        emit_report(ExperimentReport(rows=[], baseline=1.0, config={}),
                    str(tmp_path / "x.csv"))


def _grid():
    cells = [
        SweepCell(1, 0.05, 100, forgetting_report(95.5, 90.0, 80.0)),
        SweepCell(2, 0.01, 200, forgetting_report(95.5, 91.0, 81.0)),
    ]
    return SweepGrid(cells=cells, baseline=95.5, config={"seed": 1})


def test_emit_sweep_golden(tmp_path):
    path = str(tmp_path / "sweep.csv")
    emit_sweep(_grid(), path)
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    assert lines[0] == ("p,lr,trainable_params,transfer_acc,source_acc,"
                        "mean,drop,baseline_source_acc")
    assert lines[1] == "1,0.05,100,80.00,90.00,85.00,5.50,95.50"
    assert lines[2] == "2,0.01,200,81.00,91.00,86.00,4.50,95.50"
    # every row carries the same baseline column
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert {r["baseline_source_acc"] for r in rows} == {"95.50"}
    with pytest.raises(InputError):
        emit_sweep(SweepGrid(cells=[], baseline=0.0, config={}),
                   str(tmp_path / "y.csv"))


def test_headers_exported():
    assert CSV_HEADER.split(",")[0] == "strategy"
    assert SWEEP_HEADER.split(",")[-1] == "baseline_source_acc"
