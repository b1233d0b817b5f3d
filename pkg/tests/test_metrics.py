import csv
import io
import json

import jsonschema
import pytest

from marlpipe.metrics import MetricsReport, StepMetrics, summary_csv, validate_report


def _report(mode="disagg-sync", e2e=10.0):
    return MetricsReport(
        mode=mode,
        steps=[StepMetrics(e2e, 6.0, 3.0, 1.0, 200, 200 / e2e)],
        queue_traces={"a": [(0.0, 0), (1.5, 3)]},
        utilization=[(e2e, 0.25)],
        version_ledger=[{"agent": "a", "version": 1, "update_time": 9.0, "sync_time": None}],
    )


def test_report_json_matches_schema():
    data = json.loads(_report().to_json())
    validate_report(data)
    assert data["steps"][0]["tokens"] == 200
    assert data["queue_traces"]["a"] == [[0.0, 0], [1.5, 3]]


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(extra=1),
        lambda d: d["steps"][0].update(extra=1),
        lambda d: d["steps"][0].pop("e2e_s"),
        lambda d: d.update(mode="hybrid"),
        lambda d: d["version_ledger"][0].update(version=0),
        lambda d: d["utilization"].append([1.0]),
    ],
)
def test_schema_rejects_drift(mutate):
    data = _report().to_dict()
    mutate(data)
    with pytest.raises(jsonschema.ValidationError):
        validate_report(data)


def test_totals():
    r = _report()
    assert r.total_e2e == 10.0 and r.total_tokens == 200 and r.throughput == 20.0
    assert MetricsReport("disagg-sync").throughput == 0.0


def test_csv_traces():
    r = _report()
    rows = list(csv.reader(io.StringIO(r.queue_csv())))
    assert rows == [["agent", "t", "queue_len"], ["a", "0.0", "0"], ["a", "1.5", "3"]]
    rows = list(csv.reader(io.StringIO(r.utilization_csv())))
    assert rows == [["t", "utilization"], ["10.0", "0.25"]]


def test_summary_speedup_relative_to_colocated():
    rows = list(csv.DictReader(io.StringIO(summary_csv([_report("colocated-sync", 20.0), _report("micro-batch-async", 10.0)]))))
    assert float(rows[0]["speedup_vs_colocated"]) == 1.0
    assert float(rows[1]["speedup_vs_colocated"]) == 2.0
