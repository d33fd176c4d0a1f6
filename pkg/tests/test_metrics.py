"""Metric computation tests over synthetic event-log lines."""

import csv

import pytest

from dropsim.metrics import (bubble_ratio, collect, max_microbatch_cost,
                             parse_line, percentile, report_row,
                             slo_violation_fraction, timeline_rows,
                             write_report, write_timeline)


def test_percentile_nearest_rank():
    vals = [40, 10, 30, 20]
    assert percentile(vals, 50) == 20
    assert percentile(vals, 25) == 10
    assert percentile(vals, 75) == 30
    assert percentile(vals, 99) == 40
    assert percentile(vals, 100) == 40
    assert percentile([7], 50) == 7
    with pytest.raises(ValueError):
        percentile([], 50)
    with pytest.raises(ValueError):
        percentile(vals, 0)
    with pytest.raises(ValueError):
        percentile(vals, 101)


def test_slo_violation_fraction():
    lats = [0.1, 0.2, 0.3, 0.4]
    assert slo_violation_fraction(lats, 0.1, 2.0) == 0.5
    assert slo_violation_fraction(lats, 0.1, 10.0) == 0.0
    assert slo_violation_fraction([], 0.1, 2.0) == 0.0


def test_parse_line():
    t, kind, f = parse_line("1500 ADMIT req=3 group=0 tokens=600")
    assert t == 1500 and kind == "ADMIT"
    assert f == {"req": "3", "group": "0", "tokens": "600"}


def test_collect_request_lifecycle():
    lines = [
        "0 ARRIVE req=0 inp=100 out=3",
        "50000 FIRST_TOKEN req=0 ttft_us=50000",
        "150000 TOKEN req=0",
        "250000 TOKEN req=0",
        "250000 FINISH req=0",
    ]
    st = collect(lines)
    r = st.requests[0]
    assert r.ttft_s == pytest.approx(0.05)
    # three emits spanning 200 ms gives 100 ms per output token
    assert r.tpot_s == pytest.approx(0.1)
    assert st.finished() == 1
    assert st.end_us == 250000
    assert st.throughput_tps() == pytest.approx(3 / 0.25)


def test_collect_counters():
    lines = [
        "0 ARRIVE req=0 inp=10 out=5",
        "0 ARRIVE req=1 inp=10 out=5",
        "1000 OOM group=0 req=1",
        "2000 PLAN demand=5 freed=10 merges=2 fallback=0",
        "3000 EVICT req=1 tokens=10",
        "4000 SWAP_OUT req=0 bytes=100",
    ]
    st = collect(lines)
    assert st.oom_events == 1
    assert st.drop_events == 2
    assert st.evictions == 2
    assert st.requests[1].evicted == 1
    # no first token ever emitted
    assert st.ttfts() == []
    assert st.requests[0].tpot_s is None


def test_bubble_ratio_matches_fill_drain_overhead():
    # balanced 2-stage round with 2 microbatches: each stage sits idle
    # for one slot of the 3-slot window, (S-1)/m = 1/2
    lines = [
        "0 STAGE group=0 rnd=1 stage=0 mb=0 start=0 end=100",
        "0 STAGE group=0 rnd=1 stage=0 mb=1 start=100 end=200",
        "0 STAGE group=0 rnd=1 stage=1 mb=0 start=100 end=200",
        "0 STAGE group=0 rnd=1 stage=1 mb=1 start=200 end=300",
    ]
    assert bubble_ratio(lines) == pytest.approx(0.5)
    # four microbatches through the same two stages: (S-1)/m = 1/4
    lines4 = []
    for mb in range(4):
        lines4.append(f"0 STAGE group=0 rnd=1 stage=0 mb={mb} "
                      f"start={mb * 100} end={(mb + 1) * 100}")
        lines4.append(f"0 STAGE group=0 rnd=1 stage=1 mb={mb} "
                      f"start={(mb + 1) * 100} end={(mb + 2) * 100}")
    assert bubble_ratio(lines4) == pytest.approx(0.25)
    # a packed single-stage round has no window to waste
    solo = [
        "0 STAGE group=0 rnd=1 stage=0 mb=0 start=0 end=100",
        "0 STAGE group=0 rnd=1 stage=0 mb=1 start=100 end=200",
    ]
    assert bubble_ratio(solo) == 0.0
    assert bubble_ratio([]) == 0.0


def test_bubble_ratio_gap_costs_a_third():
    # two executions of 100 us and 200 us with a 100 us hole between
    lines = [
        "0 STAGE group=0 rnd=1 stage=0 mb=0 start=0 end=100",
        "0 STAGE group=0 rnd=1 stage=0 mb=1 start=200 end=400",
    ]
    assert bubble_ratio(lines) == pytest.approx(1 / 3)


def test_bubble_ratio_group_filter():
    lines = [
        "0 STAGE group=0 rnd=1 stage=0 mb=0 start=0 end=100",
        "0 STAGE group=0 rnd=1 stage=0 mb=1 start=200 end=300",
        "0 STAGE group=1 rnd=1 stage=0 mb=0 start=0 end=100",
        "0 STAGE group=1 rnd=1 stage=0 mb=1 start=100 end=200",
    ]
    assert bubble_ratio(lines, group=0) == pytest.approx(0.5)
    assert bubble_ratio(lines, group=1) == 0.0
    # windows are per round: a later round does not extend the first
    across = [
        "0 STAGE group=0 rnd=1 stage=0 mb=0 start=0 end=100",
        "0 STAGE group=0 rnd=2 stage=0 mb=0 start=500 end=600",
    ]
    assert bubble_ratio(across) == 0.0


def test_max_microbatch_cost():
    lines = [
        "0 STAGE group=0 rnd=1 stage=0 mb=0 start=0 end=2500",
        "0 STAGE group=0 rnd=1 stage=1 mb=0 start=2500 end=12500",
    ]
    assert max_microbatch_cost(lines) == pytest.approx(0.01)
    assert max_microbatch_cost([]) == 0.0


def test_report_row_and_writer(tmp_path):
    lines = [
        "0 ARRIVE req=0 inp=100 out=2",
        "100000 FIRST_TOKEN req=0 ttft_us=100000",
        "200000 TOKEN req=0",
        "200000 FINISH req=0",
    ]
    row = report_row("kunserve", collect(lines))
    assert row["policy"] == "kunserve"
    assert row["requests"] == "1" and row["finished"] == "1"
    assert row["p50_ttft_s"] == "0.100000"
    assert row["p50_tpot_s"] == "0.100000"
    path = tmp_path / "report.csv"
    write_report(str(path), [row])
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["p99_ttft_s"] == "0.100000"
    assert rows[0]["drop_events"] == "0"


def test_timeline_windows(tmp_path):
    lines = [
        "0 ARRIVE req=0 inp=10 out=5",
        "100000 OCC bp=2500 queued=3 stalled=0",
        "600000 OCC bp=5000 queued=1 stalled=2",
        "700000 FIRST_TOKEN req=0 ttft_us=700000",
        "1200000 TOKEN req=0",
        "2400000 TOKEN req=0",
    ]
    rows = timeline_rows(lines, window_s=1.0)
    assert len(rows) == 3
    assert rows[0]["t_start_s"] == "0.000"
    assert rows[0]["occupancy"] == "0.5000"  # last sample in window wins
    assert rows[0]["queued"] == "1" and rows[0]["stalled"] == "2"
    assert rows[0]["mean_ttft_s"] == "0.700000"
    assert rows[0]["throughput_tps"] == "1.000"
    # no new samples: occupancy carries forward, TTFT empty
    assert rows[1]["occupancy"] == "0.5000"
    assert rows[1]["mean_ttft_s"] == ""
    assert rows[1]["throughput_tps"] == "1.000"
    assert rows[2]["throughput_tps"] == "1.000"
    path = tmp_path / "timeline.csv"
    write_timeline(str(path), rows)
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert back[0]["occupancy"] == "0.5000"
    with pytest.raises(ValueError):
        timeline_rows(lines, window_s=0.0)
