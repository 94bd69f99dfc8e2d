import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optifab.journal import (
    INTERVAL_CLASSES,
    REPORT_FILES,
    Journal,
    JournalError,
    audit,
    concurrency_profile,
    evaluation_makespan,
    overhead_report,
    read_journal,
    render_reports,
    summary,
    timing_traces,
)

HEADER = {"seed": 7, "config": {"a": 1}, "config_hash": "x"}


def synthetic(n_trials, eval_seconds, gen_seconds=0.0, slots=1, queue=0.0, retrieval=0.0, t0=1000.0):
    """Events for trials run ``slots`` at a time with the given interval lengths."""
    events = []

    def add(kind, payload, t):
        events.append({"seq": len(events), "wall_time": t, "kind": kind, "payload": payload})

    add("experiment_started", {}, t0)
    clock = t0
    for start in range(0, n_trials, slots):
        batch = range(start, min(start + slots, n_trials))
        for tid in batch:
            add("trial_proposed", {"trial_id": tid, "design": [0.5], "generation_seconds": gen_seconds}, clock)
        for tid in batch:
            add("task_submitted", {"task_id": f"e:{tid}:1", "trial_id": tid, "attempt": 1, "submitted_at": clock},
                clock)
        begin = clock + queue
        end = begin + eval_seconds
        for tid in batch:
            add("task_started", {"task_id": f"e:{tid}:1", "trial_id": tid, "started_at": begin, "worker_id": "w"},
                end + retrieval)
            add("result_received", {"task_id": f"e:{tid}:1", "trial_id": tid, "status": "valid",
                                    "started_at": begin, "finished_at": end, "received_at": end + retrieval,
                                    "worker_id": "w", "decision": "finalize"}, end + retrieval)
            add("trial_finalized", {"trial_id": tid, "status": "valid", "objectives": [1.0, 1.0]}, end + retrieval)
            add("hv_computed", {"trial_index": tid + 1, "trial_id": tid, "hypervolume": 0.1 * (tid + 1),
                                "hv_stderr": 0.0, "archive_size": 1}, end + retrieval)
        clock = end + retrieval
    return events


class TestJournalFile:
    def test_sequences_and_reopen(self, tmp_path):
        path = tmp_path / "j.jsonl"
        j = Journal(path, HEADER)
        assert [j.append("warning", {"i": i}) for i in range(3)] == [0, 1, 2]
        j.close()
        contents = read_journal(path)
        assert contents.header["seed"] == 7 and contents.header["schema_version"] == "1"
        assert [e["payload"]["i"] for e in contents.events] == [0, 1, 2]
        again = Journal(path, HEADER)
        assert again.append("warning", {"i": 3}) == 3
        again.close()

    def test_one_canonical_json_line_per_event(self, tmp_path):
        path = tmp_path / "j.jsonl"
        j = Journal(path, HEADER)
        j.append("warning", {"b": 1, "a": 2})
        j.close()
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[1] == json.dumps(json.loads(lines[1]), sort_keys=True, separators=(",", ":"))

    def test_torn_tail_truncated_with_warning(self, tmp_path):
        path = tmp_path / "j.jsonl"
        j = Journal(path, HEADER)
        j.append("warning", {"i": 0})
        j.close()
        with open(path, "ab") as fh:
            fh.write(b'{"kind":"warning","payl')
        assert read_journal(path).truncated_bytes > 0
        j = Journal(path, HEADER)
        j.close()
        events = read_journal(path).events
        assert [e["kind"] for e in events] == ["warning", "warning"]
        assert events[1]["payload"]["code"] == "journal_tail_truncated"
        assert read_journal(path).truncated_bytes == 0

    def test_unknown_kind_refused(self, tmp_path):
        j = Journal(tmp_path / "j.jsonl", HEADER)
        with pytest.raises(JournalError):
            j.append("party", {})
        j.close()

    def test_refuses_foreign_file(self, tmp_path):
        path = tmp_path / "notes.txt"
        path.write_text("hello\nworld\n")
        with pytest.raises(JournalError):
            Journal(path, HEADER)
        assert path.read_text() == "hello\nworld\n"

    def test_append_many_is_one_batch(self, tmp_path):
        j = Journal(tmp_path / "j.jsonl", HEADER)
        assert j.append_many([("warning", {"i": 0}), ("warning", {"i": 1})]) == [0, 1]
        j.close()


class TestAudit:
    def test_clean_synthetic_run(self):
        assert audit(synthetic(6, 1.0, slots=2), require_complete=True).ok

    def test_result_before_submit_flagged(self):
        events = synthetic(1, 1.0)
        sub = next(i for i, e in enumerate(events) if e["kind"] == "task_submitted")
        res = next(i for i, e in enumerate(events) if e["kind"] == "result_received")
        events[sub], events[res] = events[res], events[sub]
        for i, e in enumerate(events):
            e["seq"] = i
        report = audit(events)
        assert not report.ok and any("never submitted" in p for p in report.problems)

    def test_double_finalize_flagged(self):
        events = synthetic(2, 1.0)
        fin = next(e for e in events if e["kind"] == "trial_finalized")
        events.append({**fin, "seq": len(events)})
        assert any("finalized 2 times" in p for p in audit(events).problems)

    def test_finalize_without_proposal_flagged(self):
        events = synthetic(1, 1.0)
        events.append({"seq": len(events), "wall_time": 0.0, "kind": "trial_finalized",
                       "payload": {"trial_id": 9, "status": "failed", "objectives": None}})
        assert any("before it was proposed" in p for p in audit(events).problems)

    def test_hv_decrease_flagged(self):
        events = synthetic(3, 1.0)
        last = [e for e in events if e["kind"] == "hv_computed"][-1]
        last["payload"]["hypervolume"] = 0.0
        assert any("decreased" in p for p in audit(events).problems)

    def test_incomplete_only_flagged_when_required(self):
        events = synthetic(2, 1.0)
        events = [e for e in events if not (e["kind"] == "trial_finalized" and e["payload"]["trial_id"] == 1)]
        for i, e in enumerate(events):
            e["seq"] = i
        assert audit(events).ok
        assert any("never finalized" in p for p in audit(events, require_complete=True).problems)


class TestOverhead:
    def test_evaluation_dominated_workload(self):
        report = overhead_report(synthetic(10, 1.0, gen_seconds=0.0, retrieval=0.01))
        assert report.fractions["execution"] > 0.8

    def test_interval_arithmetic(self):
        report = overhead_report(synthetic(4, 2.0, gen_seconds=0.5, queue=0.25, retrieval=0.1))
        assert report.totals["generation"] == pytest.approx(2.0)
        assert report.totals["queue"] == pytest.approx(1.0)
        assert report.totals["execution"] == pytest.approx(8.0)
        assert report.totals["retrieval"] == pytest.approx(0.4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.floats(0.01, 5), st.floats(0, 2), st.integers(1, 4), st.floats(0, 1),
           st.floats(0, 1))
    def test_fractions_sum_to_one(self, n, ev, gen, slots, queue, ret):
        report = overhead_report(synthetic(n, ev, gen, slots, queue, ret))
        assert sum(report.fractions.values()) == pytest.approx(1.0, abs=0.01)

    def test_serial_profile_peaks_at_one(self):
        assert overhead_report(synthetic(5, 1.0, slots=1)).max_concurrency == 1

    def test_batched_profile_peaks_at_slots(self):
        profile = concurrency_profile(synthetic(8, 1.0, slots=4))
        assert max(c for _, c in profile) == 4
        assert profile[0][0] == pytest.approx(0.0)

    def test_makespan_is_union_of_intervals(self):
        assert evaluation_makespan(synthetic(6, 1.0, gen_seconds=5.0, slots=2)) == pytest.approx(3.0)

    def test_traces_cover_every_trial(self):
        traces = timing_traces(synthetic(3, 1.0, queue=0.5))
        assert sorted(traces) == [0, 1, 2]
        assert all(t.attempts == 1 and t.queue == pytest.approx(0.5) for t in traces.values())


class TestReports:
    def test_columns_and_rows(self):
        csvs = render_reports(synthetic(5, 1.0))
        assert set(csvs) == set(REPORT_FILES)
        for name, columns in REPORT_FILES.items():
            assert csvs[name].splitlines()[0] == ",".join(columns)
        assert len(csvs["hv_vs_trials.csv"].splitlines()) == 6
        assert [line.split(",")[0] for line in csvs["overhead.csv"].splitlines()[1:]] == list(INTERVAL_CLASSES)

    def test_empty_journal_gives_headers_only(self):
        csvs = render_reports([])
        assert all(text.count("\n") == 1 for text in csvs.values())

    def test_rendering_is_pure(self):
        events = synthetic(4, 0.5, slots=2)
        assert render_reports(events) == render_reports(json.loads(json.dumps(events)))

    def test_summary_mentions_counts_and_hv(self):
        text = summary(synthetic(3, 1.0))
        assert "trials finalized: 3 (valid 3" in text and "final hypervolume: 0.300000" in text
