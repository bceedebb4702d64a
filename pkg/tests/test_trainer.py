import csv
import json

import numpy as np
import pytest
import torch

from scida.dwc import PseudoLabelSet
from scida.errors import ConfigError, DivergenceError
from scida.lwc import step_self_correction  # noqa: F401  (patched in a test)
from scida.metrics import f_beta
from scida.models import LWC_GROUPS, parameter_hashes
from scida.report import CURVE_COLUMNS, emit_report
from scida.trainer import (
    TrainLog,
    ablate_delta,
    checkpoint_path,
    churn_rate,
    evaluate_run,
    final_pseudo_labels,
    load_run_data,
    table_digest,
    train,
)

from conftest import tiny_config


class TestStopping:
    def test_eps_one_stops_after_patience(self):
        cfg = tiny_config(eps_conv=1.0, max_epochs=10)
        _, log = train(cfg)
        assert len(log) == 3 and log.stop_reason.startswith("converged")

    def test_max_epochs(self):
        _, log = train(tiny_config(eps_conv=0.0, max_epochs=2))
        assert len(log) == 2 and log.stop_reason == "max_epochs"

    def test_convergence_contract(self, tmp_path):
        cfg = tiny_config(eps_conv=1.0, max_epochs=10)
        state, log = train(cfg, out_dir=tmp_path)
        data = load_run_data(cfg)
        final = final_pseudo_labels(state, data.target)
        last = np.asarray(state.extra["previous_pseudo"], dtype=np.uint8)
        assert np.array_equal(final.labels, last)
        saved = PseudoLabelSet.from_json(json.loads((tmp_path / "pseudo_labels.json").read_text()), 4)
        assert np.array_equal(saved.labels, last)


class TestRecords:
    def test_record_fields_and_modes(self):
        _, log = train(tiny_config(max_epochs=2, eps_conv=0.0))
        r = log.records[0]
        assert set(r) == {"epoch", "wfl", "dis", "selfcorr", "churn", "adjacency_hash", "metrics"}
        assert set(r["metrics"]) == {"all", "top3"}
        assert [x["epoch"] for x in log.records] == [1, 2]

    @pytest.mark.parametrize("mode", ["source_only", "dwc_only"])
    def test_ablation_modes_leave_lwc_untouched(self, mode):
        cfg = tiny_config(mode=mode, max_epochs=2, eps_conv=0.0)
        from conftest import tiny_state

        fresh, _ = tiny_state(cfg)
        state, log = train(cfg)
        before, after = parameter_hashes(fresh.model), parameter_hashes(state.model)
        assert all(before[g] == after[g] for g in LWC_GROUPS)
        assert all(r["selfcorr"] is None for r in log.records)
        if mode == "source_only":
            assert all(r["dis"] is None for r in log.records)
            assert before["c1"] != after["c1"]

    def test_stage_isolation(self):
        seen = {}
        problems = []

        def observer(phase, state):
            hashes = parameter_hashes(state.model)
            if phase == "dwc_done" and any(hashes[g] != seen["epoch_start"][g] for g in LWC_GROUPS):
                problems.append(("lwc moved during pseudo-label generation", state.epoch))
            if phase == "eval_done" and hashes != seen["selfcorr_done"]:
                problems.append(("evaluation mutated parameters", state.epoch))
            seen[phase] = hashes

        train(tiny_config(max_epochs=2, eps_conv=0.0), observer=observer)
        assert not problems and set(seen) == {"epoch_start", "dwc_done", "selfcorr_done", "eval_done"}

    def test_log_validation(self):
        log = TrainLog()
        log.append({"epoch": 1, "churn": 0.5})
        with pytest.raises(ValueError):
            log.append({"epoch": 1, "churn": 0.5})
        with pytest.raises(ValueError):
            log.append({"epoch": 2, "churn": 1.5})

    def test_churn_rate(self):
        a = np.array([[1, 0], [0, 1], [1, 0], [1, 0]])
        b = np.array([[1, 0], [1, 0], [1, 0], [0, 1]])
        assert churn_rate(a, b) == 0.5 and churn_rate(a, a) == 0.0

    def test_divergence_names_step(self, monkeypatch):
        cfg = tiny_config(max_epochs=1)
        from conftest import tiny_state

        state, data = tiny_state(cfg)
        with torch.no_grad():
            state.model.c1.fc2.bias.fill_(float("nan"))
        from scida.dwc import iterate_domain_batches, step_source_supervised

        batch = next(iterate_domain_batches(data.source, data.target, 4, 0, 0))
        with pytest.raises(DivergenceError, match="step_source_supervised"):
            step_source_supervised(state, batch)


class TestDeterminismAndResume:
    def test_identical_config_identical_hash(self):
        cfg = tiny_config(max_epochs=2, eps_conv=0.0)
        assert train(cfg)[1].hash() == train(cfg)[1].hash()

    def test_seed_changes_hash(self):
        a = train(tiny_config(max_epochs=1))[1].hash()
        b = train(tiny_config(max_epochs=1, seed=1))[1].hash()
        assert a != b

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tiny_config(max_epochs=3, eps_conv=0.0)
        _, full = train(cfg)
        _, part = train(cfg, out_dir=tmp_path, stop_after=1)
        assert len(part) == 1
        sidecar = json.loads((tmp_path / "checkpoint.scida.json").read_text())
        assert sidecar["epoch"] == 1 and sidecar["config_hash"] == cfg.hash()
        _, resumed = train(cfg, out_dir=tmp_path, resume=checkpoint_path(tmp_path))
        assert resumed.records == full.records
        assert resumed.hash() == full.hash()

    def test_resume_rejects_other_config(self, tmp_path):
        cfg = tiny_config(max_epochs=2)
        train(cfg, out_dir=tmp_path, stop_after=1)
        with pytest.raises(ConfigError):
            train(cfg.with_(delta=0.25), resume=checkpoint_path(tmp_path))


class TestEvaluate:
    def test_identity_and_shape(self):
        cfg = tiny_config(max_epochs=1)
        state, _ = train(cfg)
        data = load_run_data(cfg)
        reports = evaluate_run(state, data.target_eval)
        assert [r.mode for r in reports] == ["all", "top3"]
        for r in reports:
            assert set(r.to_json()) == {"mode", "op", "or", "of1", "of2", "threshold"}
            if r.op + r.or_ > 0:
                assert r.of1 == pytest.approx(f_beta(r.op, r.or_, 1), abs=1e-6)
                assert r.of2 == pytest.approx(f_beta(r.op, r.or_, 2), abs=1e-6)

    def test_unlabeled_rejected(self):
        cfg = tiny_config(max_epochs=1)
        state, _ = train(cfg)
        with pytest.raises(ValueError):
            evaluate_run(state, load_run_data(cfg).target)


class TestReport:
    def test_schema(self, tmp_path):
        _, log = train(tiny_config(max_epochs=2, eps_conv=0.0))
        emit_report(log, tmp_path)
        with open(tmp_path / "curve.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(CURVE_COLUMNS) == ["epoch", "wfl", "dis", "selfcorr", "churn", "op", "or", "of1", "of2"]
        assert len(rows) == 3
        for name in ("metrics.json", "config.json", "curves.png", "correlation_counts.csv",
                     "correlation.json", "correlation.png"):
            assert (tmp_path / name).stat().st_size > 0
        doc = json.loads((tmp_path / "metrics.json").read_text())
        assert doc["log_hash"] == log.hash() and len(doc["reports"]) == 2

    def test_one_epoch_log(self, tmp_path):
        _, log = train(tiny_config(max_epochs=1))
        assert len(emit_report(log, tmp_path)) >= 4

    def test_empty_log_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(TrainLog(), tmp_path)

    def test_log_round_trip(self, tmp_path):
        _, log = train(tiny_config(max_epochs=1))
        log.save(tmp_path / "l.json")
        assert TrainLog.load(tmp_path / "l.json").hash() == log.hash()


class TestAblation:
    def test_rows_and_determinism(self, tmp_path):
        cfg = tiny_config(max_epochs=2, eps_conv=0.0)
        rows = ablate_delta(cfg, [0.25, 0.5], out_dir=tmp_path)
        assert [r["delta"] for r in rows] == [0.25, 0.5] and all("error" not in r for r in rows)
        assert table_digest(rows) == table_digest(ablate_delta(cfg, [0.25, 0.5]))
        for name in ("ablation.json", "ablation.csv", "ablation.png"):
            assert (tmp_path / name).exists()

    def test_single_cell_equals_train(self):
        cfg = tiny_config(max_epochs=2, eps_conv=0.0)
        (row,) = ablate_delta(cfg, [0.5])
        assert row["log_hash"] == train(cfg.with_(delta=0.5))[1].hash()

    def test_bad_cell_does_not_sink_sweep(self):
        rows = ablate_delta(tiny_config(max_epochs=1), [0.05, 0.5])
        assert "error" in rows[0] and "error" not in rows[1]
