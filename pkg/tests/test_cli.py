"""End-to-end CLI behaviour: simulate, monitor, calibrate."""

import json
import os
import subprocess
import sys

from edetect import cli

REPLAY_CONFIG = {
    "name": "replay",
    "streams": 4,
    "horizon": 30,
    "replications": 2,
    "seed": 424,
    "generator": {
        "family": "gaussian-mean-change",
        "delta": 1.0,
        "changepoints": {"streams": [0, 1], "at": 12},
    },
    "detector": {"kind": "gaussian-sr", "delta": 1.0},
    "rules": [{"name": "edbh", "schedule": {"kind": "constant", "base": 0.05}}],
    "metrics": ["fdr"],
    "persist_data": True,
    "log_frames": True,
}


def write_config(tmp_path, raw, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def run_cli(args, stdin_text=None):
    proc = subprocess.run(
        [sys.executable, "-m", "edetect.cli", *args],
        input=stdin_text, capture_output=True, text=True,
    )
    return proc


class TestSimulate:
    def test_writes_artifacts(self, tmp_path):
        config = write_config(tmp_path, REPLAY_CONFIG)
        out = tmp_path / "out"
        rc = cli.main(["simulate", "--config", config, "--out", str(out)])
        assert rc == 0
        for artifact in ("metrics.csv", "replications.jsonl", "frames.jsonl",
                         "data.jsonl", "manifest.json"):
            assert (out / artifact).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 424
        assert len(manifest["config_sha256"]) == 64

    def test_rerun_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path, REPLAY_CONFIG)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(["simulate", "--config", config, "--out", str(out1)]) == 0
        assert cli.main(["simulate", "--config", config, "--out", str(out2)]) == 0
        for artifact in ("metrics.csv", "replications.jsonl", "frames.jsonl",
                         "data.jsonl", "manifest.json"):
            assert (out1 / artifact).read_bytes() == (out2 / artifact).read_bytes()

    def test_serial_vs_parallel_byte_identical(self, tmp_path):
        raw = dict(REPLAY_CONFIG, replications=9)
        config = write_config(tmp_path, raw)
        out1, out2 = tmp_path / "serial", tmp_path / "parallel"
        assert cli.main(["simulate", "--config", config, "--out", str(out1),
                         "--workers", "1"]) == 0
        assert cli.main(["simulate", "--config", config, "--out", str(out2),
                         "--workers", "3"]) == 0
        for artifact in ("metrics.csv", "replications.jsonl", "data.jsonl"):
            assert (out1 / artifact).read_bytes() == (out2 / artifact).read_bytes()

    def test_zero_reps_is_a_config_error(self, tmp_path):
        config = write_config(tmp_path, dict(REPLAY_CONFIG, replications=0))
        rc = cli.main(["simulate", "--config", config, "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_CONFIG

    def test_invalid_config_names_field(self, tmp_path):
        raw = dict(REPLAY_CONFIG)
        raw["detector"] = {"kind": "bogus"}
        config = write_config(tmp_path, raw)
        proc = run_cli(["simulate", "--config", config, "--out", str(tmp_path / "o")])
        assert proc.returncode == cli.EXIT_CONFIG
        assert "detector" in proc.stderr

    def test_shipped_fixture_parses(self, tmp_path):
        fixture = os.path.join(os.path.dirname(__file__), "..", "configs",
                               "gaussian_mean_change.json")
        rc = cli.main(["simulate", "--config", fixture,
                       "--out", str(tmp_path / "o"), "--reps", "4"])
        assert rc == 0


class TestMonitor:
    def records(self, rows):
        return "".join(json.dumps(r) + "\n" for r in rows)

    def test_replay_matches_simulate_frames(self, tmp_path):
        config = write_config(tmp_path, REPLAY_CONFIG)
        out = tmp_path / "out"
        assert cli.main(["simulate", "--config", config, "--out", str(out)]) == 0
        data = [json.loads(l) for l in (out / "data.jsonl").read_text().splitlines()]
        stream_in = self.records(
            {"t": r["t"], "x": r["x"]} for r in data if r["replication"] == 0)
        proc = run_cli(["monitor", "--rule", "edbh",
                        "--detector", "gaussian-sr:delta=1",
                        "--alpha", "0.05"], stdin_text=stream_in)
        assert proc.returncode == 0
        events = [json.loads(l) for l in proc.stdout.splitlines()]
        frames = [json.loads(l)
                  for l in (out / "frames.jsonl").read_text().splitlines()
                  if json.loads(l)["replication"] == 0]
        assert len(events) == len(frames) == REPLAY_CONFIG["horizon"]
        for event, frame in zip(events, frames):
            assert event["t"] == frame["t"]
            assert event["k_star"] == frame["k_star"]
            assert event["selected"] == frame["selected"]

    def test_all_zero_symmetry_never_detects(self):
        # h(0) = 0 pins every delay process at 1, so the max-form detector
        # sits at 1 forever (the sum form grows like t by construction)
        stream_in = self.records({"t": t, "x": [0.0, 0.0]} for t in range(1, 201))
        proc = run_cli(["monitor", "--rule", "edbh",
                        "--detector", "symmetry-cusum:lam=0.5",
                        "--alpha", "0.1"], stdin_text=stream_in)
        assert proc.returncode == 0
        lines = proc.stdout.splitlines()
        assert len(lines) == 200
        for line in lines:
            event = json.loads(line)
            assert event["selected"] == []
            assert event["detector_values"] == [1.0, 1.0]

    def test_malformed_skipped_by_default_aborts_in_strict(self):
        rows = [{"t": 1, "x": [0.0]}, {"bad": True}, {"t": 2, "x": [0.0]}]
        stream_in = self.records(rows)
        proc = run_cli(["monitor", "--rule", "edbonf",
                        "--detector", "gaussian-sr:delta=1",
                        "--alpha", "0.5"], stdin_text=stream_in)
        assert proc.returncode == 0
        assert len(proc.stdout.splitlines()) == 2
        assert "skipping" in proc.stderr
        strict = run_cli(["monitor", "--rule", "edbonf",
                          "--detector", "gaussian-sr:delta=1",
                          "--alpha", "0.5", "--strict"], stdin_text=stream_in)
        assert strict.returncode == cli.EXIT_STREAM

    def test_decreasing_t_aborts(self):
        stream_in = self.records([{"t": 2, "x": [0.0]}, {"t": 1, "x": [0.0]}])
        proc = run_cli(["monitor", "--rule", "edbh",
                        "--detector", "gaussian-sr:delta=1",
                        "--alpha", "0.1"], stdin_text=stream_in)
        assert proc.returncode == cli.EXIT_STREAM

    def test_stream_count_change_aborts(self):
        stream_in = self.records([{"t": 1, "x": [0.0, 0.0]}, {"t": 2, "x": [0.0]}])
        proc = run_cli(["monitor", "--rule", "edbh",
                        "--detector", "gaussian-sr:delta=1",
                        "--alpha", "0.1"], stdin_text=stream_in)
        assert proc.returncode == cli.EXIT_STREAM
        assert "stream count changed" in proc.stderr

    def test_gnt_events(self):
        stream_in = self.records({"t": t, "x": [10.0, 10.0]} for t in range(1, 6))
        proc = run_cli(["monitor", "--rule", "edgnt",
                        "--detector", "gaussian-sr:delta=1",
                        "--alpha", "0.2"], stdin_text=stream_in)
        assert proc.returncode == 0
        events = [json.loads(l) for l in proc.stdout.splitlines()]
        assert any(e["fired"] for e in events)

    def test_over_t_schedule_argument(self):
        stream_in = self.records({"t": t, "x": [0.0]} for t in range(1, 4))
        proc = run_cli(["monitor", "--rule", "edbh",
                        "--detector", "gaussian-sr:delta=1",
                        "--alpha", "0.05/t"], stdin_text=stream_in)
        assert proc.returncode == 0


class TestCalibrate:
    def test_fixture_calibration_reproducible(self, tmp_path):
        fixture = os.path.join(os.path.dirname(__file__), "..", "configs",
                               "calibration_gaussian.json")
        out1, out2 = tmp_path / "c1", tmp_path / "c2"
        assert cli.main(["calibrate", "--config", fixture, "--target-arl", "100",
                         "--out", str(out1)]) == 0
        assert cli.main(["calibrate", "--config", fixture, "--target-arl", "100",
                         "--out", str(out2)]) == 0
        a = json.loads((out1 / "calibration.json").read_text())
        b = json.loads((out2 / "calibration.json").read_text())
        assert a == b
        assert a["status"] == "ok"
        assert 1.0 < a["c_alpha"] < 100.0
        assert a["achieved_arl"] >= 100.0

    def test_unreachable_target_exit_code(self, tmp_path):
        fixture = os.path.join(os.path.dirname(__file__), "..", "configs",
                               "calibration_gaussian.json")
        proc = run_cli(["calibrate", "--config", fixture, "--target-arl", "399"])
        assert proc.returncode == cli.EXIT_CALIBRATION
        report = json.loads(proc.stdout)
        assert report["status"] == "failed"
        assert report["best_arl"] > 0

    def test_non_constant_schedule_rejected(self, tmp_path):
        raw = dict(REPLAY_CONFIG)
        raw["rules"] = [{"name": "edbh", "schedule": {"kind": "over-t", "base": 0.05}}]
        config = write_config(tmp_path, raw)
        rc = cli.main(["calibrate", "--config", config, "--target-arl", "5"])
        assert rc == cli.EXIT_CONFIG


class TestSeedEnvironment:
    def test_seed_env_var_used_when_config_omits_it(self, tmp_path, monkeypatch):
        raw = dict(REPLAY_CONFIG)
        raw.pop("seed")
        raw.update(persist_data=False, log_frames=False)
        config = write_config(tmp_path, raw)
        monkeypatch.setenv("EDETECT_SEED", "777")
        out = tmp_path / "o"
        assert cli.main(["simulate", "--config", config, "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 777
