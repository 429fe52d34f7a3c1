import filecmp
import json
import os
import shutil
import subprocess

import pytest

from dalvq.cli import (EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SCHEDULE, main,
                       parse_config)
from dalvq.engine import RunConfig, StepPolicy
from dalvq.errors import ConfigError
from dalvq.measures import DistributionSpec
from dalvq.schedule import ScheduleSpec


BOX = DistributionSpec.uniform_box([0.0, 0.0], [1.0, 1.0])
RING = ScheduleSpec(topology="ring", merge_period=2, delay_law="fixed",
                    delay_value=2, activity="round-robin")
IDLE = ScheduleSpec(topology="ring", merge_period=2, delay_law="fixed",
                    delay_value=2, activity="none")


def config_doc(mode="dalvq", **kw):
    base = dict(M=3, kappa=2, dim=2, horizon=40, dist=BOX, sched=RING,
                step=StepPolicy("local-clock", 0.5), seed=5, n_ref=120, cadence=10)
    base.update(kw)
    return {"mode": mode, **RunConfig(**base).to_dict()}


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---- config parsing ----


class TestParseConfig:
    def test_defaults_to_dalvq(self):
        cfg = parse_config(config_doc())
        assert cfg.mode == "dalvq"
        assert cfg.run.M == 3

    def test_unknown_key_rejected(self):
        doc = config_doc()
        doc["bogus"] = 1
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            parse_config(config_doc(mode="warp"))

    def test_not_an_object(self):
        with pytest.raises(ConfigError):
            parse_config([1, 2])

    def test_seed_override(self):
        cfg = parse_config(config_doc(), seed_override=99)
        assert cfg.run.seed == 99

    def test_sequential_baseline_requires_global_clock(self):
        with pytest.raises(ConfigError):
            parse_config(config_doc(mode="clvq-baseline"))
        cfg = parse_config(config_doc(mode="clvq-baseline",
                                      step=StepPolicy("global-clock", 0.5)))
        assert cfg.run.step.kind == "global-clock"


# ---- run command per mode ----


class TestRunModes:
    def test_dalvq_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, config_doc())
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out]) == EXIT_OK
        names = sorted(os.listdir(out))
        assert names == ["effective-config.json", "final-quantizers.json",
                         "metrics.csv", "report.json", "schedule-trace.jsonl",
                         "timing.json"]
        rep = read_json(os.path.join(out, "report.json"))
        assert rep["mode"] == "dalvq"
        assert rep["validation"]["passed"] is True
        assert "worst_bound_ratio" in rep and "constants" in rep
        fq = read_json(os.path.join(out, "final-quantizers.json"))
        assert len(fq["processors"]) == 3
        assert len(fq["agreement"]) == 2 and len(fq["agreement"][0]) == 2
        eff = read_json(os.path.join(out, "effective-config.json"))
        assert eff["mode"] == "dalvq" and eff["seed"] == 5
        assert rep["fingerprint"] == eff["fingerprint"]
        with open(os.path.join(out, "metrics.csv")) as fh:
            header = fh.readline().strip().split(",")
        assert header[0] == "t" and "agreement_gap" in header

    def test_clvq_baseline_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, config_doc(
            mode="clvq-baseline", step=StepPolicy("global-clock", 0.5)))
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out]) == EXIT_OK
        names = sorted(os.listdir(out))
        assert "metrics.csv" not in names
        rep = read_json(os.path.join(out, "report.json"))
        assert rep["mode"] == "clvq-baseline"
        assert rep["iterations"] == 40
        assert rep["distortion"] > 0

    def test_lloyd_baseline_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, config_doc(mode="lloyd-baseline"))
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out]) == EXIT_OK
        rep = read_json(os.path.join(out, "report.json"))
        assert rep["mode"] == "lloyd-baseline"
        assert rep["converged"] is True

    def test_agreement_only_artifacts(self, tmp_path):
        # distinct starts, else the merge iteration has nothing to contract
        cfg = write_config(tmp_path, config_doc(mode="agreement-only",
                                                init="per-processor"))
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out]) == EXIT_OK
        rep = read_json(os.path.join(out, "report.json"))
        assert 0.0 <= rep["rho_fit"] < 1.0
        assert rep["final_gap"] < rep["initial_gap"]
        with open(os.path.join(out, "decay.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "t,consensus_gap"
        assert len(lines) == 42  # header + ticks 0..40

    def test_validate_only_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, config_doc(mode="validate-only"))
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out]) == EXIT_OK
        names = sorted(os.listdir(out))
        assert names == ["effective-config.json", "timing.json", "validation.json"]
        assert read_json(os.path.join(out, "validation.json"))["passed"] is True

    def test_validate_only_failing_schedule_exits_3(self, tmp_path):
        cfg = write_config(tmp_path, config_doc(mode="validate-only", sched=IDLE))
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out]) == EXIT_SCHEDULE
        assert read_json(os.path.join(out, "validation.json"))["passed"] is False


# ---- schedule gating ----


class TestScheduleGate:
    def test_invalid_schedule_blocks_run(self, tmp_path):
        cfg = write_config(tmp_path, config_doc(sched=IDLE))
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg, "--out", out]) == EXIT_SCHEDULE
        assert not os.path.exists(os.path.join(out, "report.json"))

    def test_allow_invalid_schedule_proceeds(self, tmp_path):
        cfg = write_config(tmp_path, config_doc(mode="agreement-only", sched=IDLE))
        out = str(tmp_path / "out")
        code = main(["run", "--config", cfg, "--out", out,
                     "--allow-invalid-schedule"])
        assert code == EXIT_OK
        rep = read_json(os.path.join(out, "report.json"))
        assert rep["validation"]["passed"] is False


# ---- determinism and the seed flag ----


class TestDeterminism:
    def test_artifacts_byte_identical_across_reruns(self, tmp_path):
        cfg = write_config(tmp_path, config_doc())
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["run", "--config", cfg, "--out", a]) == EXIT_OK
        assert main(["run", "--config", cfg, "--out", b]) == EXIT_OK
        for name in ("metrics.csv", "report.json", "final-quantizers.json",
                     "effective-config.json", "schedule-trace.jsonl"):
            assert filecmp.cmp(os.path.join(a, name), os.path.join(b, name),
                               shallow=False), name

    def test_seed_override_changes_results(self, tmp_path):
        cfg = write_config(tmp_path, config_doc())
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["run", "--config", cfg, "--out", a]) == EXIT_OK
        assert main(["run", "--config", cfg, "--seed", "9", "--out", b]) == EXIT_OK
        ea, eb = (read_json(os.path.join(d, "effective-config.json")) for d in (a, b))
        assert ea["seed"] == 5 and eb["seed"] == 9
        assert ea["fingerprint"] != eb["fingerprint"]
        assert not filecmp.cmp(os.path.join(a, "metrics.csv"),
                               os.path.join(b, "metrics.csv"), shallow=False)


# ---- exit codes ----


class TestExitCodes:
    def test_config_error(self, tmp_path):
        doc = config_doc()
        doc["bogus"] = 1
        cfg = write_config(tmp_path, doc)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == EXIT_IO

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert main(["run", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == EXIT_IO


# ---- report, validate-schedule, phi-table ----


class TestReportCommand:
    def test_tabulates_runs(self, tmp_path, capsys):
        cfg = write_config(tmp_path, config_doc())
        out = str(tmp_path / "out")
        main(["run", "--config", cfg, "--out", out])
        capsys.readouterr()
        assert main(["report", out, out]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("run_dir,mode,seed,fingerprint,distortion")
        assert len(lines) == 3
        cells = lines[1].split(",")
        assert cells[0] == out and cells[1] == "dalvq" and cells[2] == "5"


class TestValidateScheduleCommand:
    def test_passing(self, tmp_path):
        cfg = write_config(tmp_path, config_doc())
        out = str(tmp_path / "v.json")
        assert main(["validate-schedule", "--config", cfg, "--out", out]) == EXIT_OK
        assert read_json(out)["passed"] is True

    def test_failing(self, tmp_path, capsys):
        cfg = write_config(tmp_path, config_doc(sched=IDLE))
        assert main(["validate-schedule", "--config", cfg]) == EXIT_SCHEDULE
        payload = json.loads(capsys.readouterr().out)
        assert payload["passed"] is False


class TestPhiTableCommand:
    def test_writes_table(self, tmp_path):
        cfg = write_config(tmp_path, config_doc())
        out = str(tmp_path / "phi.json")
        assert main(["phi-table", "--config", cfg, "--t", "12", "--out", out]) == EXIT_OK
        payload = read_json(out)
        assert payload["t"] == 12 and payload["M"] == 3
        assert len(payload["limits"]["phi"]) == 12
        assert len(payload["limits"]["phi_init"]) == 3
        taus = {rec["tau"] for rec in payload["records"]}
        assert -1 in taus and 11 in taus

    def test_t_out_of_range(self, tmp_path):
        cfg = write_config(tmp_path, config_doc())
        assert main(["phi-table", "--config", cfg, "--t", "41",
                     "--out", str(tmp_path / "x.json")]) == EXIT_CONFIG


class TestInstalledScript:
    def test_console_entry_point(self, tmp_path):
        exe = shutil.which("dalvq")
        assert exe is not None
        cfg = write_config(tmp_path, config_doc(mode="validate-only"))
        proc = subprocess.run([exe, "run", "--config", cfg,
                               "--out", str(tmp_path / "out")], capture_output=True)
        assert proc.returncode == EXIT_OK
