import csv
import json

import pytest

from oracles import CONFIG_DIR
from umpfssl.cli import main, sweep_cost_percent
from umpfssl.config import config_from_dict

SMOKE = str(CONFIG_DIR / "smoke.json")


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestRun:
    def test_run_writes_reports(self, tmp_path, capsys):
        assert main(["run", "--config", SMOKE, "--out", str(tmp_path / "r")]) == 0
        out = tmp_path / "r"
        for name in ("metrics.csv", "costs.csv", "events.csv", "partition.csv", "summary.csv", "config.json"):
            assert (out / name).exists()
        assert "best mean test accuracy" in capsys.readouterr().out

    def test_local_only_summary(self, tmp_path):
        assert main(["run", "--config", SMOKE, "--out", str(tmp_path), "--method", "local_only"]) == 0
        summary = rows(tmp_path / "summary.csv")
        assert len(summary) == 4
        assert rows(tmp_path / "costs.csv")[-1]["cum_total"] == "0"

    def test_ablation_flag(self, tmp_path):
        assert main(["run", "--config", SMOKE, "--out", str(tmp_path), "--ablation", "ta"]) == 0
        assert json.loads((tmp_path / "config.json").read_text())["ablation"] == "ta"

    def test_repeats(self, tmp_path):
        assert main(["run", "--config", SMOKE, "--out", str(tmp_path), "--repeats", "2"]) == 0
        assert (tmp_path / "repeat_000" / "metrics.csv").exists()
        assert (tmp_path / "repeat_001" / "metrics.csv").exists()
        assert len(rows(tmp_path / "repeats_summary.csv")) == 3
        assert len(rows(tmp_path / "repeats_curve.csv")) == 4

    def test_repeats_do_not_change_earlier_ones(self, tmp_path):
        main(["run", "--config", SMOKE, "--out", str(tmp_path / "a"), "--repeats", "2"])
        main(["run", "--config", SMOKE, "--out", str(tmp_path / "b"), "--repeats", "3"])
        for r in ("repeat_000", "repeat_001"):
            assert ((tmp_path / "a" / r / "metrics.csv").read_bytes()
                    == (tmp_path / "b" / r / "metrics.csv").read_bytes())

    def test_invalid_config_touches_nothing(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"method": "", "output_dir": str(tmp_path / "never")}))
        assert main(["run", "--config", str(bad)]) != 0
        assert not (tmp_path / "never").exists()
        assert "method" in capsys.readouterr().err

    def test_invariant_violation_gives_nonzero_exit(self, tmp_path, monkeypatch, capsys):
        import umpfssl.protocol as protocol
        monkeypatch.setattr(protocol, "audit", lambda trace: ["injected violation"])
        assert main(["run", "--config", SMOKE, "--out", str(tmp_path)]) == 1
        assert "injected violation" in capsys.readouterr().err

    def test_seed_changes_results(self, tmp_path):
        main(["run", "--config", SMOKE, "--out", str(tmp_path / "a"), "--seed", "1"])
        main(["run", "--config", SMOKE, "--out", str(tmp_path / "b"), "--seed", "2"])
        assert (tmp_path / "a" / "events.csv").read_bytes() != (tmp_path / "b" / "events.csv").read_bytes()


def test_idx_dataset_run(tmp_path):
    import numpy as np
    from umpfssl.data import write_idx
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), 20).astype(np.uint8)
    images = (rng.integers(0, 60, size=(60, 3, 3)) + labels[:, None, None] * 90).astype(np.uint8)
    write_idx(images, labels, tmp_path / "img.idx", tmp_path / "lab.idx")
    cfg = json.loads(open(SMOKE).read())
    cfg["dataset"] = {"kind": "idx", "images": str(tmp_path / "img.idx"), "labels": str(tmp_path / "lab.idx"),
                      "limit": 48}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 0
    assert sum(int(r["n_labeled"]) + int(r["n_unlabeled"]) for r in rows(tmp_path / "o" / "partition.csv")) <= 48


class TestOtherCommands:
    def test_partition(self, tmp_path, capsys):
        assert main(["partition", "--config", SMOKE, "--out", str(tmp_path)]) == 0
        assert len(rows(tmp_path / "partition.csv")) == 4
        assert "client   0" in capsys.readouterr().out

    def test_report(self, tmp_path, capsys):
        main(["run", "--config", SMOKE, "--out", str(tmp_path)])
        capsys.readouterr()
        assert main(["report", "--out", str(tmp_path)]) == 0
        assert "best mean test accuracy" in capsys.readouterr().out
        assert main(["report", "--out", str(tmp_path / "none")]) == 1

    def test_sweep(self, tmp_path):
        assert main(["sweep", "--config", SMOKE, "--out", str(tmp_path), "--axis", "nu",
                     "--values", "1,2"]) == 0
        sweep = rows(tmp_path / "sweep.csv")
        assert [r["value"] for r in sweep] == ["1", "2"]
        assert float(sweep[0]["cost_percent"]) == 100.0
        assert (tmp_path / "nu_01" / "metrics.csv").exists()

    def test_alpha_grid(self, tmp_path):
        assert main(["sweep", "--config", SMOKE, "--out", str(tmp_path), "--axis", "alpha",
                     "--values", "0.5,1,5,10"]) == 0
        assert [r["value"] for r in rows(tmp_path / "sweep.csv")] == ["0.5", "1.0", "5.0", "10.0"]

    def test_empty_sweep_grid(self, tmp_path):
        assert main(["sweep", "--config", SMOKE, "--out", str(tmp_path / "s"), "--axis", "F",
                     "--values", ","]) != 0
        assert not (tmp_path / "s").exists()

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            main(["train"])


class TestSweepCost:
    def test_reference_update_period_column(self):
        cfg = config_from_dict({"method": "um_pfssl"})
        got = [round(sweep_cost_percent(cfg, "nu", v), 2) for v in (1, 5, 10, 15, 20)]
        assert got == [100.0, 25.93, 16.67, 13.58, 12.04]
        assert all(a > b for a, b in zip(got, got[1:]))

    def test_sample_rate_axis_baseline(self):
        cfg = config_from_dict({"method": "um_pfssl"})
        assert sweep_cost_percent(cfg, "tau", 1.0) == 100.0
        assert sweep_cost_percent(cfg, "F", 200) == 100.0

    def test_alpha_axis_is_fraction_of_greedy_cost(self):
        cfg = config_from_dict({"method": "um_pfssl"})
        assert sweep_cost_percent(cfg, "alpha", 0.5) == pytest.approx(9.0)
