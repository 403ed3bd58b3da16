import csv
import subprocess
import sys

import numpy as np
import pytest

from fedppa.cli import EXIT_CONFIG, EXIT_DATA, EXIT_FAIL, EXIT_OK, main

SYNTH = [
    "data.source=synth",
    "synth_per_class=12",
    "synth_test_per_class=4",
    "synth_image_size=12",
    "num_clients=4",
    "min_samples=8",
    "rounds=2",
    "local_epochs=1",
    "steps_per_layer=1",
    "sample_cap=32",
    "record_seconds=false",
]


def entropy_table(out):
    """Per-client weights and the reported sum/variance from entropy-report stdout."""
    lines = out.strip().splitlines()
    weights = [float(line.split()[2]) for line in lines[1:-2]]
    total = float(lines[-2].split()[1])
    variance = float(lines[-1].split()[1])
    return weights, total, variance


def test_run_writes_every_artifact_into_output_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "-o", str(out), "-q", "strategies=maxcommon,fedppa+"] + SYNTH) == EXIT_OK
    printed = capsys.readouterr().out
    assert "[best]" in printed and "FedPPA+" in printed
    assert sorted(p.name for p in out.iterdir()) == [
        "accuracy_fedppa_plus.svg",
        "accuracy_maxcommon.svg",
        "metrics_fedppa_plus.csv",
        "metrics_maxcommon.csv",
        "personalized_accuracy.svg",
        "summary.txt",
    ]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out"]


def test_progress_lines_unless_quiet(tmp_path, capsys):
    assert main(["run", "-o", str(tmp_path), "strategies=fedavg", "rounds=1"] + SYNTH[:-5]) == EXIT_OK
    assert "FedAvg    round   1" in capsys.readouterr().out


def test_config_errors_exit_2_and_name_the_key(tmp_path, capsys):
    assert main(["partition-stats", "-o", str(tmp_path), "alpha=-1"]) == EXIT_CONFIG
    assert "partition.alpha" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nrondus = 3\n")
    assert main(["run", "-c", str(bad), "-o", str(tmp_path)]) == EXIT_CONFIG
    assert "run.rondus" in capsys.readouterr().err
    assert main(["run", "-c", str(tmp_path / "nope.toml"), "-o", str(tmp_path)]) == EXIT_CONFIG


def test_missing_dataset_exits_3(tmp_path, capsys):
    gone = [f"data.{k}={tmp_path / k}" for k in ("train_images", "train_labels", "test_images", "test_labels")]
    assert main(["entropy-report", "-o", str(tmp_path / "o"), "data.source=idx"] + gone) == EXIT_DATA
    assert "data error" in capsys.readouterr().err
    assert main(["plot", str(tmp_path / "none.csv"), "-o", str(tmp_path)]) == EXIT_DATA


def test_entropy_report_sums_to_one_and_writes_chart(tmp_path, capsys):
    assert main(["entropy-report", "-o", str(tmp_path), "alpha=0.1"]) == EXIT_OK
    weights, total, _ = entropy_table(capsys.readouterr().out)
    assert len(weights) == 8
    assert abs(sum(weights) - 1.0) <= 1e-5 and abs(total - 1.0) <= 1e-6
    with open(tmp_path / "entropy_weights.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert abs(sum(float(r["weight"]) for r in rows) - 1.0) <= 1e-12
    assert (tmp_path / "entropy_weights.svg").read_text().startswith("<svg")


def test_huge_alpha_gives_near_uniform_bars(tmp_path, capsys):
    assert main(["entropy-report", "-o", str(tmp_path), "alpha=1e6"]) == EXIT_OK
    weights, _, _ = entropy_table(capsys.readouterr().out)
    assert np.allclose(weights, 1 / 8, atol=1e-3)


def test_weight_variance_grows_as_alpha_shrinks(tmp_path, capsys):
    means = []
    for alpha in ("0.5", "0.1", "0.01"):
        variances = []
        for seed in range(20):
            assert main(["entropy-report", "-o", str(tmp_path), f"alpha={alpha}", f"partition.seed={seed}"]) == EXIT_OK
            variances.append(entropy_table(capsys.readouterr().out)[2])
        means.append(np.mean(variances))
    assert means[0] < means[1] < means[2]


def test_partition_stats_table(tmp_path, capsys):
    assert main(["partition-stats", "-o", str(tmp_path), "alpha=0.5"]) == EXIT_OK
    with open(tmp_path / "partition_stats.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert sum(int(r["train"]) + int(r["test"]) for r in rows) == 4000
    for r in rows:
        assert sum(int(r[f"class_{c}"]) for c in range(10)) == int(r["train"])


def test_plot_reads_metrics_csv(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert main(["run", "-o", str(run_dir), "-q", "strategies=fedavg,fedppa"] + SYNTH) == EXIT_OK
    csvs = [str(run_dir / "metrics_fedavg.csv"), str(run_dir / "metrics_fedppa.csv")]
    capsys.readouterr()
    assert main(["plot", *csvs, "-o", str(tmp_path / "plots"), "--metric", "global_acc", "--name", "g.svg"]) == EXIT_OK
    svg = (tmp_path / "plots" / "g.svg").read_text()
    assert "FedAvg" in svg and "FedPPA" in svg
    (tmp_path / "junk.csv").write_text("a,b\n1,2\n")
    assert main(["plot", str(tmp_path / "junk.csv"), "-o", str(tmp_path)]) == EXIT_DATA


def test_verify_passes_and_reports_measurements(capsys):
    assert main(["verify"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    checks = [line for line in lines if line.startswith(("PASS", "FAIL"))]
    assert [line.split()[1] for line in checks] == [
        "gradient_check",
        "entropy_normalization",
        "fedavg_degeneracy",
        "alignment_fixed_point",
    ]
    assert all(line.startswith("PASS") and "measured=" in line and "threshold=" in line for line in checks)


def test_verify_catches_a_corrupted_gradient(capsys):
    assert main(["verify", "--inject-fault", "gradient"]) == EXIT_FAIL
    out = capsys.readouterr().out
    assert "FAIL  gradient_check" in out and "PASS  entropy_normalization" in out


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fedppa", "verify"], capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0 and "all checks passed" in proc.stdout
    assert list(tmp_path.iterdir()) == []
    with pytest.raises(SystemExit):
        main(["frobnicate"])
