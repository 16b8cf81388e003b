import csv
import json
import shutil

import numpy as np
import pytest

from efcpp.cli import ConfigError, ExperimentConfig, aggregate, main
from efcpp.metrics import MetricsReport

TINY = ["--classes", "6", "--steps", "3", "--input-dim", "8", "--train-per-class", "30",
        "--test-per-class", "20", "--shared-dim", "0", "--mean-scale", "4", "--epochs", "2",
        "--rebalance-epochs", "2", "--hidden", "16", "--feature-dim", "8", "--batch-size", "16"]


def run(tmp_path, *args):
    return main([*args, *TINY, "--output", str(tmp_path / "out")])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_missing_data_path_is_a_config_error(tmp_path, capsys):
    assert run(tmp_path, "run", "--data", str(tmp_path / "nope.csv")) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.txt")]) == 2
    assert main(["run", "--steps", "4", "--classes", "6"]) == 2  # 6 classes do not split into 4


def test_run_two_seeds_layout_and_byte_identical_rerun(tmp_path):
    assert run(tmp_path, "run", "--seeds", "1,2") == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["seed_1", "seed_2"]
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["seeds"] == [1, 2] and set(agg["metrics"]) == {"A_step", "A_inc", "F", "PL"}
    lines = (out / "runs.jsonl").read_text().splitlines()
    assert [json.loads(line)["seed"] for line in lines] == [1, 2]
    assert read_csv(out / "seed_1" / "accuracy.csv")[0][0] == "K"
    assert "mode = cold" in (out / "config.txt").read_text()
    names = ["aggregate.json", "runs.jsonl", "seed_1/accuracy.csv", "seed_1/metrics.json",
             "seed_1/tasks.jsonl", "seed_2/accuracy.csv"]
    first = {n: (out / n).read_bytes() for n in names}
    assert run(tmp_path, "run", "--seeds", "1,2") == 0
    for n in names:
        assert (out / n).read_bytes() == first[n], n


def test_aggregate_mean_and_sample_std():
    reps = [MetricsReport(0.5, 0.6, 0.1, 0.7), MetricsReport(0.7, 0.8, 0.3, 0.9)]
    agg = aggregate(reps)
    assert agg["A_step"]["mean"] == pytest.approx(0.6)
    assert agg["A_step"]["std"] == pytest.approx(np.sqrt(0.02))
    assert aggregate(reps[:1])["F"]["std"] == 0.0


def test_ablate_schema(tmp_path):
    assert run(tmp_path, "ablate", "--variants", "fd", "--seeds", "1") == 0
    rows = read_csv(tmp_path / "out" / "ablation.csv")
    assert rows[0] == ["regularizer", "F", "PL", "A_step"]
    assert len(rows) == 2 and rows[1][0] == "fd"
    assert run(tmp_path, "ablate", "--variants", "efm,no_update", "--seeds", "1") == 0
    rows = read_csv(tmp_path / "out" / "ablation.csv")
    assert [r[0] for r in rows[1:]] == ["efm", "no_update"]
    assert run(tmp_path, "ablate", "--variants", "l3") == 2


@pytest.fixture(scope="module")
def checkpointed(tmp_path_factory):
    root = tmp_path_factory.mktemp("ck")
    assert main(["run", *TINY, "--seeds", "1", "--output", str(root / "run")]) == 0
    return root


def test_spectrum_rank_law(checkpointed):
    out = checkpointed / "spectrum"
    assert main(["spectrum", *TINY, "--seeds", "1", "--run-dir", str(checkpointed / "run"),
                 "--output", str(out)]) == 0
    rows = read_csv(out / "rank.csv")
    assert rows[0] == ["task", "classes_seen", "rank_1e-06", "rank_1e-08", "rank_1e-10"]
    for r in rows[1:]:
        assert all(int(v) == int(r[1]) - 1 for v in r[2:])
    spec = read_csv(out / "spectrum.csv")
    assert spec[0] == ["task_index", "eigen_index", "eigenvalue"] and len(spec) == 1 + 3 * 8


def test_perturb_zero_scale(checkpointed):
    out = checkpointed / "pert"
    assert main(["perturb", *TINY, "--seeds", "1", "--run-dir", str(checkpointed / "run"),
                 "--perturb-task", "2", "--perturb-scale", "0", "--output", str(out)]) == 0
    rows = read_csv(out / "perturb.csv")
    assert [r[0] for r in rows[1:]] == ["principal", "non-principal"]
    for r in rows[1:]:
        assert float(r[4]) == 0.0 and float(r[5]) == 0.0 and r[6] == r[7]


def test_drift_outputs(checkpointed):
    out = checkpointed / "drift"
    assert main(["drift", *TINY, "--seeds", "1", "--run-dir", str(checkpointed / "run"),
                 "--output", str(out)]) == 0
    rows = read_csv(out / "drift.csv")
    assert [r[0] for r in rows[1:]] == ["1", "2"] and all(float(r[1]) >= 0 for r in rows[1:])
    assert (out / "drift_task1.csv").exists()
    gaps = read_csv(out / "prototype_gap.csv")
    assert gaps[0] == ["task", "class", "euclidean", "efm"] and len(gaps) == 1 + 2 + 4


def test_drift_on_identical_snapshots_is_zero(checkpointed, tmp_path):
    run_dir = tmp_path / "same"
    ck = run_dir / "seed_1" / "checkpoints"
    shutil.copytree(checkpointed / "run" / "seed_1" / "checkpoints" / "task_0", ck / "task_0")
    shutil.copytree(checkpointed / "run" / "seed_1" / "checkpoints" / "task_0", ck / "task_1")
    assert main(["drift", *TINY, "--seeds", "1", "--run-dir", str(run_dir),
                 "--output", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "drift.csv")
    assert float(rows[1][1]) == 0.0
    per_class = read_csv(tmp_path / "o" / "drift_task1.csv")
    assert all(float(v) == 0.0 for r in per_class[1:] for v in r[1:])


def test_missing_checkpoints_exit_4(tmp_path):
    assert main(["spectrum", *TINY, "--run-dir", str(tmp_path / "empty")]) == 4


def test_config_file_with_flag_override(tmp_path, monkeypatch):
    monkeypatch.setenv("EFCPP_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg_file = tmp_path / "exp.txt"
    cfg_file.write_text("# tiny\nepochs = 1\nseeds = 3\noutput = rel\nstrategy = finetune\n")
    assert main(["run", "--config", str(cfg_file), *TINY[:-8], "--epochs", "1",
                 "--hidden", "8", "--feature-dim", "4", "--strategy", "efcpp",
                 "--checkpoints", "false"]) == 0
    out = tmp_path / "root" / "rel"
    echo = (out / "config.txt").read_text()
    assert "strategy = efcpp" in echo and "epochs = 1" in echo and "seeds = 3" in echo
    assert (out / "seed_3" / "metrics.json").exists()
    assert not (out / "seed_3" / "checkpoints").exists()


def test_config_text_parsing():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("epochs = 3\nepochs = 4\n", "x")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("unknown_key = 3\n", "x")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("epochs 3\n", "x")
    with pytest.raises(ConfigError):
        ExperimentConfig.coerce("epochs", "three")
    parsed = ExperimentConfig.from_text("epochs = 3  # short\nhidden = 32,16\n", "x")
    cfg = ExperimentConfig(**parsed)
    assert cfg.epochs == 3 and cfg.train_config(1).hidden == (32, 16)
    assert ExperimentConfig(**ExperimentConfig.from_text(cfg.to_text(), "echo")) == cfg
