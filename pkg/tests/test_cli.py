import csv
import json

import numpy as np
import pytest

from setvec import cli
from setvec import data as D

SMALL_ARCH = {"channels": [2, 4], "latent_dim": 4, "attention_dim": 3}


@pytest.fixture(scope="module")
def digits_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("digits")
    rng = np.random.default_rng(0)
    for split, n in (("train", 60), ("test", 30)):
        img, lab = D.IDX_NAMES[split]
        (d / img).write_bytes(D.serialize_idx(rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)))
        (d / lab).write_bytes(D.serialize_idx((np.arange(n) % 10).astype(np.uint8)))
    return d


@pytest.fixture
def config(tmp_path, digits_dir):
    cfg = {
        "data": {"digits_dir": str(digits_dir), "n_train": 12, "n_test": 6, "min_size": 2, "max_size": 5},
        "train": {"epochs": 2, "bags_per_step": 4, "val_fraction": 0.0, "lambda1": 1.0, "arch": SMALL_ARCH},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv) -> int:
    return cli.run([str(a) for a in argv])


def prepared(tmp_path, config, name="run"):
    out = tmp_path / name
    assert run("gen-data", "--config", config, "--out", out) == 0
    return out


class TestConfig:
    def test_defaults(self):
        cfg = cli.default_config()
        assert (cfg["data"]["n_train"], cfg["data"]["n_test"]) == (2000, 500)
        assert (cfg["train"]["lambda1"], cfg["train"]["lambda2"]) == (100.0, 0.01)

    def test_override_types(self):
        cfg = cli.resolve_config(None, ["train.lambda1=0", "train.grad_clip=2.5", "data.kind=phantom"], 7)
        assert cfg["train"]["lambda1"] == 0 and cfg["train"]["grad_clip"] == 2.5
        assert cfg["data"]["kind"] == "phantom" and cfg["seed"] == 7

    @pytest.mark.parametrize("bad", ["train.lambda_1=0", "nokey", "train.learning_rate=-1", "train.pool_mode=sum"])
    def test_bad_override(self, bad):
        with pytest.raises(cli.UsageError):
            cli.resolve_config(None, [bad], None)


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert run("frobnicate") == cli.EXIT_USAGE

    def test_min_above_max(self, tmp_path, config):
        assert run("gen-data", "--config", config, "--set", "data.min_size=9", "--out", tmp_path / "o") == 2

    def test_missing_digits(self, tmp_path):
        code = run("gen-data", "--set", f"data.digits_dir={tmp_path / 'none'}", "--out", tmp_path / "o")
        assert code == cli.EXIT_DATA

    def test_train_without_data(self, tmp_path, config):
        assert run("train", "--config", config, "--out", tmp_path / "o") == cli.EXIT_DATA

    def test_numeric_abort(self, tmp_path, config):
        out = prepared(tmp_path, config)
        code = run("train", "--config", config, "--set", "train.learning_rate=1e300", "--out", out)
        assert code == cli.EXIT_NUMERIC

    def test_incompatible_checkpoint(self, tmp_path, config):
        out = prepared(tmp_path, config)
        assert run("train", "--config", config, "--out", out) == 0
        code = run("eval", "--config", config, "--set", "train.arch.latent_dim=5", "--out", out)
        assert code == cli.EXIT_DATA

    def test_bad_thread_env(self, tmp_path, config, monkeypatch):
        monkeypatch.setenv("SETVEC_THREADS", "many")
        assert run("gen-data", "--config", config, "--out", tmp_path / "o") == cli.EXIT_USAGE


class TestGenData:
    def test_idempotent(self, tmp_path, config):
        a, b = prepared(tmp_path, config, "a"), prepared(tmp_path, config, "b")
        for name in ("train.json", "test.json", "summary.json"):
            assert (a / "data" / name).read_bytes() == (b / "data" / name).read_bytes()
        summary = json.loads((a / "data" / "summary.json").read_text())
        assert summary["train"]["n_bags"] == 12 and summary["test"]["n_bags"] == 6

    def test_labels_consistent(self, tmp_path, config):
        bags = D.load_bags(prepared(tmp_path, config) / "data" / "train.json")
        for bag in bags:
            assert 2 <= len(bag) <= 5

    def test_phantom_kind(self, tmp_path):
        out = tmp_path / "ph"
        code = run("gen-data", "--set", "data.kind=phantom", "--set", "data.n_train=2", "--set", "data.n_test=1",
                   "--set", "data.volume_size=20", "--set", "data.patch=10", "--out", out)
        assert code == 0
        bags = D.load_bags(out / "data" / "train.json")
        assert len(bags) == 2 and bags[0].patches.shape[1:] == (10, 10, 10)


class TestTrainEval:
    def test_full_pipeline(self, tmp_path, config):
        out = prepared(tmp_path, config)
        assert run("train", "--config", config, "--out", out) == 0
        log = [json.loads(line) for line in (out / "metrics.ndjson").read_text().splitlines()]
        assert [r["epoch"] for r in log] == [1, 2]
        assert (out / "checkpoint.bin").is_file()

        assert run("eval", "--config", config, "--out", out) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert {"r2", "mean_auc", "effective_rank"} <= set(summary)

        assert run("attn-export", "--config", config, "--out", out) == 0
        with (out / "attention.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        bags = D.load_bags(out / "data" / "test.json")
        assert len(rows) == sum(len(b) for b in bags)
        assert (out / "subjects.csv").is_file()

        assert run("spectrum", "--config", config, "--out", out) == 0
        spectrum = json.loads((out / "spectrum.json").read_text())
        assert spectrum["n_patches"] == len(rows)

    def test_lambda1_zero_logs_generative(self, tmp_path, config):
        out = prepared(tmp_path, config)
        assert run("train", "--config", config, "--set", "train.lambda1=0", "--out", out) == 0
        assert json.loads((out / "metrics.ndjson").read_text().splitlines()[0])["L_g"] > 0

    def test_rerun_from_snapshot_is_identical(self, tmp_path, config):
        a = prepared(tmp_path, config, "a")
        assert run("train", "--config", config, "--out", a) == 0
        snapshot = tmp_path / "snapshot.json"
        snapshot.write_text((a / "config.resolved.json").read_text())
        b = tmp_path / "b"
        assert run("train", "--config", snapshot, "--out", b) == 0
        assert (a / "metrics.ndjson").read_bytes() == (b / "metrics.ndjson").read_bytes()
        assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()

    def test_resume_continues_steps(self, tmp_path, config):
        out = prepared(tmp_path, config)
        assert run("train", "--config", config, "--set", "train.epochs=1", "--out", out) == 0
        assert run("train", "--config", config, "--set", "train.epochs=3", "--resume", "--out", out) == 0
        steps = [json.loads(line)["step"] for line in (out / "metrics.ndjson").read_text().splitlines()]
        assert steps == [3, 6, 9]

    def test_resume_without_checkpoint(self, tmp_path, config):
        out = prepared(tmp_path, config)
        assert run("train", "--config", config, "--resume", "--out", out) == cli.EXIT_DATA


class TestAblate:
    def test_rows_sorted(self, tmp_path, config):
        out = prepared(tmp_path, config)
        assert run("ablate-lambda1", "--config", config, "--lambda1", "5,0", "--set", "train.epochs=1",
                   "--out", out) == 0
        rows = json.loads((out / "ablation.json").read_text())
        assert [r["lambda1"] for r in rows] == [0.0, 5.0]
        assert {"r2", "effective_rank", "attention_std"} <= set(rows[0])
        assert (out / "lambda1_0" / "checkpoint.bin").is_file()

    def test_single_value(self, tmp_path, config):
        out = prepared(tmp_path, config)
        assert run("ablate-lambda1", "--config", config, "--set", "ablate.lambda1=[0]", "--set", "train.epochs=1",
                   "--out", out) == 0
        assert len(json.loads((out / "ablation.json").read_text())) == 1

    def test_reuses_finished_run(self, tmp_path, config):
        out = prepared(tmp_path, config)
        args = ("ablate-lambda1", "--config", config, "--set", "ablate.lambda1=[0]", "--set", "train.epochs=1",
                "--out", out)
        assert run(*args) == 0
        ck = out / "lambda1_0" / "checkpoint.bin"
        stamp = ck.stat().st_mtime_ns
        assert run(*args) == 0
        assert ck.stat().st_mtime_ns == stamp

    def test_empty_list(self, tmp_path, config):
        out = prepared(tmp_path, config)
        assert run("ablate-lambda1", "--config", config, "--set", "ablate.lambda1=[]", "--out", out) == 2
