import json

import numpy as np
import pytest

from encbench import cli
from encbench.data import export_cifar10, synthetic_dataset
from encbench.harness import parse_markdown
from encbench.ppm import read_ppm, write_ppm

TINY = {
    "data": {"train_size": 40, "test_size": 20},
    "training": {"epochs": 1, "batch_size": 20, "augment": False},
    "backbone": {"widths": [4, 8]},
    "adaptation": {"width": 8, "nin_layers": 1},
    "attack": {"steps": 2, "alpha": 0.05},
    "eval_batch_size": 20,
}
SUBCOMMANDS = ["keygen", "encrypt", "decrypt", "train", "evaluate", "attack", "report", "run-all"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.DATA_DIR_ENV, raising=False)
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    return tmp_path


def image_file(path, size=32, seed=0):
    img = np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)
    write_ppm(path, img)
    return path


class TestKeygen:
    def test_writes_96_entries(self, workdir):
        assert cli.main(["keygen", "--seed", "1", "--block-size", "4", "-o", "k.json"]) == 0
        doc = json.loads((workdir / "k.json").read_text())
        assert len(doc["reversal_mask"]) == len(doc["permutation"]) == 96

    def test_idempotent(self, workdir):
        cli.main(["keygen", "--seed", "1", "-o", "a.json"])
        cli.main(["keygen", "--seed", "1", "-o", "b.json"])
        assert (workdir / "a.json").read_bytes() == (workdir / "b.json").read_bytes()

    def test_block_size_zero(self, workdir):
        with pytest.raises(SystemExit) as exc:
            cli.main(["keygen", "--seed", "1", "--block-size", "0", "-o", "k.json"])
        assert exc.value.code == 1
        assert not (workdir / "k.json").exists()

    def test_unwritable(self, workdir, capsys):
        assert cli.main(["keygen", "--seed", "1", "-o", str(workdir / "no" / "k.json")]) == 2
        assert "error" in capsys.readouterr().err


class TestCrypt:
    def test_round_trip_byte_identical(self, workdir):
        cli.main(["keygen", "--seed", "3", "-o", "k.json"])
        src = image_file(workdir / "in.ppm")
        assert cli.main(["encrypt", "--key", "k.json", "--in", "in.ppm", "-o", "enc.ppm"]) == 0
        assert cli.main(["decrypt", "--key", "k.json", "--in", "enc.ppm", "-o", "dec.ppm"]) == 0
        assert (workdir / "dec.ppm").read_bytes() == src.read_bytes()
        assert (workdir / "enc.ppm").read_bytes() != src.read_bytes()

    def test_two_keys_differ(self, workdir):
        cli.main(["keygen", "--seed", "1", "-o", "a.json"])
        cli.main(["keygen", "--seed", "2", "-o", "b.json"])
        image_file(workdir / "in.ppm")
        cli.main(["encrypt", "--key", "a.json", "--in", "in.ppm", "-o", "a.ppm"])
        cli.main(["encrypt", "--key", "b.json", "--in", "in.ppm", "-o", "b.ppm"])
        assert not np.array_equal(read_ppm(workdir / "a.ppm"), read_ppm(workdir / "b.ppm"))

    def test_indivisible(self, workdir, capsys):
        cli.main(["keygen", "--seed", "1", "-o", "k.json"])
        image_file(workdir / "in.ppm", size=30)
        assert cli.main(["encrypt", "--key", "k.json", "--in", "in.ppm", "-o", "o.ppm"]) == 1
        assert "divisible" in capsys.readouterr().err

    def test_bad_key(self, workdir):
        (workdir / "k.json").write_text('{"block_size": 4}')
        image_file(workdir / "in.ppm")
        assert cli.main(["encrypt", "--key", "k.json", "--in", "in.ppm", "-o", "o.ppm"]) == 1

    def test_missing_input(self, workdir):
        cli.main(["keygen", "--seed", "1", "-o", "k.json"])
        assert cli.main(["decrypt", "--key", "k.json", "--in", "nope.ppm", "-o", "o.ppm"]) == 2

    def test_garbage_ppm(self, workdir):
        cli.main(["keygen", "--seed", "1", "-o", "k.json"])
        (workdir / "in.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        assert cli.main(["encrypt", "--key", "k.json", "--in", "in.ppm", "-o", "o.ppm"]) == 2


class TestUsage:
    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help_has_no_side_effects(self, workdir, cmd, capsys):
        before = sorted(p.name for p in workdir.iterdir())
        with pytest.raises(SystemExit) as exc:
            cli.main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out
        assert sorted(p.name for p in workdir.iterdir()) == before

    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_unknown_flag(self, workdir, cmd):
        with pytest.raises(SystemExit) as exc:
            cli.main([cmd, "--no-such-flag"])
        assert exc.value.code == 1

    def test_bad_config(self, workdir):
        (workdir / "bad.json").write_text('{"epochs": 3}')
        assert cli.main(["run-all", "--config", "bad.json"]) == 1

    def test_bad_attack_override(self, workdir):
        assert cli.main(["run-all", "--config", "tiny.json", "--eps", "2"]) == 1

    def test_unknown_scenario_subset(self, workdir):
        assert cli.main(["run-all", "--config", "tiny.json", "--scenarios", "plain,nope"]) == 1

    def test_missing_data_dir(self, workdir, capsys):
        assert cli.main(["run-all", "--config", "tiny.json", "--data-dir", "/no/such/cifar"]) == 2
        assert "/no/such/cifar" in capsys.readouterr().err

    def test_env_data_dir(self, workdir, monkeypatch, capsys):
        monkeypatch.setenv(cli.DATA_DIR_ENV, "/env/cifar")
        assert cli.main(["train", "--config", "tiny.json", "--scenario", "plain"]) == 2
        assert "/env/cifar" in capsys.readouterr().err

    def test_missing_checkpoint(self, workdir):
        assert cli.main(["evaluate", "--config", "tiny.json", "--scenario", "plain"]) == 2

    def test_report_without_run(self, workdir):
        assert cli.main(["report", "--out-dir", "empty"]) == 2


class TestExperiments:
    def test_run_all_table_parses_back(self, workdir, capsys):
        assert cli.main(["run-all", "--config", "tiny.json", "--out-dir", "out"]) == 0
        table = capsys.readouterr().out
        rows = parse_markdown(table)
        assert len(rows) == 5
        for row in rows:
            doc = json.loads((workdir / "out" / f"{row['scenario']}.json").read_text())
            for f in ("train_error", "test_error", "adversarial_error"):
                assert row[f] == round(doc[f], 3)
        assert cli.main(["report", "--out-dir", "out"]) == 0
        assert capsys.readouterr().out == table

    def test_train_evaluate_attack(self, workdir, capsys):
        base = ["--config", "tiny.json", "--out-dir", "out"]
        assert cli.main(["train", "--scenario", "plain"] + base) == 0
        assert cli.main(["train", "--scenario", "encrypted"] + base) == 0
        assert (workdir / "out" / "encrypted.nnp").exists()
        capsys.readouterr()
        assert cli.main(["evaluate", "--scenario", "encrypted"] + base) == 0
        rows = parse_markdown(capsys.readouterr().out)
        assert rows[0]["scenario"] == "encrypted"
        assert cli.main(["attack", "--scenario", "encrypted", "--eps", "0"] + base) == 0
        doc = json.loads((workdir / "out" / "encrypted.attack.json").read_text())
        assert doc["adversarial_error"] == doc["test_error"]
        assert cli.main(["attack", "--scenario", "encrypted", "--mode", "bpda", "--steps", "1"] + base) == 0

    def test_cifar_directory_source(self, workdir, capsys):
        export_cifar10(workdir / "cifar", synthetic_dataset(0, 40), synthetic_dataset(0, 20, split="test"))
        args = ["run-all", "--config", "tiny.json", "--data-dir", "cifar", "--scenarios", "plain",
                "--out-dir", "out"]
        assert cli.main(args) == 0
        assert len(parse_markdown(capsys.readouterr().out)) == 1
