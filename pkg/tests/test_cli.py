import subprocess
import sys

import pytest
import yaml

from octcvd import cli


def run(*argv):
    return subprocess.run([sys.executable, "-m", "octcvd.cli", *argv], capture_output=True, text=True)


class TestParser:
    def test_all_subcommands(self):
        sub = next(a for a in cli.build_parser()._actions if a.dest == "command")
        assert set(sub.choices) == {"synth", "qi", "filter", "train-vae", "encode", "assemble",
                                    "train-rf", "evaluate", "explain", "report", "run-all",
                                    "show-config"}

    def test_configs_list(self):
        args = cli.build_parser().parse_args(["train-rf", "--configs", "LE, BE-MTDT"])
        assert args.configs == ("LE", "BE-MTDT")

    def test_bad_config_id(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.build_parser().parse_args(["evaluate", "--configs", "LE,ZZ"])
        assert exc.value.code == 2 and "unknown dataset id 'ZZ'" in capsys.readouterr().err

    def test_eye_choice(self):
        args = cli.build_parser().parse_args(["encode", "--eye", "right", "--eye", "right"])
        assert args.eye == ["right", "right"]


class TestMain:
    def test_show_config(self, tiny_config_path, capsys):
        assert cli.main(["show-config", "--config", str(tiny_config_path), "--seed", "4"]) == 0
        tree = yaml.safe_load(capsys.readouterr().out)
        assert tree["seed"] == 4 and tree["cohort"]["n_cases"] == 30

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("forest: {depth: 3}\n")
        assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
        assert "unknown config key 'forest.depth'" in capsys.readouterr().err
        assert not (tmp_path / "r").exists()

    def test_stage_failure_named(self, tiny_config_path, tmp_path, capsys):
        code = cli.main(["train-rf", "--config", str(tiny_config_path), "--out", str(tmp_path)])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("octcvd: stage 'train-rf' failed:") and "splits.json" in err

    def test_config_clash(self, tiny_config_path, tmp_path, capsys):
        assert cli.main(["show-config"]) == 0
        cli.main(["synth", "--config", str(tiny_config_path), "--out", str(tmp_path)])
        capsys.readouterr()
        assert cli.main(["synth", "--config", str(tiny_config_path), "--seed", "1",
                         "--out", str(tmp_path)]) == 2
        assert "different configuration" in capsys.readouterr().err

    def test_stage_sequence(self, tiny_config_path, tmp_path):
        base = ["--config", str(tiny_config_path), "--out", str(tmp_path)]
        assert cli.main(["synth", "--write-volumes", *base]) == 0
        assert len(list((tmp_path / "cohort" / "volumes").glob("*.oct"))) > 0
        assert cli.main(["qi", *base]) == 0
        assert cli.main(["filter", *base]) == 0
        assert cli.main(["train-vae", "--eye", "left", *base]) == 0
        assert (tmp_path / "models" / "vae_left.bin").exists()
        assert not (tmp_path / "models" / "vae_right.bin").exists()
        assert cli.main(["encode", "--eye", "left", *base]) == 0
        assert cli.main(["assemble", "--configs", "LE,MTDT", *base]) == 0
        assert sorted(p.name for p in (tmp_path / "latents").glob("dataset_*")) == [
            "dataset_LE.csv", "dataset_MTDT.csv"]
        assert cli.main(["assemble", "--configs", "RE", *base]) == 1


def test_module_entry_point(tmp_path):
    res = run("--version")
    assert res.returncode == 0 and res.stdout.startswith("octcvd ")
    res = run("qi", "--out", str(tmp_path))
    assert res.returncode == 1 and "stage 'qi' failed" in res.stderr
