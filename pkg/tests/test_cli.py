"""Exit codes, output files, and rerun determinism of the command line."""

import numpy as np

from tamseg.cli import main
from tamseg.tnsr import read_json, write_array


def run(*argv):
    return main(list(argv))


def gen_tiny(tmp_path, name="ds", frames=2, **extra):
    args = ["gen", "--out", str(tmp_path / name), "--size", "32",
            "--t", str(frames), "--tier", "good",
            "--train-cases", "2", "--val-cases", "1", "--test-cases", "1"]
    for k, v in extra.items():
        args += [f"--{k}", str(v)]
    assert run(*args) == 0
    return tmp_path / name


class TestUsageErrors:
    def test_unknown_subcommand(self, capsys):
        assert run("frobnicate") == 1

    def test_missing_required_flag(self, capsys):
        assert run("gen") == 1
        assert "required" in capsys.readouterr().err

    def test_no_command(self):
        assert run() == 1

    def test_bad_choice(self, capsys):
        assert run("gradcheck", "--scope", "everything") == 1


class TestGen:
    def test_writes_manifest(self, tmp_path, capsys):
        ds = gen_tiny(tmp_path)
        manifest = read_json(ds / "manifest.json")
        assert manifest["format"] == "synth-dataset"
        assert len(manifest["splits"]["train"]) == 2
        assert manifest["splits"]["train"][0]["annotated"] == [0, 1]
        assert str(ds) in capsys.readouterr().out

    def test_frame_validation_maps_to_exit_1(self, tmp_path, capsys):
        code = run("gen", "--out", str(tmp_path / "x"), "--t", "1")
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_identical_flags_identical_bytes(self, tmp_path):
        a = gen_tiny(tmp_path, "a")
        b = gen_tiny(tmp_path, "b")
        rels = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert rels == sorted(p.relative_to(b) for p in b.rglob("*")
                              if p.is_file())
        for rel in rels:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()


class TestTrainEval:
    def train_args(self, ds, out, steps="6"):
        return ["train", "--dataset", str(ds), "--out", str(out),
                "--config", "C1", "--t", "2", "--levels", "2",
                "--channels", "4,8", "--heads", "1", "--steps", steps,
                "--eval-every", "3", "--quiet"]

    def test_train_then_eval(self, tmp_path, capsys):
        ds = gen_tiny(tmp_path)
        out = tmp_path / "run"
        assert run(*self.train_args(ds, out)) == 0
        assert "final loss" in capsys.readouterr().out
        assert (out / "checkpoint_best" / "manifest.json").exists()

        code = run("eval", "--checkpoint", str(out / "checkpoint_best"),
                   "--dataset", str(ds), "--out", str(tmp_path / "eval"))
        assert code == 0
        lines = capsys.readouterr().out
        assert "class 1: dsc" in lines and "class 2: dsc" in lines
        assert (tmp_path / "eval" / "metrics.csv").exists()

    def test_eval_oracle_needs_no_checkpoint(self, tmp_path, capsys):
        ds = gen_tiny(tmp_path)
        code = run("eval", "--oracle", "--dataset", str(ds),
                   "--out", str(tmp_path / "eval"))
        assert code == 0
        assert "dsc 1.0000" in capsys.readouterr().out

    def test_eval_without_checkpoint_or_oracle(self, tmp_path, capsys):
        ds = gen_tiny(tmp_path)
        code = run("eval", "--dataset", str(ds),
                   "--out", str(tmp_path / "eval"))
        assert code == 1
        assert "--checkpoint" in capsys.readouterr().err

    def test_missing_dataset_is_io_failure(self, tmp_path, capsys):
        code = run(*self.train_args(tmp_path / "nope", tmp_path / "run"))
        assert code == 2
        assert "i/o failure" in capsys.readouterr().err

    def test_missing_checkpoint_is_io_failure(self, tmp_path, capsys):
        ds = gen_tiny(tmp_path)
        code = run("eval", "--checkpoint", str(tmp_path / "nope"),
                   "--dataset", str(ds), "--out", str(tmp_path / "eval"))
        assert code == 2

    def test_divergence_maps_to_exit_2(self, tmp_path, capsys):
        ds = gen_tiny(tmp_path)
        manifest = read_json(ds / "manifest.json")
        frame_rel = manifest["splits"]["train"][0]["frames"][0]
        write_array(ds / frame_rel,
                    np.full((32, 32), np.nan, dtype=np.float32))
        code = run(*self.train_args(ds, tmp_path / "run"))
        assert code == 2
        assert "numeric failure" in capsys.readouterr().err

    def test_train_rerun_byte_identical(self, tmp_path):
        ds = gen_tiny(tmp_path)
        out = tmp_path / "run"
        assert run(*self.train_args(ds, out, steps="4")) == 0
        files = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
        assert run(*self.train_args(ds, out, steps="4")) == 0
        for p, blob in files.items():
            assert p.read_bytes() == blob, p


class TestGradcheckCommand:
    def test_ops_scope_passes(self, capsys):
        assert run("gradcheck", "--scope", "ops", "--seeds", "1") == 0
        out = capsys.readouterr().out
        assert "all" in out and "checks passed" in out
        assert "ok" in out


class TestCostCommand:
    def test_single_report(self, tmp_path, capsys):
        code = run("cost", "--configs", "C1", "--size", "32", "--levels", "3",
                   "--channels", "4,8,16", "--heads", "1")
        assert code == 0
        out = capsys.readouterr().out
        assert "total" in out and "C1" in out

    def test_comparison_and_json(self, tmp_path, capsys):
        json_path = tmp_path / "costs.json"
        code = run("cost", "--configs", "C1,C3,C2", "--size", "32",
                   "--levels", "5", "--channels", "2,4,6,8,10",
                   "--heads", "1", "--json", str(json_path))
        assert code == 0
        out = capsys.readouterr().out
        assert "attention" in out  # break-even line
        data = read_json(json_path)
        assert len(data["reports"]) == 3
        flops = {r["label"].split(" ")[0]: r["total_flops"]
                 for r in data["reports"]}
        assert flops["C1"] < flops["C3"] < flops["C2"]

    def test_unknown_config_exit_1(self, capsys):
        assert run("cost", "--configs", "C99") == 1


class TestAblateCommand:
    def test_tiny_sweep(self, tmp_path, capsys):
        work = tmp_path / "work"
        code = run("ablate", "--axis", "config", "--values", "C1",
                   "--seeds", "0", "--workdir", str(work),
                   "--levels", "2", "--channels", "4,8", "--heads", "1",
                   "--steps", "3", "--size", "32", "--tier", "good",
                   "--train-cases", "1", "--val-cases", "1",
                   "--test-cases", "1", "--quiet")
        assert code == 0
        assert (work / "results.csv").exists()
        out = capsys.readouterr().out
        assert "config=C1 seed=0" in out

    def test_bad_axis_exit_1(self, tmp_path, capsys):
        code = run("ablate", "--axis", "kernel", "--values", "3",
                   "--workdir", str(tmp_path / "w"))
        assert code == 1
