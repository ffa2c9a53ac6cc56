import json

import pytest

from sattack import cli, data_io


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    return tmp_path


def _run(*args):
    return cli.main([str(a) for a in args])


def test_gen_train_attack_transfer_pipeline(workdir):
    assert _run("gen", "--template", "mixed", "--count", 6, "--seed", 1, "--out", "s.jsonl") == 0
    assert len(data_io.read_scenes("s.jsonl")) == 6
    assert _run("train", "--scenes", "s.jsonl", "--epochs", 2, "--hidden", 8, "--out", "m.npz") == 0
    assert (workdir / "m.npz.loss.csv").read_text().startswith("epoch,loss")
    args = ["attack", "--scenes", "s.jsonl", "--model", "pool-lite:m.npz", "--max-iters", 10, "--jobs", 1,
            "--archive", "a.jsonl", "--plot-dir", "plots"]
    assert _run(*args, "--out", "r1.jsonl") == 0
    assert _run(*args[:-4], "--jobs", 2, "--archive", "a2.jsonl", "--out", "r2.jsonl") == 0
    assert (workdir / "r1.jsonl").read_bytes() == (workdir / "r2.jsonl").read_bytes()
    assert (workdir / "a.jsonl").read_bytes() == (workdir / "a2.jsonl").read_bytes()
    reports, summary = data_io.read_report("r1.jsonl")
    assert len(list((workdir / "plots").glob("*.svg"))) == summary["collided"]

    assert _run("transfer", "--archive", "a.jsonl", "--target", "pool-lite:m.npz", "--scenes", "s.jsonl",
                "--out", "t.jsonl") == 0
    last = json.loads((workdir / "t.jsonl").read_text().splitlines()[-1])
    assert last["summary"]["cr"] == summary["cr"]
    assert _run("eval", "--scenes", "s.jsonl", "--model", "cv", "--perturbations", "a.jsonl") == 0
    assert _run("sensitivity", "--scenes", "s.jsonl", "--model", "cv", "--trials", 2, "--archive", "a.jsonl",
                "--out", "c.csv") == 0
    assert (workdir / "c.csv").read_text().splitlines()[0] == "timestep,sensitivity,perturbation_norm"
    assert _run("finetune", "--ckpt", "m.npz", "--scenes", "s.jsonl", "--eval-scenes", "s.jsonl",
                "--epochs", 1, "--attack-iters", 2, "--jobs", 1, "--out", "m2.npz") == 0
    metrics = json.loads((workdir / "m2.npz.metrics.json").read_text())
    assert set(metrics) == {"before", "after", "loss_curve"}


def test_eval_on_exact_predictor_prints_zero(workdir, capsys):
    scenes = data_io.generate_synthetic("parallel", 0.0, 3, 0, turn_rate=0.0, speed_jitter=0.0, interact=False)
    data_io.write_scenes(scenes, "p.jsonl")
    assert _run("eval", "--scenes", "p.jsonl", "--model", "cv", "--out", "table.txt") == 0
    assert "0.00/0.00" in capsys.readouterr().out
    assert "0.00/0.00" in (workdir / "table.txt").read_text()


def test_ingest(workdir):
    lines = [f"{f}\t{a}\t{0.4 * f}\t{float(a)}" for f in range(25) for a in (1, 2)]
    (workdir / "f.tsv").write_text("\n".join(lines) + "\n")
    assert _run("ingest", "--frames", "f.tsv", "--stride", 2, "--out", "s.jsonl") == 0
    assert len(data_io.read_scenes("s.jsonl")) == 3


def test_seed_from_environment(workdir, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    assert _run("gen", "--template", "parallel", "--count", 1, "--out", "a.jsonl") == 0
    assert data_io.read_scenes("a.jsonl")[0].scene_id == "parallel-7-0"
    monkeypatch.setenv(cli.SEED_ENV, "x")
    assert _run("gen", "--template", "parallel", "--count", 1, "--out", "b.jsonl") == 2


def test_exit_codes(workdir):
    assert _run("gen", "--template", "parallel", "--count", 2, "--out", "s.jsonl") == 0
    assert _run("attack", "--scenes", "s.jsonl", "--model", "cv", "--max-iters", 0, "--out", "r.jsonl") == 2
    assert _run("attack", "--scenes", "s.jsonl", "--model", "cv", "--bogus", "--out", "r.jsonl") == 2
    assert _run("attack", "--scenes", "s.jsonl", "--model", "sf", "--out", "r.jsonl") == 2
    assert _run("attack", "--scenes", "missing.jsonl", "--model", "cv", "--out", "r.jsonl") == 3
    assert _run("attack", "--scenes", "s.jsonl", "--model", "pool-lite:missing.npz", "--out", "r.jsonl") == 3
    (workdir / "bad.tsv").write_text("1\t2\tx\t3\n")
    assert _run("ingest", "--frames", "bad.tsv", "--out", "o.jsonl") == 3
    assert _run("nothing") == 2


@pytest.mark.parametrize("command", sorted(cli.COMMANDS))
def test_help_lists_defaults(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "--" in out
    if command in ("attack", "finetune", "train", "sensitivity"):
        assert "repo default" in out
    if command == "attack":
        for value in ("0.2", "0.1", "0.5", "100"):
            assert value in out
