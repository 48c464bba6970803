import logging

import pytest

from bhaug import cli
from bhaug.advtune import CORRUPTION_GRID
from bhaug.data import Container, load_model
from bhaug.nn import checksum

TINY = """outer = 1
inner = 1
final = 1
batch = 8
m = 4
proto.m = 4
proto.epochs = 1
proto.targets = 1
"""


def run(capsys, *argv):
    assert cli.main([str(a) for a in argv]) == 0
    return capsys.readouterr().out


def rows(text):
    return [line.split("\t") for line in text.strip().splitlines()]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    cfg = root / "tiny.cfg"
    assert cli.main(["synth", "--out", str(root / "tr"), "--classes", "2", "--per-class", "6",
                     "--points", "64", "--seed", "1"]) == 0
    assert cli.main(["synth", "--out", str(root / "te"), "--classes", "2", "--per-class", "3",
                     "--points", "64", "--seed", "2", "--split", "test"]) == 0
    assert cli.main(["prep", "--data", str(root / "tr"), "--out", str(root / "art"),
                     "--controls", "8", "--k", "6"]) == 0
    assert cli.main(["train-prototypes", "--data", str(root / "tr"), "--artifacts", str(root / "art"),
                     "--config", str(cfg)]) == 0
    return root, cfg


def test_prep_and_prototypes_written(work):
    root, _ = work
    box = Container(root / "art")
    assert len(box) == 12
    arrs = box.load(box.ids()[0])
    assert arrs["M"].shape == (4, 8, 3) and arrs["F_mh"].shape == (8, 64)
    assert (root / "art-prototypenet" / "manifest.txt").exists()
    assert (root / "art-prototypes.tsv").read_text().startswith("epoch\tstep\tloss")


@pytest.mark.parametrize("mode, fmt", [("guided", "ply"), ("random-coef", "csv"), ("random-offset", "ply")])
def test_augment_exports_triplets(work, capsys, tmp_path, mode, fmt):
    root, cfg = work
    out = run(capsys, "augment", "--data", root / "tr", "--artifacts", root / "art", "--out", tmp_path,
              "--mode", mode, "--count", 2, "--format", fmt, "--sigma", 0.3, "--config", cfg)
    table = rows(out)
    assert table[0] == ["id", "mode", "r_cd", "r_sym"] and len(table) == 3
    sid = table[1][0]
    names = sorted(p.name for p in (tmp_path / sid).iterdir())
    assert names == sorted([f"original.{fmt}", f"recovered.{fmt}", f"deformed.{fmt}", "triplet.png"])
    assert (tmp_path / "augment.tsv").read_text() == out


def test_advtune_outputs_and_bitwise_rerun(work, capsys, tmp_path):
    root, cfg = work
    args = ["advtune", "--data", root / "tr", "--test", root / "te", "--artifacts", root / "art",
            "--config", cfg, "--seed", 5]
    first = run(capsys, *args, "--out", tmp_path / "a")
    second = run(capsys, *args, "--out", tmp_path / "b")
    assert first == second
    for name in ("report.tsv", "summary.txt", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for name in ("theta", "phi"):
        a = load_model(tmp_path / "a" / "checkpoints", name)
        b = load_model(tmp_path / "b" / "checkpoints", name)
        assert checksum(a) == checksum(b)
    assert (tmp_path / "a" / "training.png").stat().st_size > 0
    assert len(rows(first)) == 1 + 4
    assert "seed=5" in (tmp_path / "a" / "summary.txt").read_text()


def test_eval_grid_and_explicit(work, capsys, tmp_path):
    root, cfg = work
    run(capsys, "advtune", "--data", root / "tr", "--artifacts", root / "art", "--config", cfg,
        "--out", tmp_path / "run")
    out = run(capsys, "eval", "--checkpoint", tmp_path / "run" / "checkpoints", "--data", root / "te",
              "--corrupt", "grid", "--out", tmp_path / "ev")
    table = rows(out)
    assert [(k, float(lv)) for k, lv, _ in table[2:]] == list(CORRUPTION_GRID)
    assert table[1][0] == "none"
    assert all(0.0 <= float(acc) <= 1.0 for _, _, acc in table[1:])
    assert (tmp_path / "ev" / "eval.png").exists()
    one = rows(run(capsys, "eval", "--checkpoint", tmp_path / "run" / "checkpoints", "--data", root / "te",
                   "--corrupt", "scale:1.1"))
    assert one[2][:2] == ["scale", "1.1"]


def test_ablate_tables(work, capsys, tmp_path):
    root, cfg = work
    common = ["--data", root / "tr", "--test", root / "te", "--artifacts", root / "art", "--out", tmp_path,
              "--config", cfg]
    table = rows(run(capsys, "ablate", "coefficients", *common, "--sigmas", "0.1,0.5"))
    assert table[0] == ["coefficients", "0.1", "0.5"]
    assert [r[0] for r in table[1:]] == ["random coefficients", "guided"]
    table = rows(run(capsys, "ablate", "finetune", *common))
    assert len(table) == 5 and table[0] == ["finetune", "accuracy"]
    assert (tmp_path / "ablate-finetune.png").exists() and (tmp_path / "ablate-coefficients.png").exists()


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 3\n")
    parser = cli.build_parser()

    def seed_of(*argv):
        return cli._settings(parser.parse_args(["synth", "--out", "x", *argv]))[0]

    monkeypatch.delenv("BHAUG_SEED", raising=False)
    assert seed_of() == 0
    assert seed_of("--config", str(cfg)) == 3
    monkeypatch.setenv("BHAUG_SEED", "7")
    assert seed_of("--config", str(cfg)) == 7
    assert seed_of("--config", str(cfg), "--seed", "11") == 11


def test_global_options_before_subcommand(tmp_path, capsys):
    parser = cli.build_parser()
    args = parser.parse_args(["--seed", "4", "synth", "--out", "x"])
    assert args.seed == 4


def test_config_and_seed_logged(tmp_path, caplog, capsys):
    with caplog.at_level(logging.INFO, logger="bhaug.run"):
        cli.main(["synth", "--out", str(tmp_path / "d"), "--classes", "2", "--per-class", "1",
                  "--points", "8", "--seed", "9"])
    text = caplog.text
    assert "seed=9" in text and "lambda_adv=" in text and "proto.epochs=" in text


@pytest.mark.parametrize("argv", [
    ["synth", "--out", "x", "--bogus"],
    ["frobnicate"],
    ["eval", "--checkpoint", "c", "--data", "d", "--corrupt", "blur:0.1"],
    ["ablate", "nothing", "--data", "d", "--test", "t", "--artifacts", "a", "--out", "o"],
])
def test_bad_arguments_exit_nonzero(argv, capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(argv)
    assert err.value.code != 0


def test_bad_config_exits_with_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("outer = 1\nwat = 2\n")
    with pytest.raises(SystemExit) as err:
        cli.main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)])
    assert err.value.code == 2
    assert "line 2" in capsys.readouterr().err


def test_bad_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("BHAUG_SEED", "abc")
    with pytest.raises(SystemExit):
        cli.main(["synth", "--out", str(tmp_path / "d")])


def test_synth_counts(tmp_path, capsys):
    table = rows(run(capsys, "synth", "--out", tmp_path / "d", "--classes", 3, "--per-class", 2,
                     "--points", 16))
    assert table == [["class", "samples"], ["ellipsoid", "2"], ["box", "2"], ["cylinder", "2"]]
