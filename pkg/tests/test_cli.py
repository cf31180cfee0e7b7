"""Command wiring, flag resolution, exit codes, and artifact layout."""

import numpy as np
import pytest

from kgstale import cli, transe
from kgstale.cli import (UsageError, main, parse_config_file, parse_values,
                         resolve_config)
from kgstale.training import TrainConfig

NATIONS = ["--train-file", "datasets/nations/train.txt",
           "--test-file", "datasets/nations/test.txt",
           "--valid-file", "datasets/nations/valid.txt"]
FAST = ["--dim", "8", "--heads", "2", "--epochs", "1",
        "--detector-epochs", "2", "--seed", "0"]


def run(argv, capsys=None):
    code = main(argv)
    if capsys is not None:
        captured = capsys.readouterr()
        return code, captured.out, captured.err
    return code


# ---------------------------------------------------------------------------
# flag plumbing


def test_parse_values_comma_lists():
    assert parse_values("heads", "1,2,4,8") == [1, 2, 4, 8]
    assert parse_values("dim", "20,50,100,200,400") == [20, 50, 100, 200,
                                                        400]
    out = parse_values("lambda", "0.25,1")
    assert out == [0.25, 1.0] and all(isinstance(v, float) for v in out)


def test_parse_values_ranges():
    lam = parse_values("lambda", "0.1..1.0")
    assert len(lam) == 10
    np.testing.assert_allclose(lam, np.arange(1, 11) / 10)
    assert parse_values("heads", "1..4") == [1, 2, 3, 4]
    assert parse_values("dim", "20..60..20") == [20, 40, 60]


def test_parse_values_rejects_garbage():
    for bad in ["", "a,b", "1..", "1..2..0", "5..1", "1..2..3..4"]:
        with pytest.raises(UsageError):
            parse_values("lambda", bad)
    with pytest.raises(UsageError, match="integer"):
        parse_values("heads", "2.5")


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ndim = 16\nlam = 0.5\n\nheads = 4\n")
    vals = parse_config_file(str(path))
    assert vals == {"dim": "16", "lam": "0.5", "heads": "4"}
    path.write_text("dim 16\n")
    with pytest.raises(UsageError, match="key = value"):
        parse_config_file(str(path))


class _Args:
    def __init__(self, **kw):
        self.__dict__.update(kw)

    def __getattr__(self, name):  # unset flags read as None
        return None


def test_resolve_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("dim = 16\nlam = 0.25\n")
    cfg = resolve_config(_Args(config=str(path)))
    assert cfg.dim == 16 and cfg.lam == 0.25
    # explicit flag beats the file
    cfg = resolve_config(_Args(config=str(path), dim=8))
    assert cfg.dim == 8 and cfg.lam == 0.25
    # defaults fill everything else
    assert cfg.margin == TrainConfig().margin


def test_resolve_config_bool_field(tmp_path):
    assert resolve_config(_Args()).finetune is False
    assert resolve_config(_Args(finetune=True)).finetune is True
    path = tmp_path / "run.cfg"
    path.write_text("finetune = true\n")
    assert resolve_config(_Args(config=str(path))).finetune is True
    path.write_text("finetune = maybe\n")
    with pytest.raises(UsageError, match="cannot parse"):
        resolve_config(_Args(config=str(path)))


def test_config_echo_feeds_back_losslessly(tmp_path):
    cfg = TrainConfig(dim=16, heads=4, lam=0.3, lr=5e-4,
                      finetune=True).validate()
    echo = cli.config_echo("train", _Args(train_file="x.txt"), cfg)
    path = tmp_path / "config.txt"
    path.write_text(echo)
    assert resolve_config(_Args(config=str(path))) == cfg


def test_resolve_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("momentum = 0.9\n")
    with pytest.raises(UsageError, match="unknown config key"):
        resolve_config(_Args(config=str(path)))


def test_resolve_config_rejects_bad_value(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("dim = large\n")
    with pytest.raises(UsageError, match="cannot parse"):
        resolve_config(_Args(config=str(path)))


def test_resolve_config_validates(tmp_path):
    with pytest.raises(UsageError, match="divisible"):
        resolve_config(_Args(dim=10, heads=3))


# ---------------------------------------------------------------------------
# exit codes


def test_exit_code_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus-flag"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["not-a-command"])
    assert exc.value.code == 1


def test_exit_code_missing_file(capsys):
    code, _, err = run(["stats", "--train-file", "/no/such/file.txt"],
                       capsys)
    assert code == 2
    assert "data error" in err


def test_exit_code_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("only\ttwo\n")
    code, _, err = run(["stats", "--train-file", str(bad)], capsys)
    assert code == 2
    assert "bad.txt" in err and "line" in err.lower() or "1" in err


def test_exit_code_bad_sweep_param(tmp_path, capsys):
    code, _, err = run(["sweep", *NATIONS, "--out", str(tmp_path),
                        "--param", "margin", "--values", "1"], capsys)
    assert code == 1
    assert "usage error" in err


# ---------------------------------------------------------------------------
# subcommands against the small real dataset


def test_stats_command(capsys):
    code, out, _ = run(["stats", *NATIONS], capsys)
    assert code == 0
    assert "entities: 14" in out
    assert "relations: 55" in out
    assert "train: 1592" in out


def test_prepare_writes_labels_and_stats(tmp_path, capsys):
    out = tmp_path / "prep"
    code, text, _ = run(["prepare", *NATIONS, "--out", str(out),
                         "--seed", "3"], capsys)
    assert code == 0
    assert "outdated_fraction: 0.2" in text
    assert (out / "train.txt").exists()
    assert (out / "stats.csv").read_text().startswith("split,facts")
    cfg_text = (out / "config.txt").read_text()
    assert "command = prepare" in cfg_text
    assert "seed = 3" in cfg_text
    # labels present in the written files
    labels = {ln.split("\t")[3] for ln
              in (out / "train.txt").read_text().splitlines()}
    assert labels == {"0", "1"}


def test_prepare_reruns_identically(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["prepare", *NATIONS, "--out", str(out),
                     "--seed", "11"]) == 0
    for name in ["train.txt", "test.txt", "valid.txt", "stats.csv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_train_then_evaluate_and_mismatch(tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(["train", *NATIONS, *FAST, "--out", str(out)],
                        capsys)
    assert code == 0
    assert "lam = 1.0" in text  # resolved config echoed
    assert "accuracy" in text
    for name in ["config.txt", "metrics.csv", "losses.csv", "detector.bin",
                 "embeddings.bin", "embeddings.entities.tsv",
                 "labeled.test.txt"]:
        assert (out / name).exists(), name
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == cli.METRICS_HEADER

    code, text, _ = run(["evaluate", "--test-file",
                         str(out / "labeled.test.txt"), "--out", str(out)],
                        capsys)
    assert code == 0
    assert "accuracy" in text
    eval_rows = (out / "eval.csv").read_text().splitlines()
    assert eval_rows[0].startswith("dataset,param,value,accuracy")
    assert len(eval_rows) == 2

    # shrink the detector input dim: evaluate must name both dims
    det = out / "detector.bin"
    from kgstale.training import Detector
    from kgstale.autodiff import Rng
    Detector.init(10, 4, Rng(0)).save(str(det))
    code, _, err = run(["evaluate", "--test-file",
                        str(out / "labeled.test.txt"), "--out", str(out)],
                       capsys)
    assert code == 2
    assert "10" in err and "24" in err  # detector dim vs fact-vector dim


def test_evaluate_rejects_empty_test_file(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    transe.save_embeddings(str(out / "embeddings"), np.ones((2, 4)),
                           np.ones((1, 4)), ["a", "b"], ["r"])
    from kgstale.training import Detector
    from kgstale.autodiff import Rng
    Detector.init(12, 4, Rng(0)).save(str(out / "detector.bin"))
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    code, _, err = run(["evaluate", "--test-file", str(empty),
                        "--out", str(out)], capsys)
    assert code == 2
    assert "empty" in err


def test_evaluate_rejects_unknown_symbols(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    transe.save_embeddings(str(out / "embeddings"), np.ones((2, 4)),
                           np.ones((1, 4)), ["a", "b"], ["r"])
    from kgstale.training import Detector
    from kgstale.autodiff import Rng
    Detector.init(12, 4, Rng(0)).save(str(out / "detector.bin"))
    stray = tmp_path / "stray.txt"
    stray.write_text("a\tr\tmartian\t1\n")
    code, _, err = run(["evaluate", "--test-file", str(stray),
                        "--out", str(out)], capsys)
    assert code == 2
    assert "martian" in err


def test_sweep_command(tmp_path, capsys):
    out = tmp_path / "sw"
    code, text, _ = run(["sweep", *NATIONS, *FAST, "--out", str(out),
                         "--param", "K", "--values", "1,2"], capsys)
    assert code == 0
    rows = (out / "sweep_heads.csv").read_text().splitlines()
    assert rows[0] == "dataset,param,value,accuracy,precision,recall,f1," \
                      "seed,wall_seconds"
    assert len(rows) == 3
    assert rows[1].startswith("nations,heads,1,")
    assert rows[2].startswith("nations,heads,2,")


def test_dataset_name_derives_from_parent_dir():
    assert cli._dataset_name("datasets/nations/train.txt") == "nations"
    assert cli._dataset_name("train.txt") in ("pkg", "train")
