import hashlib

import pytest

from branchforge.cli import main


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_gen_corpus_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-corpus", "--seed", "7", "--programs", "20", "--out", str(tmp_path / name)]) == 0
    assert len(list((tmp_path / "a").glob("*.ml"))) == 20
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data-dir", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: CheckpointNotFound")


def test_usage_error(capsys):
    assert main([]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "bogus"])
    assert exc.value.code == 2


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nprograms = 5\nseed=3\n")
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    assert len(list((tmp_path / "c").glob("*.ml"))) == 5
    assert main(["gen-corpus", "--config", str(cfg), "--programs", "2", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d").glob("*.ml"))) == 2
    cfg.write_text("colour = blue\n")
    assert main(["gen-corpus", "--config", str(cfg)]) == 2


def test_env_data_dir_and_build_cpg(tmp_path, monkeypatch):
    monkeypatch.setenv("BRANCHFORGE_DATA", str(tmp_path / "data"))
    assert main(["gen-corpus", "--programs", "4"]) == 0
    assert main(["build-cpg"]) == 0
    first = tree_digest(tmp_path / "data" / "cpg")
    assert len(list((tmp_path / "data" / "cpg").glob("*.cpg"))) == 4
    assert main(["build-cpg"]) == 0
    assert tree_digest(tmp_path / "data" / "cpg") == first


def test_pipeline_round(tmp_path, capsys):
    data = str(tmp_path / "data")
    assert main(["curate", "--seed", "5", "--programs", "12", "--data-dir", data]) == 0
    run = tmp_path / "run"
    assert main(["train", "--data-dir", data, "--steps", "2", "--batch", "2", "--val-every", "1",
                 "--out", str(run)]) == 0
    assert (run / "final.ckpt").exists() and (run / "best.ckpt").exists()
    capsys.readouterr()
    args = ["--data-dir", data, "--checkpoint", str(run / "final.ckpt"), "--delta", "1"]
    assert main(["eval", *args, "--emit-plot-data"]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split() == ["metric", "value"]
    assert (run / "eval_report.txt").exists() and (run / "plot_data.tsv").exists()
    assert main(["infer", *args]) == 0
    rows = (run / "generations.tsv").read_text().splitlines()
    assert rows and all(len(r.split("\t")) == 3 for r in rows)
    ft = tmp_path / "ft"
    assert main(["train-ft", "--data-dir", data, "--steps", "1", "--batch", "2", "--out", str(ft)]) == 0
    assert "\nparam gnn." not in (ft / "final.ckpt").read_text()


def test_missing_corpus(tmp_path, capsys):
    assert main(["train", "--data-dir", str(tmp_path / "empty")]) == 2
    assert "FileNotFoundError" in capsys.readouterr().err
