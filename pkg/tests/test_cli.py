import json

import pytest
import yaml

from hiptune import cli

from .conftest import TINY_RUN


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["generate", "--identities", "5", "--frames", "1", "--size", "8", "--seed", "0", "--out", str(data)]) == 0
    assert cli.main(["split", "--protocol", "p1", "--seed", "0", "--data", str(data)]) == 0
    cfg = root / "run.yaml"
    cfg.write_text(yaml.safe_dump({**TINY_RUN, "paths": {"data": str(data), "split": str(data / "splits" / "p1-seed0.json")}}))
    return root, data, cfg


def test_full_file_workflow(workspace, capsys):
    root, data, cfg = workspace
    ckpt = root / "model.safetensors"
    assert cli.main(["train", "--stage", "1", "--config", str(cfg), "--out", str(ckpt)]) == 0
    assert cli.main(["train", "--stage", "2", "--config", str(cfg), "--out", str(ckpt)]) == 0
    split = data / "splits" / "p1-seed0.json"
    for comp in ("hiptune", "clip-v", "coop-unified", "coop-specific"):
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--split", str(split), "--comparator", comp]) == 0
    capsys.readouterr()
    assert cli.main(["report", "--format", "json", str(root)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert {r["comparator"] for r in rep["rows"]} == {"hiptune", "clip-v", "coop-unified", "coop-specific"}
    for r in rep["rows"]:
        for m in ("acer", "auc", "eer", "acc"):
            assert r[m] == round(r[m], 2) and 0 <= r[m] <= 100
    assert cli.main(["report", "--format", "csv", "--out", str(root / "r.csv"), str(root)]) == 0
    assert (root / "r.csv").read_text().startswith("protocol,comparator")


@pytest.mark.parametrize(
    "argv",
    [
        ["split", "--protocol", "p9", "--data", "x"],
        ["eval", "--checkpoint", "missing.safetensors", "--split", "s.json", "--comparator", "hiptune"],
        ["train", "--config", "missing.yaml"],
        ["report", "nowhere"],
        ["generate", "--identities", "1", "--out", "x"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        code = cli.main(argv)
    except SystemExit as exc:  # argparse rejections
        code = exc.code
    assert code == 2


def test_protocol_too_small_exits_2(tmp_path):
    data = tmp_path / "d"
    assert cli.main(["generate", "--identities", "4", "--frames", "1", "--size", "8", "--out", str(data)]) == 0
    assert cli.main(["split", "--protocol", "p1", "--data", str(data)]) == 2


def test_stage2_without_stage1_exits_2(workspace, tmp_path):
    _, _, cfg = workspace
    assert cli.main(["train", "--stage", "2", "--config", str(cfg), "--out", str(tmp_path / "none.safetensors")]) == 2


def test_runtime_failure_exits_1(tmp_path, monkeypatch):
    def boom(cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "prepare_corpus", boom)
    assert cli.main(["generate", "--out", str(tmp_path / "d")]) == 1
