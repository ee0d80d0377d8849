import json

import numpy as np
import pytest
from PIL import Image

from brushpaint import checkpoint as ck
from brushpaint.cli import main


@pytest.fixture
def cfg_file(tiny_run_cfg, tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(tiny_run_cfg.with_overrides({"corpus.eval_size": 3, "schedule.T": 4}).to_json())
    return str(p)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_usage_errors_exit_1(capsys):
    assert run(capsys)[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "eval", "--out", "x.json")[0] == 1  # needs a model choice
    assert run(capsys, "eval", "--identity", "--untrained", "--out", "x.json")[0] == 1


def test_bad_config_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "--set", "losses.eta=-1", "eval", "--identity", "--out", tmp_path / "r.json")
    assert code == 1 and "ConfigError" in err


def test_missing_checkpoint_exit_2(capsys, cfg_file, tmp_path):
    code, _, err = run(capsys, "--config", cfg_file, "eval", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path / "r.json")
    assert code == 2 and "SchemaError" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_3(capsys, cfg_file, tmp_path):
    assert run(capsys, "--config", cfg_file, "pretrain", "--workdir", tmp_path / "s0", "--steps", "1")[0] == 0
    code, _, err = run(capsys, "--config", cfg_file, "--set", "optim.lr_branch=1e300", "train", "--base", tmp_path / "s0" / "base.ckpt", "--workdir", tmp_path / "s1", "--steps", "3")
    assert code == 3 and "NumericError" in err and '"step"' in err


def test_end_to_end(capsys, cfg_file, tmp_path):
    code, out, _ = run(capsys, "--config", cfg_file, "pretrain", "--workdir", tmp_path / "s0")
    assert code == 0 and json.loads(out)["steps"] == 3
    base = tmp_path / "s0" / "base.ckpt"

    code, out, _ = run(capsys, "--config", cfg_file, "annotate", "--out", tmp_path / "ann.jsonl")
    assert code == 0 and json.loads(out)["partial"] is False

    code, out, _ = run(capsys, "--config", cfg_file, "train", "--base", base, "--workdir", tmp_path / "s1", "--annotations", tmp_path / "ann.jsonl", "--eta", "0")
    assert code == 0
    full = tmp_path / "s1" / "full.ckpt"
    assert ck.load(full).config["losses"]["eta"] == 0.0

    code, out, err = run(capsys, "--config", cfg_file, "sample", "--checkpoint", full, "--scene-seed", 4, "--prompt", "a purple square", "--out-dir", tmp_path / "smp")
    assert code == 0 and "purple" in json.loads(out)["warnings"][0]
    names = sorted(p.name for p in (tmp_path / "smp").iterdir())
    assert names == ["blended.png", "generated.png", "latents.ckpt", "masked.png", "original.png"]
    with Image.open(tmp_path / "smp" / "blended.png") as im:
        assert im.size == (64, 64)
    lat = ck.load(tmp_path / "smp" / "latents.ckpt").arrays
    keep = np.broadcast_to(lat["mask"] == 0, lat["blended"].shape)
    assert np.array_equal(lat["blended"][keep], lat["original"][keep])

    code, out, _ = run(capsys, "--config", cfg_file, "eval", "--identity", "--out", tmp_path / "rep" / "id.json")
    assert code == 0
    code, out, _ = run(capsys, "--config", cfg_file, "eval", "--checkpoint", full, "--out", tmp_path / "rep" / "m.json", "--compare", tmp_path / "rep" / "id.json", "--png-dir", tmp_path / "png")
    assert code == 0
    body = json.loads(out)
    assert body["paired_table"].endswith("m_paired.md")
    rep = json.loads((tmp_path / "rep" / "m.json").read_text())
    assert rep["checkpoint"]["sha256"] == ck.file_sha256(full)
    assert len(list((tmp_path / "png").glob("*.png"))) == len(rep["per_image"])


def test_annotate_partial_exit_2(capsys, cfg_file, tmp_path):
    code, out, err = run(capsys, "--config", cfg_file, "annotate", "--out", tmp_path / "a.jsonl", "--stop-after", 2)
    assert code == 2 and json.loads(out)["partial"] is True
    # the rerun resumes and completes
    assert run(capsys, "--config", cfg_file, "annotate", "--out", tmp_path / "a.jsonl")[0] == 0


def test_sample_bad_object_index(capsys, cfg_file, tmp_path):
    assert run(capsys, "--config", cfg_file, "pretrain", "--workdir", tmp_path / "s0", "--steps", "1")[0] == 0
    code, _, err = run(capsys, "--config", cfg_file, "sample", "--checkpoint", tmp_path / "s0" / "base.ckpt", "--scene-seed", 1, "--object-index", 9, "--out-dir", tmp_path / "o")
    assert code == 2


def test_unreachable_server_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "--server", "http://127.0.0.1:9", "eval", "--identity", "--out", tmp_path / "r.json")
    assert code == 1 and "cannot reach" in err
