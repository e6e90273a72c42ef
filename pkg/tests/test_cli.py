import csv
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import box_mask, image
from largen.checkpoint import read_manifest
from largen.cli import build_parser, main
from largen.imageio import save_image, save_mask


def run(*argv) -> int:
    return main([str(a) for a in argv])


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("build-data", "--out", root / "data", "--num", 20, "--seed", 0) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"batch_size": 2, "max_samples": 8, "p_text": 0.2}))
    assert run("train", "--stage", 1, "--data", root / "data", "--config", cfg, "--steps", 2,
               "--ckpt-out", root / "s1") == 0
    assert run("train", "--stage", 2, "--data", root / "data", "--config", cfg, "--steps", 2,
               "--init-from", root / "s1", "--ckpt-out", root / "s2") == 0
    assert run("build-bench", "--data", root / "data", "--out", root / "bench") == 0
    save_image(root / "scene.png", image(0))
    save_mask(root / "mask.png", box_mask(20, 16, 44, 48))
    save_image(root / "subject.png", image(1, 48))
    return root


def test_build_data_deterministic(work, tmp_path):
    assert run("build-data", "--out", tmp_path / "again", "--num", 20, "--seed", 0) == 0
    assert tree(tmp_path / "again") == tree(work / "data")


def test_build_data_errors(tmp_path, capsys):
    assert run("build-data", "--out", tmp_path / "x", "--num", 0) == 3
    assert "empty dataset requested" in capsys.readouterr().err
    assert run("build-data", "--out", tmp_path / "y", "--num", 3, "--annotators", f"replay:{tmp_path}/none") == 3
    assert "tagging" in capsys.readouterr().err
    assert run("build-data", "--out", tmp_path / "z", "--num", 3, "--annotators", "magic") == 2


def test_train_manifests(work):
    m1, m2 = read_manifest(work / "s1"), read_manifest(work / "s2")
    assert m1["stage"] == 1 and m2["stage"] == 2
    assert m2["parent_hash"] == m1["weights_sha256"]
    # file values override defaults, flags override file values
    assert m1["train_config"]["batch_size"] == 2 and m1["train_config"]["p_text"] == 0.2
    assert m1["train_config"]["steps"] == 2
    assert (work / "s1" / "loss.csv").read_text().startswith("step,loss,smoothed_loss\n")


def test_train_usage_errors(work, tmp_path, capsys):
    assert run("train", "--stage", 2, "--data", work / "data", "--ckpt-out", tmp_path / "c") == 2
    assert "--init-from" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert run("train", "--stage", 1, "--data", work / "data", "--config", bad, "--ckpt-out", tmp_path / "c") == 2
    assert run("train", "--stage", 1, "--data", tmp_path / "nodata", "--ckpt-out", tmp_path / "c") == 3


def _sample(work, out, *extra):
    return run("sample", "--ckpt", work / "s2", "--scene", work / "scene.png", "--mask", work / "mask.png",
               "--steps", 2, "--seed", 3, "--out", out, *extra)


def test_sample_deterministic_and_flexible(work, tmp_path):
    assert _sample(work, tmp_path / "a.png", "--subject", work / "subject.png", "--prompt", "a red circle") == 0
    assert _sample(work, tmp_path / "b.png", "--subject", work / "subject.png", "--prompt", "a red circle") == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert _sample(work, tmp_path / "text.png", "--prompt", "a red circle") == 0
    assert _sample(work, tmp_path / "img.png", "--subject", work / "subject.png") == 0
    assert _sample(work, tmp_path / "none.png", "--no-refine", "--no-blend") == 0
    echo = json.loads((tmp_path / "a.json").read_text())
    assert echo["guidance"]["beta"] == 0.3 and echo["guidance"]["w"] == 7.5


def test_sample_dump_latents(work, tmp_path):
    assert _sample(work, tmp_path / "o.png", "--prompt", "x", "--dump-latents", tmp_path / "lat") == 0
    index = json.loads((tmp_path / "lat" / "index.json").read_text())["steps"]
    assert len(index) == 2 and index[-1]["t"] == -1
    assert np.load(tmp_path / "lat" / index[0]["file"]).shape == (48, 16, 16)


def test_sample_size_mismatch(work, tmp_path):
    save_mask(tmp_path / "m.png", box_mask(1, 1, 5, 5, size=32))
    assert run("sample", "--ckpt", work / "s1", "--scene", work / "scene.png", "--mask", tmp_path / "m.png",
               "--out", tmp_path / "o.png", "--steps", 1) == 3


def test_eval_toy_benchmark(work, tmp_path):
    assert run("eval", "--ckpt", work / "s2", "--bench", work / "bench", "--out", tmp_path / "e", "--steps", 1) == 0
    rows = list(csv.DictReader(open(tmp_path / "e" / "results.csv")))
    assert len(rows) == 60
    assert run("eval", "--ckpt", work / "s2", "--bench", tmp_path / "nobench", "--out", tmp_path / "f") == 3


def test_sweep_ten_rows(work, tmp_path):
    root = tmp_path / "small"
    assert run("build-bench", "--data", work / "data", "--out", root, "--scenes", 1, "--subjects", 1,
               "--prompts", 1) == 0
    assert run("sweep-beta", "--ckpt", work / "s2", "--bench", root, "--out", tmp_path / "s", "--steps", 1,
               "--betas", "0.1:1.0:0.1") == 0
    summary = list(csv.DictReader(open(tmp_path / "s" / "summary.csv")))
    assert len(summary) == 10 and summary[0]["beta"] == "0.1"
    first = (tmp_path / "s" / "results.csv").read_bytes()
    assert run("sweep-beta", "--ckpt", work / "s2", "--bench", root, "--out", tmp_path / "s", "--steps", 1,
               "--betas", "0.1:1.0:0.1") == 0
    assert (tmp_path / "s" / "results.csv").read_bytes() == first


def test_ablate_missing_variant(work, tmp_path, capsys):
    assert run("ablate", "--bench", work / "bench", "--out", tmp_path / "a", "--baseline", work / "s1",
               "--assign", work / "s1") == 3
    err = capsys.readouterr().err
    assert "+locate" in err and "+refine" in err


def test_help_lists_guidance_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["sample"].format_help()
    assert "--beta" in text and "0.3" in text and "--cfg-scale" in text and "7.5" in text
    with pytest.raises(SystemExit) as exc:
        main(["sample"])
    assert exc.value.code == 2
