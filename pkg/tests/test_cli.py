import csv
import json

import numpy as np
import pytest
from PIL import Image

from nextreid.cli import main

SMALL = json.dumps({"encoder": {"dim": 32, "heads": 4, "depth": 1}, "num_semantic": 2, "num_structure": 2})


def run(*argv):
    return main([str(a) for a in argv])


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert run("synth", "--out", root, "--ids", 4, "--per-id", 3, "--test-ids", 2, "--cameras", 2, "--seed", 1) == 0
    return root


@pytest.fixture(scope="module")
def trained(synth_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert run("train", "--data", synth_root, "--out", out, "--steps", 3, "--P", 2, "--K", 2, "--model", SMALL) == 0
    return out


def test_synth_layout(tmp_path):
    root = tmp_path / "d"
    assert run("synth", "--out", root) == 0
    assert len(list((root / "rgb").glob("*.png"))) == 32
    assert len(list((root / "captions").glob("*.json"))) == 32
    assert json.loads((root / "config.json").read_text())["ids"] == 8


def test_synth_force(tmp_path, capsys):
    root = tmp_path / "d"
    run("synth", "--out", root, "--ids", 2, "--per-id", 2)
    first = _tree(root)
    assert run("synth", "--out", root, "--ids", 2, "--per-id", 2) == 1
    assert "--force" in capsys.readouterr().err
    assert run("synth", "--out", root, "--ids", 2, "--per-id", 2, "--force") == 0
    again = _tree(root)
    assert json.loads(again.pop("config.json"))["force"] and first.pop("config.json")
    assert again == first


def test_missing_required_option():
    with pytest.raises(SystemExit):
        run("train", "--out", "x")


def test_caption_replay(tmp_path):
    root, fx = tmp_path / "d", tmp_path / "fx"
    run("synth", "--out", root, "--ids", 2, "--per-id", 2)
    assert run("caption", "--root", root, "--replay", fx, "--make-fixtures") == 0
    side = json.loads(next((root / "captions").glob("*.json")).read_text())
    assert "attributes" in side
    before = _tree(root / "captions")
    assert run("caption", "--root", root, "--replay", fx, "--force") == 0
    assert _tree(root / "captions") == before
    assert (root / "caption_config.json").exists()


def test_caption_missing_fixtures(tmp_path, capsys):
    root = tmp_path / "d"
    run("synth", "--out", root, "--ids", 2, "--per-id", 2)
    assert run("caption", "--root", root, "--replay", tmp_path / "empty") == 1
    err = capsys.readouterr().err
    assert err.count("failed 000") == 4


def test_caption_template_offline(tmp_path, capsys):
    root, fx = tmp_path / "d", tmp_path / "fx"
    run("synth", "--out", root, "--ids", 2, "--per-id", 2)
    assert run("caption", "--root", root) == 1
    assert "no attributes" in capsys.readouterr().err
    run("caption", "--root", root, "--replay", fx, "--make-fixtures")
    before = _tree(root / "captions")
    assert run("caption", "--root", root) == 0
    assert _tree(root / "captions") == before
    assert run("caption", "--root", root, "--composer", "llm") == 1


def test_train_outputs(trained):
    for f in ("config.json", "train.jsonl", "last.npz", "metrics.json"):
        assert (trained / f).exists()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["model"]["encoder"]["image_size"] == [32, 16]
    lines = (trained / "train.jsonl").read_text().splitlines()
    assert len(lines) == 3 and "mask_density" in json.loads(lines[0])


def test_train_reproducible_from_echo(synth_root, trained, tmp_path):
    out = tmp_path / "again"
    assert run("train", "--config", trained / "config.json", "--out", out) == 0
    assert (out / "train.jsonl").read_text() == (trained / "train.jsonl").read_text()


def test_train_baseline_toggles(synth_root, tmp_path):
    out = tmp_path / "base"
    assert run("train", "--data", synth_root, "--out", out, "--steps", 2, "--P", 2, "--K", 2,
               "--model", SMALL, "--no-mmfa", "--no-tmse", "--no-csse", "--no-augment") == 0
    model = json.loads((out / "config.json").read_text())["model"]
    assert not (model["use_mmfa"] or model["use_tmse"] or model["use_csse"])
    assert json.loads((out / "train.jsonl").read_text().splitlines()[0])["omega"] is None


def test_invalid_toggle_combination(synth_root, tmp_path, capsys):
    assert run("train", "--data", synth_root, "--out", tmp_path / "x", "--steps", 1, "--no-mmfa") == 1
    assert "MMFA" in capsys.readouterr().err


def test_eval_protocols_differ(synth_root, trained, tmp_path):
    results = {}
    for proto in ("none", "standard_camera"):
        out = tmp_path / proto
        assert run("eval", "--checkpoint", trained / "last.npz", "--data", synth_root, "--out", out, "--protocol", proto) == 0
        results[proto] = json.loads((out / "metrics.json").read_text())
    assert results["none"]["protocol"] == "none"
    a, b = ({k: r[k] for k in ("mAP", "R1", "R5")} for r in results.values())
    assert a != b


def test_eval_strict_needs_time(synth_root, trained, tmp_path, capsys):
    import shutil

    root = tmp_path / "notime"
    shutil.copytree(synth_root, root)
    with open(root / "meta.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(root / "meta.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({**r, "time_label": ""} for r in rows)
    args = ("eval", "--checkpoint", trained / "last.npz", "--data", root, "--out", tmp_path / "e")
    assert run(*args, "--protocol", "msvr310_strict") == 1
    assert "time labels" in capsys.readouterr().err
    assert run(*args, "--protocol", "none") == 0


def test_study(tmp_path):
    out = tmp_path / "study"
    assert run("study", "--axis", "caption_quality", "--grid", 35, 100, "--out", out, "--steps", 1, "--P", 2, "--K", 2,
               "--ids", 2, "--per-id", 2, "--test-ids", 2, "--model", SMALL, "--no-augment") == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["name"] for r in report["rows"]] == ["35.0", "100.0"]
    assert json.loads((out / "config.json").read_text())["spec"]["axis"] == "caption_quality"


def test_diag(synth_root, trained, tmp_path):
    out = tmp_path / "diag"
    assert run("diag", "--checkpoint", trained / "last.npz", "--data", synth_root, "--out", out) == 0
    masks = sorted((out / "masks").rglob("*.png"))
    assert len(masks) == 2 * 3
    for p in masks:
        assert set(np.unique(np.asarray(Image.open(p)))) <= {0, 255}
    with open(out / "omega.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    for r in rows:
        assert sum(float(v) for k, v in r.items() if k.startswith("expert")) == pytest.approx(1.0, abs=1e-6)
    sid = masks[0].parent.name
    assert (out / "routes" / f"{sid}.json").exists()
    assert (out / "attention" / sid / "entry0.csv").exists()
    assert (out / "activations" / sid / "norms.csv").exists()


def test_config_file_overrides(synth_root, tmp_path):
    import yaml

    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"data": str(synth_root), "steps": 1, "P": 2, "K": 2, "model": json.loads(SMALL)}))
    out = tmp_path / "o"
    assert run("train", "--config", cfg, "--out", out, "--steps", 2) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["steps"] == 2 and echo["P"] == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: red\n")
    assert run("train", "--config", bad, "--out", out) == 1
