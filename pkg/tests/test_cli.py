import json

import numpy as np
import pytest

from affordkit.cli import build_parser, main
from affordkit.core import (
    AffordanceRecord,
    CategoryLabel,
    DatasetManifest,
    Domain,
    InstructionKind,
    InstructionSpec,
    ManifestHeader,
    SplitTag,
    load_manifest,
    save_manifest,
)
from affordkit.maskops import rle_encode
from affordkit.projection import save_depth_png
from affordkit.synthetic import random_manifest, render_cylinder_scene


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def val_manifest(tmp_path):
    path = tmp_path / "val.jsonl"
    save_manifest(random_manifest(50, seed=21), path)
    return path


def test_eval_oracle(capsys, tmp_path, val_manifest):
    out = tmp_path / "report.json"
    code, stdout, _ = _run(capsys, "eval", "--manifest", str(val_manifest), "--predictor", "oracle", "--out", str(out))
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["overall"] == {"giou": 1.0, "ciou": 1.0}
    assert rep["samples"] == 50
    assert (tmp_path / "report.txt").read_text() == stdout


def test_eval_jobs_byte_identical(capsys, tmp_path, val_manifest):
    texts = []
    for jobs in ("1", "8"):
        out = tmp_path / f"r{jobs}.json"
        assert _run(capsys, "eval", "--manifest", str(val_manifest), "--predictor", "centerbox",
                    "--jobs", jobs, "--out", str(out))[0] == 0  # fmt: skip
        texts.append(out.read_bytes())
    assert texts[0] == texts[1]


def test_eval_remote_needs_endpoint(capsys, tmp_path, val_manifest):
    code, _, err = _run(capsys, "eval", "--manifest", str(val_manifest), "--out", str(tmp_path / "r.json"))
    assert code == 2
    assert json.loads(err)["error"] == "UsageError"


def test_validate_broken(capsys, tmp_path):
    m = random_manifest(3, seed=0)
    bad = m.records[1].__class__(**{**m.records[1].__dict__, "instruction": InstructionSpec(InstructionKind.HARD, "use the " + m.records[1].category.name)})
    path = tmp_path / "broken.jsonl"
    save_manifest(m.with_records([m.records[0], bad, m.records[2]]), path)
    code, stdout, _ = _run(capsys, "validate", "--manifest", str(path))
    assert code == 1
    lines = [json.loads(x) for x in stdout.splitlines()]
    assert [(v["recordId"], v["invariant"]) for v in lines] == [(bad.id, "instruction.hardConstraint")]


def test_validate_clean(capsys, val_manifest):
    assert _run(capsys, "validate", "--manifest", str(val_manifest)) == (0, "", "")


def test_unknown_flag_is_error(capsys, val_manifest):
    with pytest.raises(SystemExit) as e:
        main(["validate", "--manifest", str(val_manifest), "--bogus"])
    assert e.value.code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "UsageError" and "--bogus" in err["message"]


def test_help_lists_flags():
    p = build_parser()
    sub = p._subparsers._group_actions[0].choices
    helps = {name: sp.format_help() for name, sp in sub.items()}
    for flag in ("--manifest", "--seed", "--out", "--jobs", "--predictor", "--predictor-endpoint"):
        assert flag in helps["eval"]
    for flag in ("--ground-endpoint", "--segment-endpoint", "--in-place", "--force"):
        assert flag in helps["annotate"]
    for flag in ("--min-points", "--finger-margin", "--max-width"):
        assert flag in helps["posegen"]
    assert "--strict" in helps["validate"]
    assert "--llm-endpoint" in helps["instructions"] and "--mode" in helps["instructions"]


def test_missing_manifest(capsys, tmp_path):
    code, _, err = _run(capsys, "stats", "--manifest", str(tmp_path / "nope.jsonl"))
    assert code == 1 and json.loads(err)["error"] == "FileNotFound"


def test_sample_reproducible(capsys, tmp_path, val_manifest):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert _run(capsys, "sample", "--manifest", str(val_manifest), "--n", "10", "--seed", "7", "--out", str(p))[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(load_manifest(a)) == 10


def test_in_place_guard(capsys, val_manifest):
    before = val_manifest.read_bytes()
    code, _, err = _run(capsys, "instructions", "--manifest", str(val_manifest), "--mode", "template",
                        "--out", str(val_manifest))  # fmt: skip
    assert code == 1 and json.loads(err)["error"] == "WouldOverwrite"
    assert val_manifest.read_bytes() == before
    assert _run(capsys, "instructions", "--manifest", str(val_manifest), "--mode", "template", "--in-place")[0] == 0


def test_instructions_offline(capsys, tmp_path, val_manifest):
    out = tmp_path / "easy.jsonl"
    code, _, err = _run(capsys, "instructions", "--manifest", str(val_manifest), "--mode", "easy", "--offline",
                        "--out", str(out))  # fmt: skip
    assert code == 0
    lines = [json.loads(x) for x in out.read_text().splitlines()]
    assert lines and all(x["instructionKind"] == "easy" for x in lines)
    assert "generated" in json.loads(err)


def test_stats(capsys, val_manifest):
    code, stdout, _ = _run(capsys, "stats", "--manifest", str(val_manifest))
    s = json.loads(stdout)
    assert code == 0 and s["records"] == 50
    assert sum(s["category"].values()) == 50


def test_annotate_writes_spool(capsys, tmp_path):
    m = random_manifest(4, seed=5)
    recs = [r.__class__(**{**r.__dict__, "mask": None, "provenance": None}).with_extras(source="RLBench", imageSize=[24, 32])
            for r in m.records]  # fmt: skip
    src = tmp_path / "in.jsonl"
    save_manifest(m.with_records(recs), src)
    out = tmp_path / "out.jsonl"
    code, stdout, _ = _run(capsys, "annotate", "--manifest", str(src), "--out", str(out), "--jobs", "2")
    assert code == 0
    assert json.loads(stdout)["pendingHuman"] == 4
    spool = tmp_path / "out.human.jsonl"
    assert [json.loads(x)["recordId"] for x in spool.read_text().splitlines()] == [r.id for r in recs]


def _rig(tmp_path):
    scene = render_cylinder_scene()
    save_depth_png(scene.depth, tmp_path / "depth.png")
    rec = AffordanceRecord(
        id="cyl",
        image_path="rgb.png",
        category=CategoryLabel("screwdriver"),
        domain=Domain.ROBOT,
        splits=SplitTag("val"),
        instruction=InstructionSpec(InstructionKind.TEMPLATE, "Please segment the affordance map of screwdriver in this image"),
        mask=rle_encode(scene.mask),
        provenance=None,
        depth_path="depth.png",
        camera=(scene.K, scene.T),
    )
    path = tmp_path / "rig.jsonl"
    save_manifest(DatasetManifest(ManifestHeader("."), (rec,)), path)
    return path, scene


def test_posegen_cylinder(capsys, tmp_path):
    path, scene = _rig(tmp_path)
    out = tmp_path / "poses.jsonl"
    code, stdout, _ = _run(capsys, "posegen", "--manifest", str(path), "--max-width", "0.085",
                           "--finger-margin", "0.005", "--out", str(out))  # fmt: skip
    assert code == 0 and json.loads(stdout)["poses"] == 1
    pose = json.loads(out.read_text())
    assert pose["recordId"] == "cyl"
    # diameter plus two finger margins; depth PNG quantizes to 1 mm
    assert pose["width"] == pytest.approx(2 * scene.radius + 2 * 0.005, abs=0.002)
    R = np.array(pose["rotation"]).reshape(3, 3)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    # closing axis lies across the cylinder, i.e. nearly orthogonal to world x
    assert abs(R[0, 1]) < np.sin(np.radians(10))


def test_posegen_reports_too_few_points(capsys, tmp_path):
    path, _ = _rig(tmp_path)
    out = tmp_path / "poses.jsonl"
    assert _run(capsys, "posegen", "--manifest", str(path), "--min-points", "10000000", "--out", str(out))[0] == 0
    assert "TooFewPoints" in json.loads(out.read_text())["error"]
