import itertools
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from affordkit.core import DatasetManifest, ManifestHeader, ProvenanceTool, dumps_manifest
from affordkit.annotate import (
    AnnotationTask,
    BackendSet,
    BackendUnavailable,
    HumanQueue,
    ToolComposition,
    ToolFailed,
    ToolId,
    ToolOutcome,
    annotate_manifest,
    apply_human_results,
    load_annotation_config,
    plan_tools,
    results_path_for,
    run_cascade,
    task_from_record,
)
from affordkit.maskops import BBox, BinaryMask, RleMask, rasterize_box, rle_decode, rle_encode
from affordkit.synthetic import random_manifest

T1, T2, T3, T4, T5 = ToolId
SIZE = (20, 30)
BOX_MASK = rle_encode(rasterize_box(BBox(2, 3, 12, 13), SIZE[1], SIZE[0]))
AUTOMATED = (T1, T2, T3, T4)


def _task(**kw):
    base = dict(record_id="r1", image_path="im.png", category="knife", size=SIZE)
    base.update(kw)
    return AnnotationTask(**base)


CONFIG = load_annotation_config()


def test_default_config_shape():
    assert set(CONFIG.compositions) == {"HANDAL", "Open-X/RT-1", "Open-X/Bridge", "EgoObjects", "GraspNet", "RLBench"}
    for comp in CONFIG.compositions.values():
        assert comp.problems() == []
    assert CONFIG.composition("HANDAL").tools_for("mug") == (T1,)
    assert CONFIG.composition("RLBench").tools_for("anything") == (T5,)
    assert CONFIG.composition("never heard of it").tools_for("x") == (T5,)


def test_plan_handal():
    t = _task(category="mug", original_mask=BOX_MASK)
    assert plan_tools(t, CONFIG.composition("HANDAL"), CONFIG.part_vocabulary) == [T1]


def test_plan_egoobjects_knife():
    t = _task(category="knife", gt_box=BBox(0, 0, 5, 5))
    assert plan_tools(t, CONFIG.composition("EgoObjects"), CONFIG.part_vocabulary) == [T4, T2, T5]


def test_plan_forced_human():
    comp = ToolComposition("x", default=(T1, T3))
    assert plan_tools(_task(category="wok"), comp, {}) == [T5]


def test_plan_filters_unmet_inputs():
    comp = ToolComposition("x", default=(T1, T2, T3, T4, T5))
    assert plan_tools(_task(category="wok", language="pick up the wok"), comp, {"knife": "handle"}) == [T3, T5]


def test_composition_problems():
    from affordkit.annotate import CompositionRule

    bad = ToolComposition("x", (CompositionRule(("a",), (T5, T1)), CompositionRule(("a",), (T1,))), ())
    msgs = bad.problems()
    assert any("more than one rule" in m for m in msgs)
    assert any("last" in m for m in msgs)
    assert any("empty" in m for m in msgs)


def test_cascade_passthrough():
    t = _task(original_mask=BOX_MASK)
    res = run_cascade(t, [T1], BackendSet())
    assert res.final == BOX_MASK
    assert [(o.tool, o.status) for o in res.trace] == [(T1, "success")]
    assert res.provenance.tool is ProvenanceTool.ORIGINAL_MASK


def test_cascade_t3_error_then_t2():
    t = _task(gt_box=BBox(2, 3, 12, 13), language="cut with the knife")
    res = run_cascade(t, [T3, T2, T5], BackendSet())  # no grounding backend for T3
    assert [(o.tool, o.status) for o in res.trace] == [(T3, "failed"), (T2, "success")]
    assert "BackendUnavailable" in res.trace[0].note
    assert res.final == BOX_MASK
    assert res.provenance.tool is ProvenanceTool.SEGMENTER


def test_cascade_human_only(tmp_path):
    q = HumanQueue(tmp_path / "q.jsonl")
    res = run_cascade(_task(), [T5], BackendSet(), q)
    assert res.final is None and res.pending_human
    assert [(o.tool, o.status, o.note) for o in res.trace] == [(T5, "skipped", "pending human annotation")]
    assert q.pending() == [{"recordId": "r1", "imagePath": "im.png", "category": "knife"}]


def _runner(ok):
    def run(task):
        if ok:
            return BOX_MASK
        raise ToolFailed("scripted failure")

    return run


@pytest.mark.parametrize("outcomes", list(itertools.product((False, True), repeat=4)))
def test_cascade_matrix(outcomes):
    backends = BackendSet(runners={tool: _runner(ok) for tool, ok in zip(AUTOMATED, outcomes)})
    plan = [T1, T2, T3, T4, T5]
    q = HumanQueue()
    res = run_cascade(_task(), plan, backends, q)
    first = next((i for i, ok in enumerate(outcomes) if ok), None)
    if first is None:
        assert [o.tool for o in res.trace] == plan
        assert [o.status for o in res.trace] == ["failed"] * 4 + ["skipped"]
        assert len(q.items) == 1 and res.final is None
    else:
        assert [o.tool for o in res.trace] == plan[: first + 1]
        assert [o.status for o in res.trace] == ["failed"] * first + ["success"]
        assert res.provenance.detail == plan[first].value
        assert q.items == []


@pytest.mark.parametrize(
    "mask, why",
    [
        (RleMask((20, 30), (600,)), "empty"),
        (rle_encode(rasterize_box(BBox(0, 0, 4, 4), 30, 20)), "below minimum"),
        (RleMask((10, 10), (100,)), "size"),
        (RleMask((20, 30), (5, 5)), "invalid RLE"),
    ],
)
def test_unusable_masks_fail(mask, why):
    backends = BackendSet(runners={T2: lambda t: mask})
    res = run_cascade(_task(), [T2, T5], backends, HumanQueue())
    assert res.trace[0].status == "failed" and why in res.trace[0].note
    assert res.pending_human


def test_min_area_configurable():
    small = rle_encode(rasterize_box(BBox(0, 0, 4, 4), 30, 20))
    backends = BackendSet(runners={T2: lambda t: small})
    assert run_cascade(_task(), [T2], backends, min_area=16).final == small


def test_outcome_invariant():
    with pytest.raises(ValueError):
        ToolOutcome(T1, "failed", BOX_MASK)
    with pytest.raises(ValueError):
        ToolOutcome(T1, "success", None)


def test_backend_unavailable_names_tool():
    with pytest.raises(BackendUnavailable) as e:
        BackendSet(segmenter=None).run(T2, _task(gt_box=BBox(0, 0, 3, 3)))
    assert e.value.tool is T2


class _Services(BaseHTTPRequestHandler):
    calls = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.calls.append((self.path, body))
        if self.path == "/ground":
            reply = {"boxes": [[1, 1, 6, 6], [0, 0, 2, 2]]}
        elif self.path == "/ground_part":
            reply = {"boxes": [[10, 5, 20, 15]]}
        elif self.path == "/segment":
            x0, y0, x1, y1 = body["box"]
            reply = {"mask": rle_encode(rasterize_box(BBox(x0, y0, x1, y1), 30, 20)).to_json()}
        else:
            self.send_response(404)
            self.end_headers()
            return
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *a):
        pass


@pytest.fixture
def services(tmp_path):
    (tmp_path / "im.png").write_bytes(b"img")
    srv = HTTPServer(("127.0.0.1", 0), _Services)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    _Services.calls.clear()
    yield f"http://127.0.0.1:{srv.server_port}", tmp_path
    srv.shutdown()


def test_http_backends(services):
    url, root = services
    b = BackendSet.from_endpoints(url, url, part_vocabulary={"knife": "handle"}, image_root=root)
    m3 = b.run(T3, _task(language="cut the bread"))
    assert rle_decode(m3).bits[1:6, 1:6].all() and m3.area() == 25
    m4 = b.run(T4, _task())
    assert m4.area() == 100
    paths = [p for p, _ in _Services.calls]
    assert paths == ["/ground", "/segment", "/ground_part", "/segment"]
    assert _Services.calls[0][1]["text"] == "cut the bread"
    assert _Services.calls[2][1]["part"] == "handle" and _Services.calls[2][1]["category"] == "knife"
    assert set(_Services.calls[1][1]) == {"image", "box"}


def _pending_manifest():
    m = random_manifest(6, seed=2)
    recs = []
    for i, r in enumerate(m.records):
        box = [1, 1, 9, 9] if i % 2 == 0 else None
        r = r.__class__(**{**r.__dict__, "mask": None, "provenance": None})
        r = r.with_extras(source="EgoObjects", imageSize=[24, 32], gtBox=box)
        recs.append(r)
    return m.with_records(recs)


def test_annotate_manifest_and_idempotence(tmp_path):
    m = _pending_manifest()
    q = HumanQueue(tmp_path / "h.jsonl")
    run = annotate_manifest(m, CONFIG, BackendSet(part_vocabulary=CONFIG.part_vocabulary), q, jobs=4)
    out = run.manifest
    comp = CONFIG.composition("EgoObjects")
    for before, r in zip(m.records, out.records):
        # no grounding service: only the box-prompted segmenter can succeed
        plan = plan_tools(task_from_record(before), comp, CONFIG.part_vocabulary)
        if T2 in plan:
            assert r.provenance.tool is ProvenanceTool.SEGMENTER
            assert r.mask.area() == 64
        else:
            assert r.mask is None and r.extra("annotationStatus") == "pending_human"
    assert any(r.mask is not None for r in out.records)
    pending = [e["recordId"] for e in q.pending()]
    assert pending == [r.id for r in out.records if r.extra("annotationStatus") == "pending_human"]

    again = annotate_manifest(out, CONFIG, BackendSet(), q, jobs=4)
    assert dumps_manifest(again.manifest) == dumps_manifest(out)
    assert len(again.skipped) == len(out.records)
    assert len(q.pending()) == len(pending)

    forced = annotate_manifest(out, CONFIG, BackendSet(), HumanQueue(), force=True, jobs=1)
    assert len(forced.results) == len(out.records)


def test_annotate_jobs_identical(tmp_path):
    m = _pending_manifest()
    outs = []
    for jobs in (1, 8):
        q = HumanQueue(tmp_path / f"h{jobs}.jsonl")
        run = annotate_manifest(m, CONFIG, BackendSet(), q, jobs=jobs)
        outs.append((dumps_manifest(run.manifest), (tmp_path / f"h{jobs}.jsonl").read_text()))
    assert outs[0] == outs[1]


def test_all_failing_never_drops():
    m = _pending_manifest()
    fail = {t: _runner(False) for t in AUTOMATED}
    q = HumanQueue()
    run = annotate_manifest(m, CONFIG, BackendSet(runners=fail), q, jobs=3)
    assert sorted(e["recordId"] for e in q.items) == sorted(r.id for r in m.records)
    assert all(r.extra("annotationStatus") == "pending_human" for r in run.manifest.records)


def test_human_results_merge(tmp_path):
    m = _pending_manifest()
    spool = tmp_path / "h.jsonl"
    run = annotate_manifest(m, CONFIG, BackendSet(runners={t: _runner(False) for t in AUTOMATED}), HumanQueue(spool))
    res_path = results_path_for(spool)
    assert res_path.name == "h.results.jsonl"
    target = run.manifest.records[3]
    mask = rle_encode(BinaryMask(np.ones((24, 32), bool)))
    res_path.write_text(json.dumps({"recordId": target.id, "mask": mask.to_json()}) + "\n")
    merged = apply_human_results(run.manifest, res_path)
    r = merged.records[3]
    assert r.mask == mask and r.provenance.tool is ProvenanceTool.HUMAN
    assert r.extra("annotationStatus") is None
    assert merged.records[2].mask is None
