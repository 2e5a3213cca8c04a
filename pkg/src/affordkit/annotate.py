"""Prioritized annotation cascade.

Five tools are tried in a per-dataset, per-category order:

* T1 reuse the source dataset's own mask,
* T2 prompt a segmenter with the ground-truth box,
* T3 ground the source language instruction to a box, then segment it,
* T4 ground an object part (e.g. a handle), then segment it,
* T5 hand the task to a human labeler.

The first automated tool that yields a usable mask wins. Human tasks are
spooled to a JSON Lines file and never block the cascade.
"""

from __future__ import annotations

import enum
import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from .core import AffordanceRecord, DatasetManifest, ProvenanceTag, ProvenanceTool
from .maskops import BBox, BinaryMask, RleMask, rasterize_box, rasterize_polygon, rle_encode

DEFAULT_MIN_AREA = 25


class ToolId(str, enum.Enum):
    T1_ORIGINAL = "T1_original"
    T2_SEGMENTER = "T2_segmenter"
    T3_GROUNDING_SEGMENTER = "T3_grounding_segmenter"
    T4_PART_GROUNDING_SEGMENTER = "T4_part_grounding_segmenter"
    T5_HUMAN = "T5_human"


PROVENANCE = {
    ToolId.T1_ORIGINAL: ProvenanceTool.ORIGINAL_MASK,
    ToolId.T2_SEGMENTER: ProvenanceTool.SEGMENTER,
    ToolId.T3_GROUNDING_SEGMENTER: ProvenanceTool.GROUNDING_SEGMENTER,
    ToolId.T4_PART_GROUNDING_SEGMENTER: ProvenanceTool.PART_GROUNDING_SEGMENTER,
    ToolId.T5_HUMAN: ProvenanceTool.HUMAN,
}


class BackendUnavailable(RuntimeError):
    def __init__(self, tool: ToolId, reason: str = "no backend configured"):
        super().__init__(f"{tool.value}: {reason}")
        self.tool = tool


class ToolFailed(RuntimeError):
    pass


# --- composition config ------------------------------------------------------


@dataclass(frozen=True)
class CompositionRule:
    categories: tuple[str, ...]
    tools: tuple[ToolId, ...]


@dataclass(frozen=True)
class ToolComposition:
    dataset_name: str
    rules: tuple[CompositionRule, ...] = ()
    default: tuple[ToolId, ...] = (ToolId.T5_HUMAN,)

    def tools_for(self, category: str) -> tuple[ToolId, ...]:
        for rule in self.rules:
            if category in rule.categories:
                return rule.tools
        return self.default

    def problems(self) -> list[str]:
        out = []
        seen: dict[str, int] = {}
        for i, rule in enumerate(self.rules):
            for c in rule.categories:
                if c in seen and seen[c] != i:
                    out.append(f"{self.dataset_name}: category {c!r} in more than one rule")
                seen[c] = i
        for tools in [r.tools for r in self.rules] + [self.default]:
            if not tools:
                out.append(f"{self.dataset_name}: empty tool list")
            elif ToolId.T5_HUMAN in tools[:-1]:
                out.append(f"{self.dataset_name}: T5_human must be the last tool")
        return out


@dataclass(frozen=True)
class AnnotationConfig:
    compositions: Mapping[str, ToolComposition]
    part_vocabulary: Mapping[str, str]  # category -> part name

    def composition(self, dataset: str | None) -> ToolComposition:
        if dataset in self.compositions:
            return self.compositions[dataset]
        return ToolComposition(dataset or "unknown")


def load_annotation_config(path: str | Path | None = None) -> AnnotationConfig:
    """Read tool compositions and part vocabulary; defaults ship with the package."""
    if path is None:
        text = resources.files("affordkit.data").joinpath("annotation_tools.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    raw = json.loads(text)
    comps = {}
    for c in raw["compositions"]:
        comp = ToolComposition(
            c["dataset"],
            tuple(CompositionRule(tuple(r["categories"]), tuple(ToolId(t) for t in r["tools"])) for r in c.get("rules", [])),
            tuple(ToolId(t) for t in c.get("default", ["T5_human"])),
        )
        bad = comp.problems()
        if bad:
            raise ValueError("; ".join(bad))
        comps[comp.dataset_name] = comp
    return AnnotationConfig(comps, dict(raw.get("partVocabulary", {})))


# --- tasks and planning ------------------------------------------------------


@dataclass(frozen=True)
class AnnotationTask:
    record_id: str
    image_path: str
    category: str
    size: tuple[int, int]  # (height, width)
    original_mask: RleMask | None = None
    gt_box: BBox | None = None
    language: str | None = None

    @property
    def available_inputs(self) -> frozenset[str]:
        out = set()
        if self.original_mask is not None:
            out.add("originalMask")
        if self.gt_box is not None:
            out.add("gtBox")
        if self.language:
            out.add("languageInstruction")
        return frozenset(out)


def plan_tools(
    task: AnnotationTask,
    comp: ToolComposition,
    part_vocabulary: Mapping[str, str] | None = None,
) -> list[ToolId]:
    """Composition order for the task's category, minus tools lacking inputs."""
    have = task.available_inputs
    vocab = part_vocabulary if part_vocabulary is not None else {}
    usable = {
        ToolId.T1_ORIGINAL: "originalMask" in have,
        ToolId.T2_SEGMENTER: "gtBox" in have,
        ToolId.T3_GROUNDING_SEGMENTER: "languageInstruction" in have,
        ToolId.T4_PART_GROUNDING_SEGMENTER: task.category in vocab,
        ToolId.T5_HUMAN: True,
    }
    plan = [t for t in comp.tools_for(task.category) if usable[t]]
    return plan or [ToolId.T5_HUMAN]


# --- backends ----------------------------------------------------------------


class GroundingBackend(Protocol):
    def ground(self, image_path: str, text: str) -> list[BBox]: ...

    def ground_part(self, image_path: str, category: str, part: str) -> list[BBox]: ...


class SegmenterBackend(Protocol):
    def segment_box(self, image_path: str, box: BBox, size: tuple[int, int]) -> RleMask: ...

    def segment_polygon(self, image_path: str, polygon: Sequence[tuple[float, float]], size: tuple[int, int]) -> RleMask: ...


class RasterSegmenter:
    """Degraded segmenter: the box or polygon itself becomes the mask."""

    def segment_box(self, image_path, box, size):
        h, w = size
        return rle_encode(rasterize_box(box, w, h, clip=True))

    def segment_polygon(self, image_path, polygon, size):
        h, w = size
        return rle_encode(rasterize_polygon(polygon, w, h))


def _boxes(reply) -> list[BBox]:
    try:
        return [BBox(*(int(round(v)) for v in b)) for b in reply["boxes"]]
    except (KeyError, TypeError, ValueError):
        raise ToolFailed(f"malformed grounding reply: {str(reply)[:120]}") from None


class HttpGroundingClient:
    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def ground(self, image_path, text):
        from ._http import b64_file, join_url, post_json

        reply = post_json(join_url(self.endpoint, "ground"), {"image": b64_file(image_path), "text": text}, timeout=self.timeout)
        return _boxes(reply)

    def ground_part(self, image_path, category, part):
        from ._http import b64_file, join_url, post_json

        payload = {"image": b64_file(image_path), "category": category, "part": part}
        return _boxes(post_json(join_url(self.endpoint, "ground_part"), payload, timeout=self.timeout))


class HttpSegmenterClient:
    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def _call(self, payload):
        from ._http import join_url, post_json

        reply = post_json(join_url(self.endpoint, "segment"), payload, timeout=self.timeout)
        try:
            return RleMask.from_json(reply["mask"])
        except (KeyError, TypeError, ValueError) as e:
            raise ToolFailed(f"malformed segment reply: {e}") from None

    def segment_box(self, image_path, box, size):
        from ._http import b64_file

        return self._call({"image": b64_file(image_path), "box": [box.x0, box.y0, box.x1, box.y1]})

    def segment_polygon(self, image_path, polygon, size):
        from ._http import b64_file

        return self._call({"image": b64_file(image_path), "polygon": [list(map(float, p)) for p in polygon]})


ToolRunner = Callable[[AnnotationTask], RleMask]


@dataclass
class BackendSet:
    """Backends for the automated tools.

    ``runners`` replaces the built-in behaviour of individual tools, which is
    how tests script success and failure per tool.
    """

    grounding: GroundingBackend | None = None
    segmenter: SegmenterBackend | None = field(default_factory=RasterSegmenter)
    part_vocabulary: Mapping[str, str] = field(default_factory=dict)
    image_root: str | Path | None = None
    runners: dict[ToolId, ToolRunner] = field(default_factory=dict)

    @classmethod
    def from_endpoints(cls, ground: str | None = None, segment: str | None = None, **kw) -> "BackendSet":
        return cls(
            grounding=HttpGroundingClient(ground) if ground else None,
            segmenter=HttpSegmenterClient(segment) if segment else RasterSegmenter(),
            **kw,
        )

    def _image(self, task: AnnotationTask) -> str:
        return str(Path(self.image_root) / task.image_path) if self.image_root is not None else task.image_path

    def _need(self, tool, backend):
        if backend is None:
            raise BackendUnavailable(tool)
        return backend

    def run(self, tool: ToolId, task: AnnotationTask) -> RleMask:
        if tool in self.runners:
            return self.runners[tool](task)
        if tool is ToolId.T1_ORIGINAL:
            if task.original_mask is None:
                raise ToolFailed("no original mask")
            return task.original_mask
        if tool is ToolId.T2_SEGMENTER:
            if task.gt_box is None:
                raise ToolFailed("no ground-truth box")
            seg = self._need(tool, self.segmenter)
            return seg.segment_box(self._image(task), task.gt_box, task.size)
        if tool is ToolId.T3_GROUNDING_SEGMENTER:
            gr = self._need(tool, self.grounding)
            seg = self._need(tool, self.segmenter)
            boxes = gr.ground(self._image(task), task.language or task.category)
            if not boxes:
                raise ToolFailed("grounding found nothing")
            return seg.segment_box(self._image(task), boxes[0], task.size)
        if tool is ToolId.T4_PART_GROUNDING_SEGMENTER:
            part = self.part_vocabulary.get(task.category)
            if part is None:
                raise ToolFailed(f"category {task.category!r} not in part vocabulary")
            gr = self._need(tool, self.grounding)
            seg = self._need(tool, self.segmenter)
            boxes = gr.ground_part(self._image(task), task.category, part)
            if not boxes:
                raise ToolFailed("part grounding found nothing")
            return seg.segment_box(self._image(task), boxes[0], task.size)
        raise ValueError(f"{tool} is not an automated tool")


# --- human queue -------------------------------------------------------------


def results_path_for(spool: str | Path) -> Path:
    """Companion results file: ``queue.jsonl`` -> ``queue.results.jsonl``."""
    p = Path(spool)
    return p.with_name(p.stem + ".results" + (p.suffix or ".jsonl"))


class HumanQueue:
    """Append-only spool of pending human tasks; in memory when ``path`` is None."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.items: list[dict] = []
        self._lock = threading.Lock()

    @staticmethod
    def entry(task: AnnotationTask) -> dict:
        return {"recordId": task.record_id, "imagePath": task.image_path, "category": task.category}

    def enqueue(self, task: AnnotationTask) -> None:
        self.append([self.entry(task)])

    def append(self, entries: Sequence[dict]) -> None:
        with self._lock:
            self.items.extend(entries)
            if self.path is not None and entries:
                with open(self.path, "a", encoding="utf-8") as f:
                    for e in entries:
                        f.write(json.dumps(e, ensure_ascii=False, sort_keys=True) + "\n")
                    f.flush()
                    os.fsync(f.fileno())

    def pending(self) -> list[dict]:
        if self.path is None or not self.path.exists():
            return list(self.items)
        with open(self.path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


class _Collector:
    def __init__(self):
        self.items: list[dict] = []

    def enqueue(self, task: AnnotationTask) -> None:
        self.items.append(HumanQueue.entry(task))


# --- cascade -----------------------------------------------------------------


@dataclass(frozen=True)
class ToolOutcome:
    tool: ToolId
    status: str  # "success" | "failed" | "skipped"
    mask: RleMask | None = None
    note: str = ""

    def __post_init__(self):
        if (self.mask is not None) != (self.status == "success"):
            raise ValueError("a mask is present exactly when status is success")


@dataclass(frozen=True)
class CascadeResult:
    final: RleMask | None
    provenance: ProvenanceTag | None
    trace: tuple[ToolOutcome, ...]

    @property
    def pending_human(self) -> bool:
        return any(o.tool is ToolId.T5_HUMAN for o in self.trace)


def _check_mask(mask, task: AnnotationTask, min_area: int) -> str | None:
    if not isinstance(mask, RleMask):
        return "backend returned no mask"
    if tuple(mask.size) != tuple(task.size):
        return f"mask size {list(mask.size)} != image size {list(task.size)}"
    bad = mask.problems()
    if bad:
        return "invalid RLE: " + "; ".join(bad)
    area = mask.area()
    if area == 0:
        return "empty mask"
    if area < min_area:
        return f"mask area {area} below minimum {min_area}"
    return None


def run_cascade(
    task: AnnotationTask,
    plan: Sequence[ToolId],
    backends: BackendSet,
    queue: HumanQueue | None = None,
    min_area: int = DEFAULT_MIN_AREA,
) -> CascadeResult:
    """Try tools in plan order; stop at the first success or the human hand-off."""
    if not plan:
        raise ValueError("plan is empty")
    trace: list[ToolOutcome] = []
    for tool in plan:
        if tool is ToolId.T5_HUMAN:
            if queue is not None:
                queue.enqueue(task)
            trace.append(ToolOutcome(tool, "skipped", None, "pending human annotation"))
            return CascadeResult(None, None, tuple(trace))
        try:
            mask = backends.run(tool, task)
        except Exception as e:  # backend errors are outcomes, not cascade failures
            trace.append(ToolOutcome(tool, "failed", None, f"{type(e).__name__}: {e}"))
            continue
        problem = _check_mask(mask, task, min_area)
        if problem is not None:
            trace.append(ToolOutcome(tool, "failed", None, problem))
            continue
        trace.append(ToolOutcome(tool, "success", mask, ""))
        return CascadeResult(mask, ProvenanceTag(PROVENANCE[tool], tool.value), tuple(trace))
    return CascadeResult(None, None, tuple(trace))


# --- manifest-level orchestration -------------------------------------------


def task_from_record(r: AffordanceRecord, size: tuple[int, int] | None = None) -> AnnotationTask:
    """Build a task from a record and its optional annotation-input keys.

    Recognized extra keys: ``source`` (dataset name), ``imageSize``
    ([h, w]), ``originalMask`` (RLE object), ``gtBox`` ([x0, y0, x1, y1])
    and ``language`` (source-dataset instruction).
    """
    orig = r.extra("originalMask")
    box = r.extra("gtBox")
    orig_mask = RleMask.from_json(orig) if orig is not None else None
    if size is None:
        declared = r.extra("imageSize")
        if declared is not None:
            size = (int(declared[0]), int(declared[1]))
        elif orig_mask is not None:
            size = orig_mask.size
        elif r.mask is not None:
            size = r.mask.size
    if size is None:
        raise ValueError(f"record {r.id!r}: image size unknown (set imageSize)")
    return AnnotationTask(
        record_id=r.id,
        image_path=r.image_path,
        category=r.category.name,
        size=tuple(size),
        original_mask=orig_mask,
        gt_box=BBox(*box) if box is not None else None,
        language=r.extra("language"),
    )


@dataclass
class AnnotationRun:
    manifest: DatasetManifest
    results: dict[str, CascadeResult] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)


def annotate_manifest(
    m: DatasetManifest,
    config: AnnotationConfig,
    backends: BackendSet,
    queue: HumanQueue,
    force: bool = False,
    jobs: int | None = None,
    min_area: int = DEFAULT_MIN_AREA,
    sizes: Mapping[str, tuple[int, int]] | None = None,
) -> AnnotationRun:
    """Run the cascade over records that still need a mask.

    Records that already carry provenance, or are waiting on a human, are
    left alone unless ``force`` is set. Human tasks are appended to the
    queue in record order whatever ``jobs`` is.
    """
    todo = []
    run = AnnotationRun(m)
    for i, r in enumerate(m.records):
        done = r.provenance is not None or r.extra("annotationStatus") == "pending_human"
        if done and not force:
            run.skipped.append(r.id)
            continue
        size = (sizes or {}).get(r.image_path) or m.header.size_of(r.image_path)
        todo.append((i, r, task_from_record(r, size)))

    def work(item):
        i, r, task = item
        comp = config.composition(r.extra("source"))
        plan = plan_tools(task, comp, config.part_vocabulary)
        collector = _Collector()
        return i, collector, run_cascade(task, plan, backends, collector, min_area)

    jobs = jobs or os.cpu_count() or 1
    if jobs == 1:
        done_items = [work(t) for t in todo]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done_items = list(pool.map(work, todo))

    records = list(m.records)
    for i, collector, res in done_items:
        r = records[i]
        queue.append(collector.items)
        if res.final is not None:
            records[i] = replace(r, mask=res.final, provenance=res.provenance).with_extras(annotationStatus=None)
        elif res.pending_human:
            records[i] = replace(r, mask=None, provenance=None).with_extras(annotationStatus="pending_human")
        run.results[r.id] = res
    run.manifest = m.with_records(records)
    return run


def apply_human_results(m: DatasetManifest, results_path: str | Path, with_segmenter: bool = False) -> DatasetManifest:
    """Merge ``{"recordId", "mask"}`` lines from the human results file."""
    masks = {}
    with open(results_path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                masks[obj["recordId"]] = RleMask.from_json(obj["mask"])
    tool = ProvenanceTool.HUMAN_SEGMENTER if with_segmenter else ProvenanceTool.HUMAN
    out = []
    for r in m.records:
        if r.id in masks:
            r = replace(r, mask=masks[r.id], provenance=ProvenanceTag(tool, ToolId.T5_HUMAN.value))
            r = r.with_extras(annotationStatus=None)
        out.append(r)
    return m.with_records(out)
