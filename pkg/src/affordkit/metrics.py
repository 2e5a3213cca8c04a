"""Affordance segmentation scores.

gIoU is the mean of per-sample IoUs; cIoU is total intersection over total
union. Both use the convention that two empty masks have IoU 1. A sample
whose prediction failed scores IoU 0 and stays in the denominators.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import CategoryLabel, DatasetManifest, SplitTag
from .maskops import IoU, RleMask, rle_iou
from .predict import MaskPredictor, compose_query, select_mask


class EmptyEvaluation(ValueError):
    pass


@dataclass(frozen=True)
class EvalSample:
    record_id: str
    gt: RleMask
    pred: RleMask | None
    category: CategoryLabel
    splits: SplitTag = SplitTag("val")
    failure: str | None = None

    def __post_init__(self):
        if self.pred is not None and tuple(self.pred.size) != tuple(self.gt.size):
            raise ValueError(f"{self.record_id}: prediction size {self.pred.size} != gt size {self.gt.size}")

    def score(self) -> IoU:
        if self.failure is not None or self.pred is None:
            return IoU(0, self.gt.area(), 0.0)
        return rle_iou(self.gt, self.pred)


def _require(samples) -> list:
    samples = list(samples)
    if not samples:
        raise EmptyEvaluation("no samples to evaluate")
    return samples


def _giou(scores: Sequence[IoU]) -> float:
    return sum(s.iou for s in scores) / len(scores)


def _ciou(scores: Sequence[IoU]) -> float:
    inter = sum(s.intersection for s in scores)
    union = sum(s.union for s in scores)
    return 1.0 if union == 0 else inter / union


def compute_giou(samples: Iterable[EvalSample]) -> float:
    return _giou([s.score() for s in _require(samples)])


def compute_ciou(samples: Iterable[EvalSample]) -> float:
    return _ciou([s.score() for s in _require(samples)])


@dataclass(frozen=True)
class Scores:
    giou: float
    ciou: float
    samples: int

    def to_json(self) -> dict:
        return {"giou": self.giou, "ciou": self.ciou, "samples": self.samples}


@dataclass(frozen=True)
class EvalReport:
    overall: Scores
    per_category: dict[str, Scores]
    per_split: dict[str, Scores]
    sample_count: int
    failures: tuple[str, ...] = ()
    per_sample: tuple[tuple[str, IoU], ...] = field(default=(), compare=False, repr=False)

    def to_json(self) -> dict:
        return {
            "overall": {"giou": self.overall.giou, "ciou": self.overall.ciou},
            "perCategory": {k: v.to_json() for k, v in sorted(self.per_category.items())},
            "perSplit": {k: v.to_json() for k, v in sorted(self.per_split.items())},
            "samples": self.sample_count,
            "failures": list(self.failures),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Plain-text table: one row per split plus overall, gIoU/cIoU in percent."""
        rows = [(k, v) for k, v in sorted(self.per_split.items())] + [("overall", self.overall)]
        rows += [(f"  {k}", v) for k, v in sorted(self.per_category.items())]
        name_w = max(len("subset"), *(len(k) for k, _ in rows))
        lines = [f"{'subset':<{name_w}}  {'gIoU':>6}  {'cIoU':>6}  {'n':>6}", "-" * (name_w + 24)]
        for i, (k, v) in enumerate(rows):
            if i == len(self.per_split) + 1 and self.per_category:
                lines.append(f"{'per category':<{name_w}}")
            lines.append(f"{k:<{name_w}}  {100 * v.giou:6.1f}  {100 * v.ciou:6.1f}  {v.samples:6d}")
        if self.failures:
            lines.append(f"failures: {len(self.failures)}")
        return "\n".join(lines) + "\n"


def aggregate(samples: Iterable[EvalSample]) -> EvalReport:
    samples = _require(samples)
    scored = [(s, s.score()) for s in samples]
    by_cat: dict[str, list[IoU]] = defaultdict(list)
    by_split: dict[str, list[IoU]] = defaultdict(list)
    for s, sc in scored:
        by_cat[s.category.name].append(sc)
        by_split[s.splits.descriptor()].append(sc)
    all_scores = [sc for _, sc in scored]

    def pack(group: list[IoU]) -> Scores:
        return Scores(_giou(group), _ciou(group), len(group))

    return EvalReport(
        overall=pack(all_scores),
        per_category={k: pack(v) for k, v in by_cat.items()},
        per_split={k: pack(v) for k, v in by_split.items()},
        sample_count=len(samples),
        failures=tuple(s.record_id for s in samples if s.failure is not None),
        per_sample=tuple((s.record_id, sc) for s, sc in scored),
    )


def _predict_one(record, predictor: MaskPredictor, image_root) -> EvalSample:
    query = compose_query(record, image_root)
    failure = None
    pred = None
    try:
        pred = select_mask(predictor.predict(query))
        if tuple(pred.size) != tuple(record.mask.size):
            failure = f"predicted mask size {list(pred.size)} != ground truth {list(record.mask.size)}"
            pred = None
        elif pred.problems():
            failure = "predicted mask is not a valid RLE: " + "; ".join(pred.problems())
            pred = None
    except Exception as e:  # any predictor error is scored, not raised
        failure = f"{type(e).__name__}: {e}"
        pred = None
    return EvalSample(record.id, record.mask, pred, record.category, record.splits, failure)


def evaluate_benchmark(
    m: DatasetManifest,
    predictor: MaskPredictor,
    jobs: int | None = None,
    image_root: str | Path | None = None,
) -> EvalReport:
    """Run ``predictor`` on every validation record and score it.

    Records are predicted concurrently with up to ``jobs`` threads (default:
    CPU count) unless the predictor declares ``concurrent = False``. The
    report depends only on record order, never on completion order.
    """
    for r in m.records:
        if r.splits.split != "val":
            raise ValueError(f"record {r.id!r} is not in the val split")
        if r.mask is None:
            raise ValueError(f"record {r.id!r} has no ground-truth mask")
    if not m.records:
        raise EmptyEvaluation("manifest has no records")
    if image_root is None:
        image_root = m.header.image_root
    jobs = jobs or os.cpu_count() or 1
    if not getattr(predictor, "concurrent", False):
        jobs = 1
    if jobs == 1:
        samples = [_predict_one(r, predictor, image_root) for r in m.records]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(lambda r: _predict_one(r, predictor, image_root), m.records))
    return aggregate(samples)
