"""Predictor boundary: query composition, mask-token selection, baselines.

A predictor answers with text plus mask slots keyed by ``<AFF>`` or
``<SEG>`` tokens. The mask to score is the first ``<AFF>`` slot, or the
first ``<SEG>`` slot when the response has no ``<AFF>``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

from .core import AffordanceRecord, DatasetManifest
from .maskops import BBox, BadRle, RleMask, rasterize_box, rle_encode

SYSTEM_PROMPT = "You are an embodied robot."
TOKENS = ("AFF", "SEG")
_TOKEN_RE = re.compile(r"<(AFF|SEG)>")


class PredictError(RuntimeError):
    pass


class NoMaskToken(PredictError):
    pass


class PredictorFailure(PredictError):
    def __init__(self, record_id: str, reason: str):
        super().__init__(f"{record_id}: {reason}")
        self.record_id = record_id
        self.reason = reason


@dataclass(frozen=True)
class PredictorQuery:
    image_path: str
    system_prompt: str
    instruction: str
    # Harness-side hints; never sent to remote predictors.
    record_id: str | None = None
    image_size: tuple[int, int] | None = None  # (height, width)

    def __post_init__(self):
        if not self.system_prompt:
            raise ValueError("system prompt must be non-empty")


@dataclass(frozen=True)
class MaskSlot:
    token: str
    position: int
    mask: RleMask

    def __post_init__(self):
        if self.token not in TOKENS:
            raise ValueError(f"slot token must be AFF or SEG, got {self.token!r}")


@dataclass(frozen=True)
class PredictorResponse:
    text: str
    slots: tuple[MaskSlot, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        pos = [s.position for s in self.slots]
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("slot positions must be strictly increasing")
        in_text = _TOKEN_RE.findall(self.text)
        if in_text != [s.token for s in self.slots]:
            raise ValueError(f"slot tokens {[s.token for s in self.slots]} do not match text tokens {in_text}")

    @classmethod
    def from_json(cls, obj: dict) -> "PredictorResponse":
        try:
            slots = tuple(MaskSlot(s["token"], int(s["position"]), RleMask.from_json(s["mask"])) for s in obj.get("slots", []))
            return cls(str(obj["text"]), slots)
        except (KeyError, TypeError, BadRle) as e:
            raise ValueError(f"malformed predictor response: {e}") from None

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "slots": [{"token": s.token, "position": s.position, "mask": s.mask.to_json()} for s in self.slots],
        }


def compose_query(record: AffordanceRecord, image_root: str | Path | None = None) -> PredictorQuery:
    path = record.image_path if image_root is None else str(Path(image_root) / record.image_path)
    size = tuple(record.mask.size) if record.mask is not None else None
    return PredictorQuery(path, SYSTEM_PROMPT, record.instruction.text, record.id, size)


def select_mask(r: PredictorResponse) -> RleMask:
    for token in TOKENS:
        for s in r.slots:
            if s.token == token:
                return s.mask
    raise NoMaskToken("response carries no <AFF> or <SEG> mask")


# --- predictors --------------------------------------------------------------


class MaskPredictor(Protocol):
    #: whether ``predict`` may be called from several threads at once
    concurrent: bool

    def predict(self, query: PredictorQuery) -> PredictorResponse: ...


def _single_slot(token: str, mask: RleMask) -> PredictorResponse:
    return PredictorResponse(f"Sure, <{token}>.", (MaskSlot(token, 0, mask),))


class OraclePredictor:
    """Returns the ground-truth mask of the queried record in an AFF slot."""

    concurrent = True

    def __init__(self, manifest: DatasetManifest | Mapping[str, RleMask]):
        if isinstance(manifest, DatasetManifest):
            self._gt = {r.id: r.mask for r in manifest.records}
        else:
            self._gt = dict(manifest)

    def predict(self, query: PredictorQuery) -> PredictorResponse:
        mask = self._gt.get(query.record_id)
        if mask is None:
            raise PredictError(f"no ground truth for record {query.record_id!r}")
        return _single_slot("AFF", mask)


class EmptyPredictor:
    """Answers without any mask token."""

    concurrent = True

    def predict(self, query: PredictorQuery) -> PredictorResponse:
        return PredictorResponse("I cannot find it.")


def center_box(height: int, width: int, fraction: float = 0.25) -> BBox:
    """Centered box whose area is about ``fraction`` of the image, same aspect ratio."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    s = math.sqrt(fraction)
    bw = min(width, max(1, round(width * s)))
    bh = min(height, max(1, round(height * s)))
    x0 = (width - bw) // 2
    y0 = (height - bh) // 2
    return BBox(x0, y0, x0 + bw, y0 + bh)


class CenterBoxPredictor:
    """Predicts a centered box in a SEG slot; a fixed, input-blind baseline."""

    concurrent = True

    def __init__(self, fraction: float = 0.25):
        self.fraction = fraction

    def predict(self, query: PredictorQuery) -> PredictorResponse:
        if query.image_size is not None:
            h, w = query.image_size
        else:
            from PIL import Image

            with Image.open(query.image_path) as im:
                h, w = im.height, im.width
        mask = rle_encode(rasterize_box(center_box(h, w, self.fraction), w, h))
        return _single_slot("SEG", mask)


class RemotePredictor:
    """Client for ``POST /predict`` on a remote VLM server."""

    def __init__(self, endpoint: str, concurrent: bool = True, timeout: float = 120.0):
        self.endpoint = endpoint
        self.concurrent = concurrent
        self.timeout = timeout

    def predict(self, query: PredictorQuery) -> PredictorResponse:
        from ._http import b64_file, join_url, post_json

        payload = {"image": b64_file(query.image_path), "system": query.system_prompt, "instruction": query.instruction}
        reply = post_json(join_url(self.endpoint, "predict"), payload, timeout=self.timeout)
        return PredictorResponse.from_json(reply)


def make_predictor(name: str, manifest: DatasetManifest | None = None, endpoint: str | None = None) -> MaskPredictor:
    if name == "oracle":
        if manifest is None:
            raise ValueError("oracle predictor needs the manifest")
        return OraclePredictor(manifest)
    if name == "empty":
        return EmptyPredictor()
    if name == "centerbox":
        return CenterBoxPredictor()
    if name == "remote":
        if not endpoint:
            raise ValueError("remote predictor needs an endpoint")
        return RemotePredictor(endpoint)
    raise ValueError(f"unknown predictor {name!r}")
