"""Dataset records, JSON Lines manifests, validation and subset sampling."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

from .maskops import BadRle, RleMask
from .projection import CameraExtrinsics, CameraIntrinsics, ProjectionError

FORMAT_VERSION = 1


class ManifestError(ValueError):
    pass


class ParseError(ManifestError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateId(ManifestError):
    def __init__(self, record_id: str):
        super().__init__(f"duplicate record id {record_id!r}")
        self.record_id = record_id


class UnsupportedVersion(ManifestError):
    def __init__(self, version: Any):
        super().__init__(f"unsupported manifest formatVersion {version!r}")
        self.version = version


class SampleTooLarge(ManifestError):
    def __init__(self, n: int, available: int):
        super().__init__(f"cannot sample {n} records from {available}")
        self.n = n
        self.available = available


class Domain(str, enum.Enum):
    WILD = "wild"
    ROBOT = "robot"
    EGO = "ego"
    SIMULATION = "simulation"


class ReasoningKind(str, enum.Enum):
    NONE = "none"
    TEMPLATE = "template"
    EASY = "easy"
    HARD = "hard"


class InstructionKind(str, enum.Enum):
    TEMPLATE = "template"
    EASY = "easy"
    HARD = "hard"


class ProvenanceTool(str, enum.Enum):
    ORIGINAL_MASK = "original_mask"
    SEGMENTER = "segmenter"
    GROUNDING_SEGMENTER = "grounding_segmenter"
    PART_GROUNDING_SEGMENTER = "part_grounding_segmenter"
    HUMAN = "human"
    HUMAN_SEGMENTER = "human_segmenter"


@dataclass(frozen=True)
class CategoryLabel:
    name: str
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "aliases", tuple(self.aliases))

    def problems(self) -> list[str]:
        out = []
        if not self.name.strip():
            out.append("category name is empty")
        for s in (self.name, *self.aliases):
            if s != s.strip():
                out.append(f"{s!r} has leading/trailing whitespace")
            if s != s.lower():
                out.append(f"{s!r} is not lowercase")
        if self.name in self.aliases:
            out.append(f"aliases repeat the category name {self.name!r}")
        return out


@dataclass(frozen=True)
class SplitTag:
    split: str = "train"  # "train" | "val"
    zero_shot_category: bool = False
    zero_shot_domain: bool = False
    reasoning_kind: ReasoningKind = ReasoningKind.NONE

    def problems(self) -> list[str]:
        if self.split != "val" and (self.zero_shot_category or self.zero_shot_domain):
            return ["zero-shot flags require split 'val'"]
        return []

    def descriptor(self) -> str:
        cat = "novel-category" if self.zero_shot_category else "seen-category"
        dom = "novel-domain" if self.zero_shot_domain else "seen-domain"
        return f"{cat}/{dom}/{self.reasoning_kind.value}"


@dataclass(frozen=True)
class InstructionSpec:
    kind: InstructionKind
    text: str


@dataclass(frozen=True)
class ProvenanceTag:
    tool: ProvenanceTool
    detail: str = ""


@dataclass(frozen=True)
class AffordanceRecord:
    id: str
    image_path: str
    category: CategoryLabel
    domain: Domain
    splits: SplitTag
    instruction: InstructionSpec
    mask: RleMask | None
    provenance: ProvenanceTag | None
    depth_path: str | None = None
    camera: tuple[CameraIntrinsics, CameraExtrinsics] | None = None
    # Unrecognized record keys (e.g. annotation inputs), kept for round-trips.
    extras: tuple[tuple[str, Any], ...] = ()

    def extra(self, key: str, default=None):
        return dict(self.extras).get(key, default)

    def with_extras(self, **updates) -> "AffordanceRecord":
        d = dict(self.extras)
        for k, v in updates.items():
            if v is None:
                d.pop(k, None)
            else:
                d[k] = v
        return replace(self, extras=tuple(d.items()))


@dataclass(frozen=True)
class ManifestHeader:
    image_root: str
    format_version: int = FORMAT_VERSION
    # Optional declared image sizes, relative image path -> (height, width).
    image_sizes: tuple[tuple[str, tuple[int, int]], ...] = ()

    def size_of(self, image: str) -> tuple[int, int] | None:
        return dict(self.image_sizes).get(image)


@dataclass(frozen=True)
class DatasetManifest:
    header: ManifestHeader
    records: tuple[AffordanceRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def with_records(self, records: Iterable[AffordanceRecord]) -> "DatasetManifest":
        return DatasetManifest(self.header, tuple(records))


# --- serialization -----------------------------------------------------------

_RECORD_KEYS = (
    "id", "image", "depth", "camera", "category", "aliases", "domain", "split",
    "zeroShotCategory", "zeroShotDomain", "reasoningKind", "instructionKind",
    "instruction", "mask", "provenance",
)  # fmt: skip


def header_to_json(h: ManifestHeader) -> dict:
    out: dict[str, Any] = {"formatVersion": h.format_version, "imageRoot": h.image_root}
    if h.image_sizes:
        out["imageSizes"] = {k: list(v) for k, v in h.image_sizes}
    return out


def record_to_json(r: AffordanceRecord) -> dict:
    out: dict[str, Any] = {"id": r.id, "image": r.image_path}
    if r.depth_path is not None:
        out["depth"] = r.depth_path
    if r.camera is not None:
        K, T = r.camera
        out["camera"] = {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "extrinsics": list(T.values)}
    out.update(
        category=r.category.name,
        aliases=list(r.category.aliases),
        domain=r.domain.value,
        split=r.splits.split,
        zeroShotCategory=r.splits.zero_shot_category,
        zeroShotDomain=r.splits.zero_shot_domain,
        reasoningKind=r.splits.reasoning_kind.value,
        instructionKind=r.instruction.kind.value,
        instruction=r.instruction.text,
        mask=None if r.mask is None else r.mask.to_json(),
        provenance=None if r.provenance is None else {"tool": r.provenance.tool.value, "detail": r.provenance.detail},
    )
    for k, v in r.extras:
        out[k] = v
    return out


def _dump(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def dumps_manifest(m: DatasetManifest) -> str:
    lines = [_dump(header_to_json(m.header))]
    lines.extend(_dump(record_to_json(r)) for r in m.records)
    return "\n".join(lines) + "\n"


def save_manifest(m: DatasetManifest, path: str | Path) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, dumps_manifest(m))


def _enum(cls, value, what):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in cls)
        raise ValueError(f"{what} must be one of {{{allowed}}}, got {value!r}") from None


def _typed(obj: dict, key: str, types, optional=False):
    if key not in obj or obj[key] is None:
        if optional:
            return None
        raise ValueError(f"missing key {key!r}")
    v = obj[key]
    ok = isinstance(v, bool) if types is bool else isinstance(v, types) and not isinstance(v, bool)
    if not ok:
        raise ValueError(f"key {key!r} has wrong type {type(v).__name__}")
    return v


def record_from_json(obj: dict) -> AffordanceRecord:
    if not isinstance(obj, dict):
        raise ValueError("record line must be a JSON object")
    camera = None
    cam = _typed(obj, "camera", dict, optional=True)
    if cam is not None:
        try:
            K = CameraIntrinsics(*(float(_typed(cam, k, (int, float))) for k in ("fx", "fy", "cx", "cy")))
            T = CameraExtrinsics(tuple(_typed(cam, "extrinsics", list)))
        except (ProjectionError, TypeError) as e:
            raise ValueError(f"bad camera: {e}") from None
        camera = (K, T)
    mask_obj = _typed(obj, "mask", dict, optional=True)
    try:
        mask = None if mask_obj is None else RleMask.from_json(mask_obj)
    except BadRle as e:
        raise ValueError(f"bad mask: {e.reason}") from None
    prov = _typed(obj, "provenance", dict, optional=True)
    provenance = None
    if prov is not None:
        provenance = ProvenanceTag(_enum(ProvenanceTool, prov.get("tool"), "provenance tool"), str(prov.get("detail", "")))
    aliases = _typed(obj, "aliases", list)
    if not all(isinstance(a, str) for a in aliases):
        raise ValueError("aliases must be strings")
    split = _typed(obj, "split", str)
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    return AffordanceRecord(
        id=_typed(obj, "id", str),
        image_path=_typed(obj, "image", str),
        depth_path=_typed(obj, "depth", str, optional=True),
        camera=camera,
        category=CategoryLabel(_typed(obj, "category", str), tuple(aliases)),
        domain=_enum(Domain, obj.get("domain"), "domain"),
        splits=SplitTag(
            split,
            _typed(obj, "zeroShotCategory", bool),
            _typed(obj, "zeroShotDomain", bool),
            _enum(ReasoningKind, obj.get("reasoningKind"), "reasoningKind"),
        ),
        instruction=InstructionSpec(
            _enum(InstructionKind, obj.get("instructionKind"), "instructionKind"),
            _typed(obj, "instruction", str),
        ),
        mask=mask,
        provenance=provenance,
        extras=tuple((k, v) for k, v in obj.items() if k not in _RECORD_KEYS),
    )


def _header_from_json(obj) -> ManifestHeader:
    if not isinstance(obj, dict):
        raise ValueError("header must be a JSON object")
    if "formatVersion" not in obj:
        raise ValueError("header lacks formatVersion")
    if obj["formatVersion"] != FORMAT_VERSION or isinstance(obj["formatVersion"], bool):
        raise UnsupportedVersion(obj["formatVersion"])
    root = obj.get("imageRoot")
    if not isinstance(root, str):
        raise ValueError("header imageRoot must be a string")
    sizes = obj.get("imageSizes") or {}
    if not isinstance(sizes, dict):
        raise ValueError("imageSizes must be an object")
    return ManifestHeader(root, FORMAT_VERSION, tuple((k, (int(v[0]), int(v[1]))) for k, v in sizes.items()))


def loads_manifest(text: str) -> DatasetManifest:
    header = None
    records: list[AffordanceRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(lineno, f"invalid JSON: {e.msg}") from None
        try:
            if header is None:
                header = _header_from_json(obj)
                continue
            rec = record_from_json(obj)
        except UnsupportedVersion:
            raise
        except (ValueError, TypeError, IndexError) as e:
            raise ParseError(lineno, str(e)) from None
        if rec.id in seen:
            raise DuplicateId(rec.id)
        seen.add(rec.id)
        records.append(rec)
    if header is None:
        raise ParseError(1, "missing header line")
    return DatasetManifest(header, tuple(records))


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(0, f"file is not UTF-8: {e}") from None
    return loads_manifest(text)


# --- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    record_id: str | None
    invariant: str
    message: str

    def to_json(self) -> dict:
        return {"recordId": self.record_id, "invariant": self.invariant, "message": self.message}


def _image_size(root: Path, rel: str) -> tuple[int, int] | None:
    from PIL import Image

    try:
        with Image.open(root / rel) as im:
            return im.height, im.width
    except OSError:
        return None


def validate_manifest(m: DatasetManifest, strict: bool = False, base_dir: str | Path | None = None) -> list[Violation]:
    """List every invariant violation in ``m``; an empty list means valid.

    Strict mode also requires that image and depth files exist under the
    image root (resolved against ``base_dir`` when relative) and, for images
    without a declared size, reads the size from the file header.
    """
    from .instructions import check_hard_constraint

    out: list[Violation] = []
    if m.header.format_version != FORMAT_VERSION:
        out.append(Violation(None, "header.formatVersion", f"formatVersion must be {FORMAT_VERSION}"))
    root = Path(m.header.image_root)
    if base_dir is not None and not root.is_absolute():
        root = Path(base_dir) / root

    seen: set[str] = set()
    for r in m.records:
        rid = r.id
        if rid in seen:
            out.append(Violation(rid, "record.uniqueId", f"duplicate id {rid!r}"))
        seen.add(rid)
        for p in r.category.problems():
            out.append(Violation(rid, "category", p))
        for p in r.splits.problems():
            out.append(Violation(rid, "split.zeroShot", p))
        if not r.instruction.text.strip():
            out.append(Violation(rid, "instruction.nonEmpty", "instruction text is empty"))
        elif r.instruction.kind is InstructionKind.HARD:
            res = check_hard_constraint(r.instruction.text, r.category)
            if not res.passed:
                out.append(
                    Violation(rid, "instruction.hardConstraint", f"check_hard_constraint failed: hard instruction names {res.offending!r}")
                )
        if r.camera is not None:
            for p in r.camera[0].problems():
                out.append(Violation(rid, "camera.intrinsics", p))
            for p in r.camera[1].problems():
                out.append(Violation(rid, "camera.extrinsics", p))

        declared = m.header.size_of(r.image_path)
        if strict:
            if not (root / r.image_path).is_file():
                out.append(Violation(rid, "file.exists", f"image {r.image_path!r} not found under {root}"))
            elif declared is None:
                declared = _image_size(root, r.image_path)
            if r.depth_path is not None and not (root / r.depth_path).is_file():
                out.append(Violation(rid, "file.exists", f"depth {r.depth_path!r} not found under {root}"))

        if r.mask is None:
            out.append(Violation(rid, "mask.present", "record has no mask"))
            continue
        for p in r.mask.problems():
            out.append(Violation(rid, "mask.rle", p))
        if declared is not None and tuple(r.mask.size) != tuple(declared):
            h, w = r.mask.size
            out.append(
                Violation(rid, "mask.size", f"mask is {h}x{w} but image {r.image_path!r} is {declared[0]}x{declared[1]}")
            )
    return out


# --- sampling ----------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood 2014), seeded directly."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next()
            if x < limit:
                return x % bound


def sample_indices(total: int, n: int, seed: int) -> list[int]:
    """Pick ``n`` of ``range(total)`` by partial Fisher-Yates; result sorted."""
    if n > total:
        raise SampleTooLarge(n, total)
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = SplitMix64(seed)
    idx = list(range(total))
    for i in range(n):
        j = i + rng.below(total - i)
        idx[i], idx[j] = idx[j], idx[i]
    return sorted(idx[:n])


def sample_subset(m: DatasetManifest, n: int, seed: int) -> DatasetManifest:
    """Uniformly sample ``n`` records without replacement, keeping their order."""
    chosen = sample_indices(len(m.records), n, seed)
    return m.with_records(m.records[i] for i in chosen)
