"""``affordkit`` command line: validate, sample, annotate, instructions, eval, posegen, stats."""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from ._io import atomic_write_text, dumps_jsonl
from .core import (
    CategoryLabel,
    DatasetManifest,
    InstructionKind,
    dumps_manifest,
    load_manifest,
    sample_subset,
    validate_manifest,
)


class CliError(Exception):
    def __init__(self, message: str, code: int = 1, kind: str = "CliError"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _emit_error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message, usage=self.format_usage().strip())
        raise SystemExit(2)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="affordkit", description="Affordance dataset, benchmark and grasp-pose toolkit.")
    p.add_argument("--version", action="version", version=f"affordkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--manifest", required=True, type=Path, help="input manifest (JSON Lines)")
    common.add_argument("--seed", type=_u64, default=0, help="random seed (default 0)")

    def out_arg(sp, required=True, help="output path"):
        sp.add_argument("--out", type=Path, required=required, help=help)

    def jobs_arg(sp):
        sp.add_argument("--jobs", type=_positive_int, default=None, help="worker threads (default: CPU count)")

    sp = sub.add_parser("validate", parents=[common], help="check manifest invariants")
    sp.add_argument("--strict", action="store_true", help="also require image/depth files under imageRoot")
    out_arg(sp, required=False, help="write violations here as JSON Lines")

    sp = sub.add_parser("sample", parents=[common], help="draw a reproducible random subset")
    sp.add_argument("--n", type=int, required=True, help="number of records to keep")
    out_arg(sp)

    sp = sub.add_parser("annotate", parents=[common], help="run the annotation tool cascade")
    out_arg(sp, required=False)
    jobs_arg(sp)
    sp.add_argument("--ground-endpoint", help="grounding service base URL")
    sp.add_argument("--segment-endpoint", help="segmentation service base URL (default: rasterize boxes)")
    sp.add_argument("--config", type=Path, help="tool composition config (default: bundled)")
    sp.add_argument("--human-queue", type=Path, help="human task spool (default: <out>.human.jsonl)")
    sp.add_argument("--min-area", type=int, default=25, help="smallest accepted mask area in pixels")
    sp.add_argument("--in-place", action="store_true", help="rewrite the input manifest")
    sp.add_argument("--force", action="store_true", help="re-annotate records that already have provenance")

    sp = sub.add_parser("instructions", parents=[common], help="generate template or reasoning instructions")
    out_arg(sp, required=False)
    sp.add_argument("--mode", choices=("template", "easy", "hard"), required=True)
    sp.add_argument("--llm-endpoint", help="chat-completion URL; key from AFFORD_LLM_KEY")
    sp.add_argument("--llm-model", default="gpt-4")
    sp.add_argument("--offline", action="store_true", help="use the deterministic offline LLM stub")
    sp.add_argument("--n", type=_positive_int, default=1, help="LLM samples per category")
    sp.add_argument("--max-in-flight", type=_positive_int, default=4)
    sp.add_argument("--in-place", action="store_true", help="template mode: rewrite the input manifest")

    sp = sub.add_parser("eval", parents=[common], help="score a predictor with gIoU/cIoU")
    out_arg(sp, help="report JSON; the text table goes next to it as .txt")
    jobs_arg(sp)
    sp.add_argument("--predictor", choices=("oracle", "empty", "centerbox", "remote"), default="remote")
    sp.add_argument("--predictor-endpoint", help="remote predictor base URL")

    sp = sub.add_parser("posegen", parents=[common], help="grasp poses from masks, depth and camera")
    out_arg(sp, help="pose output (JSON Lines)")
    jobs_arg(sp)
    sp.add_argument("--min-points", type=_positive_int, default=50)
    sp.add_argument("--finger-margin", type=float, default=0.005, help="meters")
    sp.add_argument("--max-width", type=float, default=0.085, help="meters")

    sp = sub.add_parser("stats", parents=[common], help="count records by category, domain, instruction kind")
    out_arg(sp, required=False)
    return p


# --- helpers -----------------------------------------------------------------


def _image_root(args, m: DatasetManifest) -> Path:
    root = Path(m.header.image_root)
    return root if root.is_absolute() else args.manifest.parent / root


def _check_paths(args) -> None:
    if not args.manifest.is_file():
        raise CliError(f"manifest not found: {args.manifest}", kind="FileNotFound")
    out = getattr(args, "out", None)
    if out is not None:
        if not out.parent.exists() and str(out.parent) not in ("", "."):
            raise CliError(f"output directory does not exist: {out.parent}", kind="FileNotFound")
        if out.resolve() == args.manifest.resolve() and not getattr(args, "in_place", False):
            raise CliError("refusing to overwrite the input manifest without --in-place", kind="WouldOverwrite")


def _manifest_out(args) -> Path:
    if getattr(args, "in_place", False):
        return args.manifest
    if args.out is None:
        raise CliError("--out is required (or --in-place)", kind="UsageError", code=2)
    return args.out


def _write(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


# --- subcommands -------------------------------------------------------------


def cmd_validate(args) -> int:
    m = load_manifest(args.manifest)
    violations = validate_manifest(m, strict=args.strict, base_dir=args.manifest.parent)
    text = dumps_jsonl(v.to_json() for v in violations)
    _write(args.out, text)
    if violations and args.out is not None:
        sys.stdout.write(text)
    return 1 if violations else 0


def cmd_sample(args) -> int:
    m = load_manifest(args.manifest)
    atomic_write_text(args.out, dumps_manifest(sample_subset(m, args.n, args.seed)))
    return 0


def cmd_annotate(args) -> int:
    from .annotate import BackendSet, HumanQueue, annotate_manifest, load_annotation_config

    out = _manifest_out(args)
    m = load_manifest(args.manifest)
    config = load_annotation_config(args.config)
    backends = BackendSet.from_endpoints(
        args.ground_endpoint,
        args.segment_endpoint,
        part_vocabulary=config.part_vocabulary,
        image_root=_image_root(args, m),
    )
    spool = args.human_queue or out.with_name(out.stem + ".human.jsonl")
    run = annotate_manifest(m, config, backends, HumanQueue(spool), force=args.force, jobs=args.jobs, min_area=args.min_area)
    atomic_write_text(out, dumps_manifest(run.manifest))
    pending = sum(1 for r in run.results.values() if r.pending_human)
    summary = {"annotated": sum(1 for r in run.results.values() if r.final is not None), "pendingHuman": pending,
               "skipped": len(run.skipped), "humanQueue": str(spool)}  # fmt: skip
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def _categories(m: DatasetManifest) -> list[CategoryLabel]:
    seen: dict[str, CategoryLabel] = {}
    for r in m.records:
        seen.setdefault(r.category.name, r.category)
    return list(seen.values())


def cmd_instructions(args) -> int:
    from .instructions import HttpChatClient, OfflineStubClient, build_template, generate_instructions

    m = load_manifest(args.manifest)
    if args.mode == "template":
        out = _manifest_out(args)
        recs = [replace(r, instruction=build_template(r.category)) if r.instruction.kind is InstructionKind.TEMPLATE else r
                for r in m.records]  # fmt: skip
        atomic_write_text(out, dumps_manifest(m.with_records(recs)))
        return 0

    if args.llm_endpoint:
        client = HttpChatClient(args.llm_endpoint)
    elif args.offline:
        client = OfflineStubClient()
    else:
        raise CliError("reasoning modes need --llm-endpoint or --offline", kind="UsageError", code=2)
    cats = _categories(m)
    res = generate_instructions(((c, None) for c in cats), args.mode, client, args.llm_model, args.n, args.max_in_flight)
    kind = InstructionKind(args.mode)
    lines = []
    for p in res.pairs:
        lines.append({
            "category": p.category.name,
            "aliases": list(p.category.aliases),
            "instructionKind": kind.value,
            "reasoningKind": kind.value,
            "instruction": p.first,
            "answer": p.second,
        })  # fmt: skip
    _write(args.out, dumps_jsonl(lines))
    stats = {
        "generated": res.counts(),
        "rejected": {f"{c}/{why}": n for (c, why), n in sorted(res.rejected.items())},
        "duplicates": dict(sorted(res.duplicates.items())),
    }
    sys.stderr.write(json.dumps(stats, sort_keys=True) + "\n")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_benchmark
    from .predict import make_predictor

    m = load_manifest(args.manifest)
    if args.predictor == "remote" and not args.predictor_endpoint:
        raise CliError("--predictor remote needs --predictor-endpoint", kind="UsageError", code=2)
    predictor = make_predictor(args.predictor, m, args.predictor_endpoint)
    report = evaluate_benchmark(m, predictor, jobs=args.jobs, image_root=_image_root(args, m))
    atomic_write_text(args.out, report.dumps())
    atomic_write_text(args.out.with_suffix(".txt"), report.table())
    sys.stdout.write(report.table())
    return 0


def cmd_posegen(args) -> int:
    from .graspgen import GripperSpec, propose_grasp
    from .maskops import rle_decode
    from .projection import backproject_masked, load_depth_png

    m = load_manifest(args.manifest)
    root = _image_root(args, m)
    gripper = GripperSpec(args.max_width, args.finger_margin, args.min_points)
    todo = [r for r in m.records if r.depth_path is not None and r.camera is not None and r.mask is not None]

    def work(r):
        try:
            depth = load_depth_png(root / r.depth_path)
            K, T = r.camera
            cloud = backproject_masked(rle_decode(r.mask), depth, K, T)
            pose = propose_grasp(cloud, K, T, gripper)
            return {"recordId": r.id, **pose.to_json()}
        except Exception as e:  # reported per record
            return {"recordId": r.id, "error": f"{type(e).__name__}: {e}"}

    jobs = args.jobs or os.cpu_count() or 1
    if jobs == 1:
        results = [work(r) for r in todo]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, todo))
    atomic_write_text(args.out, dumps_jsonl(results))
    failed = sum(1 for r in results if "error" in r)
    sys.stdout.write(json.dumps({"poses": len(results) - failed, "failed": failed,
                                 "skipped": len(m.records) - len(todo)}, sort_keys=True) + "\n")  # fmt: skip
    return 0


def cmd_stats(args) -> int:
    m = load_manifest(args.manifest)
    counts = {
        "records": len(m.records),
        "category": Counter(r.category.name for r in m.records),
        "domain": Counter(r.domain.value for r in m.records),
        "instructionKind": Counter(r.instruction.kind.value for r in m.records),
        "reasoningKind": Counter(r.splits.reasoning_kind.value for r in m.records),
        "split": Counter(r.splits.split for r in m.records),
        "provenance": Counter(r.provenance.tool.value if r.provenance else "none" for r in m.records),
    }
    text = json.dumps({k: dict(sorted(v.items())) if isinstance(v, Counter) else v for k, v in counts.items()},
                      indent=2, sort_keys=True) + "\n"  # fmt: skip
    _write(args.out, text)
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "sample": cmd_sample,
    "annotate": cmd_annotate,
    "instructions": cmd_instructions,
    "eval": cmd_eval,
    "posegen": cmd_posegen,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _check_paths(args)
        return COMMANDS[args.command](args)
    except CliError as e:
        _emit_error(e.kind, str(e))
        return e.code
    except (ValueError, OSError, RuntimeError) as e:
        _emit_error(type(e).__name__, str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
