"""Command-line runner: segment, evaluate, oracle, diff.

Exit codes are part of the contract:

* 0 — success
* 2 — configuration problems: bad flag values, malformed manifests, or a
  strategy whose required manifest fields (text masks, logits, proposal
  bank) are not declared
* 3 — declared inputs that cannot be found or aligned: missing files, no
  eligible reference, record sets that do not match
* 4 — pipeline failures while processing well-formed inputs

Errors print to standard error.  Verbosity comes from the FPSS_LOG
environment variable (error, warn, info, debug).

Evaluation runs one episode per (image, class) pair, samples the reference
with the per-episode seed derivation, and is reproducible: the same seed
always yields byte-identical record CSVs.  Worker processes only fan out
episodes; results are merged in a canonical sort order before writing.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import (
    AlignmentMismatch,
    DatasetMismatch,
    DuplicateId,
    EmptyClassName,
    FpssError,
    MissingReferenceTPMask,
    NoEligibleReference,
    NoRecords,
    SchemaViolation,
    UnknownDomain,
)
from .evaluation import (
    IoURecord,
    aggregate,
    class_diff_ranking,
    format_float,
    format_report_table,
    iou_counts,
    oracle_ensemble,
    oracle_ensemble_plus,
    read_records,
    sort_records,
    write_records,
    write_report_csv,
)
from .fusion import (
    EpisodeInputs,
    EpisodeResult,
    FusionStrategy,
    StrategyKind,
    run_episode,
)
from .ingest import (
    DatasetManifest,
    PromptEpisode,
    derive_seed,
    load_manifest,
    sample_episode,
    template_text_prompt,
)
from .matching import MatchingParams
from .proposal import ProposalBankBackend
from .tensor_core import (
    BinaryMask,
    FeatureMap,
    ScalarGrid,
    load_mask,
    read_tensor,
    write_mask_pgm,
    write_tensor,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_PIPELINE = 4

STRATEGY_NAMES = {
    "visual": StrategyKind.VISUAL_ONLY,
    "promptmatcher": StrategyKind.PROMPT_MATCHER,
    "prob-merge": StrategyKind.PROBABILITY_MERGING,
    "cluster-merge": StrategyKind.CLUSTER_MERGING,
    "select": StrategyKind.SELECTION,
}

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


@dataclass(frozen=True)
class RunConfig:
    manifests: list[Path]
    strategy: FusionStrategy
    seed: int
    workers: int
    out: Path | None

    def validate(self) -> None:
        self.strategy.params.validate()
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------

def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_features(path: Path, what: str) -> FeatureMap:
    tensor = read_tensor(_require_file(path, what))
    if not isinstance(tensor, FeatureMap):
        raise FpssError(f"{what} {path} is not a 3-D feature tensor")
    return tensor


def _load_logits(path: Path, what: str) -> ScalarGrid:
    tensor = read_tensor(_require_file(path, what))
    if not isinstance(tensor, ScalarGrid):
        raise FpssError(f"{what} {path} is not a 2-D float tensor")
    return tensor


def _strategy_needs(strategy: FusionStrategy) -> tuple[bool, bool, bool]:
    """(target tp mask, reference tp mask, tp logits) requirements."""
    kind = strategy.resolve().kind
    with_mask = strategy.with_lisa_mask
    if kind is StrategyKind.VISUAL_ONLY:
        return (False, False, False)
    if kind is StrategyKind.PROMPT_MATCHER:
        return (True, False, False)
    if kind in (StrategyKind.PROBABILITY_MERGING, StrategyKind.CLUSTER_MERGING):
        return (with_mask, False, True)
    return (True, True, False)  # selection


def _validate_strategy_inputs(manifests: list[DatasetManifest], strategy: FusionStrategy) -> None:
    """Everything the strategy reads must be declared in the manifests."""
    need_tp, need_ref_tp, need_logits = _strategy_needs(strategy)
    for manifest in manifests:
        class_ids = [cid for cid, _ in manifest.classes]
        for image in manifest.images:
            if image.proposal_bank is None:
                raise SchemaViolation(
                    f"{manifest.dataset_id}/{image.image_id}: no proposal_bank declared; "
                    "every strategy decodes through the bank"
                )
            for cid in class_ids:
                if cid not in image.gt_masks:
                    continue
                if (need_tp or need_ref_tp) and cid not in image.tp_masks:
                    raise SchemaViolation(
                        f"{manifest.dataset_id}/{image.image_id}: strategy needs "
                        f"tp_masks for class {cid}"
                    )
                if need_logits and cid not in image.tp_logits:
                    raise SchemaViolation(
                        f"{manifest.dataset_id}/{image.image_id}: strategy needs "
                        f"tp_logits for class {cid}"
                    )


def _image_shape(manifest: DatasetManifest, episode: PromptEpisode) -> tuple[int, int]:
    """Pixel geometry of the target: first mask artifact wins, else the grid."""
    target = episode.target
    gt_path = target.gt_masks.get(episode.class_id)
    if gt_path is not None and Path(gt_path).is_file():
        return load_mask(gt_path).shape
    tp_path = target.tp_masks.get(episode.class_id)
    if tp_path is not None and Path(tp_path).is_file():
        return load_mask(tp_path).shape
    if target.proposal_bank is not None and Path(target.proposal_bank).is_file():
        return ProposalBankBackend.from_file(target.proposal_bank).stack.mask_shape
    features = _load_features(target.feature_path, "target features")
    return features.grid_shape


@dataclass(frozen=True)
class LoadedEpisode:
    inputs: EpisodeInputs
    backend: ProposalBankBackend
    tp_mask: BinaryMask | None
    tp_mask_reference: BinaryMask | None
    tp_logits: ScalarGrid | None


def _load_episode(
    manifest: DatasetManifest, episode: PromptEpisode, strategy: FusionStrategy
) -> LoadedEpisode:
    need_tp, need_ref_tp, need_logits = _strategy_needs(strategy)
    target, reference, cid = episode.target, episode.reference, episode.class_id

    inputs = EpisodeInputs(
        reference_features=_load_features(reference.feature_path, "reference features"),
        target_features=_load_features(target.feature_path, "target features"),
        reference_mask=episode.reference_mask,
        image_shape=_image_shape(manifest, episode),
        seed=episode.rng_seed,
    )
    backend = ProposalBankBackend.from_file(
        _require_file(Path(target.proposal_bank), "proposal bank")
    )

    tp_mask = tp_ref = logits = None
    if need_tp:
        tp_mask = load_mask(_require_file(Path(target.tp_masks[cid]), "target text mask"))
    if need_ref_tp:
        tp_ref = load_mask(_require_file(Path(reference.tp_masks[cid]), "reference text mask"))
    if need_logits:
        logits = _load_logits(Path(target.tp_logits[cid]), "text logits")
    return LoadedEpisode(inputs, backend, tp_mask, tp_ref, logits)


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------

def cmd_segment(args: argparse.Namespace) -> int:
    strategy = _strategy_from_args(args)
    strategy.params.validate()
    manifest = load_manifest(_require_file(Path(args.manifest), "manifest"))
    _validate_strategy_inputs([manifest], strategy)
    target = _image_entry(manifest, args.image)
    if args.reference is not None:
        episode = _explicit_episode(manifest, target, args.class_id, args.reference, args.seed)
    else:
        episode = sample_episode(manifest, target, args.class_id, args.seed)
    loaded = _load_episode(manifest, episode, strategy)
    result = run_episode(
        strategy, loaded.inputs, loaded.backend,
        tp_mask=loaded.tp_mask,
        tp_mask_reference=loaded.tp_mask_reference,
        tp_logits=loaded.tp_logits,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{args.image}_{args.class_id}"
    write_mask_pgm(result.final_mask, out_dir / f"{stem}.mask.pgm")
    write_tensor(result.final_mask, out_dir / f"{stem}.mask.fpss")
    (out_dir / f"{stem}.diagnostics.json").write_text(
        _diagnostics_json(episode, result, strategy)
    )
    print(out_dir / f"{stem}.mask.pgm")
    return EXIT_OK


def _image_entry(manifest: DatasetManifest, image_id: str):
    try:
        return manifest.image(image_id)
    except KeyError as exc:
        raise ValueError(str(exc)) from exc


def _explicit_episode(
    manifest: DatasetManifest, target, class_id: str, reference_id: str, seed: int
) -> PromptEpisode:
    reference = _image_entry(manifest, reference_id)
    mask_path = reference.gt_masks.get(class_id)
    if mask_path is None:
        raise NoEligibleReference(
            f"{reference_id} has no ground truth for class {class_id}"
        )
    mask = load_mask(_require_file(Path(mask_path), "reference mask"))
    if mask.area == 0:
        raise NoEligibleReference(f"{reference_id} has empty ground truth for class {class_id}")
    return PromptEpisode(
        target=target,
        class_id=class_id,
        reference=reference,
        reference_mask=mask,
        text_prompt=template_text_prompt(manifest.class_name(class_id)),
        rng_seed=derive_seed(seed, manifest.dataset_id, target.image_id, class_id),
    )


def _diagnostics_json(
    episode: PromptEpisode, result: EpisodeResult, strategy: FusionStrategy
) -> str:
    payload = {
        "strategy": strategy.resolve().kind.value,
        "target": episode.target.image_id,
        "reference": episode.reference.image_id,
        "class": episode.class_id,
        "text_prompt": episode.text_prompt,
        "rng_seed": episode.rng_seed,
        "branch_taken": result.branch_taken.value if result.branch_taken else None,
        "counters": result.diagnostics,
        "proposals": [
            {
                "source": prop.source.value,
                "area": prop.mask.area,
                "prompt_points": len(prop.prompt_points),
                "decoder_score": prop.decoder_score,
                "backward_score": verdict.score,
                "reason": verdict.reason.value,
                "accepted": verdict.accepted,
            }
            for prop, verdict in result.proposals
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

_MANIFEST_CACHE: dict[str, DatasetManifest] = {}


def _cached_manifest(path: str) -> DatasetManifest:
    if path not in _MANIFEST_CACHE:
        _MANIFEST_CACHE[path] = load_manifest(path)
    return _MANIFEST_CACHE[path]


def _episode_task(payload: dict) -> dict:
    """Run one (image, class) episode; never raises.

    Failures come back flagged, scored as IoU 0 against the ground truth.
    """
    manifest = _cached_manifest(payload["manifest"])
    strategy = FusionStrategy(
        kind=StrategyKind(payload["kind"]),
        with_lisa_mask=payload["with_lisa_mask"],
        params=MatchingParams(**payload["params"]),
    )
    base = {
        "dataset": manifest.dataset_id,
        "domain": manifest.domain,
        "class": payload["class_id"],
        "image": payload["image_id"],
        "method": payload["method"],
        "failed": False,
        "error": None,
    }
    target = manifest.image(payload["image_id"])
    gt_area = None
    try:
        gt = load_mask(_require_file(Path(target.gt_masks[payload["class_id"]]), "ground truth"))
        gt_area = gt.area
        episode = sample_episode(manifest, target, payload["class_id"], payload["seed"])
        loaded = _load_episode(manifest, episode, strategy)
        result = run_episode(
            strategy, loaded.inputs, loaded.backend,
            tp_mask=loaded.tp_mask,
            tp_mask_reference=loaded.tp_mask_reference,
            tp_logits=loaded.tp_logits,
        )
        inter, union = iou_counts(result.final_mask, gt)
        return {**base, "intersection": inter, "union": union}
    except Exception as exc:  # record-and-continue: one bad episode must not kill the run
        logger.warning(
            "episode %s/%s class %s failed: %s",
            base["dataset"], base["image"], base["class"], exc,
        )
        union = gt_area if gt_area else 1
        return {**base, "intersection": 0, "union": union, "failed": True, "error": str(exc)}


def cmd_evaluate(args: argparse.Namespace) -> int:
    strategy = _strategy_from_args(args)
    config = RunConfig(
        manifests=[Path(p) for p in args.manifest],
        strategy=strategy,
        seed=args.seed,
        workers=args.workers,
        out=Path(args.out),
    )
    config.validate()
    manifests = [load_manifest(_require_file(p, "manifest")) for p in config.manifests]
    _validate_strategy_inputs(manifests, strategy)

    tasks = []
    for path, manifest in zip(config.manifests, manifests):
        for image in manifest.images:
            for cid, _ in manifest.classes:
                if cid not in image.gt_masks:
                    continue
                tasks.append(
                    {
                        "manifest": str(path),
                        "image_id": image.image_id,
                        "class_id": cid,
                        "method": args.strategy,
                        "kind": strategy.kind.value,
                        "with_lisa_mask": strategy.with_lisa_mask,
                        "params": asdict(strategy.params),
                        "seed": config.seed,
                    }
                )
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_episode_task, tasks))
    else:
        outcomes = [_episode_task(task) for task in tasks]

    records = sort_records(
        IoURecord(
            dataset_id=o["dataset"], domain=o["domain"], class_id=o["class"],
            image_id=o["image"], method_id=o["method"],
            intersection=o["intersection"], union=o["union"],
        )
        for o in outcomes
    )
    failures = [o for o in outcomes if o["failed"]]

    config.out.mkdir(parents=True, exist_ok=True)
    write_records(records, config.out / "records.csv")
    report = aggregate(records, method_id=args.strategy)
    write_report_csv(report, config.out / "report.csv")
    if failures:
        (config.out / "failures.json").write_text(
            json.dumps(
                [
                    {k: f[k] for k in ("dataset", "image", "class", "error")}
                    for f in failures
                ],
                indent=2,
            )
        )
        logger.warning("%d of %d episodes failed; see failures.json", len(failures), len(tasks))
    print(format_report_table([report]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle / diff
# ---------------------------------------------------------------------------

def cmd_oracle(args: argparse.Namespace) -> int:
    records_a = read_records(_require_file(Path(args.records_a), "record file"))
    records_b = read_records(_require_file(Path(args.records_b), "record file"))
    report_a = aggregate(records_a)
    report_b = aggregate(records_b)
    if args.mode == "dataset":
        oracle = oracle_ensemble(report_a, report_b)
    else:
        oracle = oracle_ensemble_plus(records_a, records_b)
    print(format_report_table([report_a, report_b, oracle]))
    if args.out is not None:
        write_report_csv(oracle, args.out)
    return EXIT_OK


def _flat_classes(per_class: dict[str, dict[str, float]]) -> dict[str, float]:
    """class -> IoU across datasets; duplicated names get a dataset suffix."""
    counts: dict[str, int] = {}
    for classes in per_class.values():
        for name in classes:
            counts[name] = counts.get(name, 0) + 1
    flat: dict[str, float] = {}
    for dataset_id, classes in per_class.items():
        for name, value in classes.items():
            key = name if counts[name] == 1 else f"{name} ({dataset_id})"
            flat[key] = value
    return flat


def cmd_diff(args: argparse.Namespace) -> int:
    if args.top_n < 0:
        raise ValueError(f"--top-n must be >= 0, got {args.top_n}")
    records_tp = read_records(_require_file(Path(args.records_tp), "record file"))
    records_vp = read_records(_require_file(Path(args.records_vp), "record file"))
    ranking = class_diff_ranking(
        _flat_classes(aggregate(records_tp).per_class),
        _flat_classes(aggregate(records_vp).per_class),
    )
    lines = ["rank,class,iou_tp,iou_vp,diff,abs_diff"]
    for rank, (name, value_tp, value_vp, diff) in enumerate(ranking[: args.top_n], start=1):
        cell = name if "," not in name else f'"{name}"'
        lines.append(
            f"{rank},{cell},{format_float(100 * value_tp)},{format_float(100 * value_vp)},"
            f"{format_float(100 * diff)},{format_float(100 * abs(diff))}"
        )
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------

def _strategy_from_args(args: argparse.Namespace) -> FusionStrategy:
    params = MatchingParams(
        temperature=args.tau,
        theta=args.theta,
        link_radius=args.link_radius,
        points_per_cluster=args.points_per_cluster,
        rho=args.rho,
        min_area=args.min_area,
        max_area_frac=args.max_area_frac,
        proto_cap=args.proto_cap,
    )
    params.validate()
    return FusionStrategy(
        kind=STRATEGY_NAMES[args.strategy],
        with_lisa_mask=args.with_lisa_mask == "true",
        params=params,
    ).resolve()


def _add_threshold_flags(parser: argparse.ArgumentParser) -> None:
    defaults = MatchingParams()
    parser.add_argument("--tau", type=float, default=defaults.temperature,
                        help="softmax temperature over similarities")
    parser.add_argument("--theta", type=float, default=defaults.theta,
                        help="similarity retention threshold, in (-1, 1)")
    parser.add_argument("--rho", type=float, default=defaults.rho,
                        help="backward-consistency acceptance threshold")
    parser.add_argument("--min-area", type=int, default=defaults.min_area,
                        help="reject proposals below this pixel area")
    parser.add_argument("--max-area-frac", type=float, default=defaults.max_area_frac,
                        help="reject proposals above this image fraction")
    parser.add_argument("--link-radius", type=int, default=defaults.link_radius,
                        help="Chebyshev linking distance for clustering")
    parser.add_argument("--points-per-cluster", type=int, default=defaults.points_per_cluster,
                        help="decoder prompts per cluster")
    parser.add_argument("--proto-cap", type=int, default=defaults.proto_cap,
                        help="cell-sample cap for prototypes and backward checks")


def _add_strategy_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--strategy", choices=sorted(STRATEGY_NAMES), default="visual")
    parser.add_argument("--with-lisa-mask", choices=["true", "false"], default="false",
                        help="append the text-branch mask where the strategy allows it")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpss",
        description="Training-free prompt-fusion segmentation over file-backed model outputs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="run one episode and write its mask")
    seg.add_argument("--manifest", required=True)
    seg.add_argument("--image", required=True, help="target image id")
    seg.add_argument("--class-id", required=True)
    seg.add_argument("--reference", help="reference image id (default: seeded sample)")
    seg.add_argument("--seed", type=int, default=0)
    seg.add_argument("--out", default=".", help="output directory")
    _add_strategy_flags(seg)
    _add_threshold_flags(seg)
    seg.set_defaults(func=cmd_segment)

    ev = sub.add_parser("evaluate", help="run every episode in the manifests")
    ev.add_argument("--manifest", required=True, nargs="+")
    ev.add_argument("--seed", type=int, required=True)
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--out", required=True, help="output directory")
    _add_strategy_flags(ev)
    _add_threshold_flags(ev)
    ev.set_defaults(func=cmd_evaluate)

    orc = sub.add_parser("oracle", help="upper-bound ensemble of two record files")
    orc.add_argument("records_a", help="record CSV, method A (text prompt first)")
    orc.add_argument("records_b", help="record CSV, method B")
    orc.add_argument("--mode", choices=["dataset", "image"], default="dataset")
    orc.add_argument("--out", help="write the oracle report CSV here")
    orc.set_defaults(func=cmd_oracle)

    diff = sub.add_parser("diff", help="rank classes by TP-vs-VP disagreement")
    diff.add_argument("records_tp", help="record CSV for the text-prompt method")
    diff.add_argument("records_vp", help="record CSV for the visual-prompt method")
    diff.add_argument("--top-n", type=int, default=10)
    diff.add_argument("--out", help="write the ranking CSV here")
    diff.set_defaults(func=cmd_diff)
    return parser


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("FPSS_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, SchemaViolation, UnknownDomain, DuplicateId,
            EmptyClassName, MissingReferenceTPMask) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, NoEligibleReference, AlignmentMismatch,
            DatasetMismatch, NoRecords) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FpssError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except Exception as exc:  # last resort: anything else is a pipeline failure
        logger.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
