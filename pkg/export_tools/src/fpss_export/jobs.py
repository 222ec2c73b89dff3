"""Export jobs: run a backbone over images, write files, emit a fragment.

A job is a list of images plus a backbone identifier and an output
directory.  Each op writes its tensor/mask files and a JSON manifest
fragment whose entries slot directly into the engine's dataset manifest
("images" entries keyed by image_id).  The tools do no algorithmic work:
backbone outputs are cast to their wire dtype, reshaped to their grid,
and written.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import load_feature_backbone, load_proposal_generator, load_text_segmenter
from .formats import read_image_pgm, write_mask_pgm, write_mask_stack, write_tensor_f32

logger = logging.getLogger(__name__)

# text prompt contract shared with the engine's manifest reader
PROMPT_TEMPLATE = "Segment all the instances of class {name} in the image"


@dataclass(frozen=True)
class ExportJob:
    """One batch of images bound for a single backbone."""

    images: list[tuple[str, Path]]       # (image_id, path) pairs
    backbone: str
    out_dir: Path
    patch: int = 4
    depth: int = 16
    seed: int = 0
    classes: dict[str, str] = field(default_factory=dict)   # class_id -> name
    prompt_template: str = PROMPT_TEMPLATE

    def __post_init__(self) -> None:
        ids = [image_id for image_id, _ in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("repeated image id in export job")


def _write_fragment(path: Path, entries: list[dict], extra: dict | None = None) -> None:
    doc = dict(extra or {})
    doc["images"] = entries
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def export_features(job: ExportJob) -> Path:
    """Write one (H, W, D) float32 feature tensor per image.

    Returns the manifest fragment path; entries carry image_id and the
    feature file name relative to the output directory.
    """
    backbone = load_feature_backbone(job.backbone, job.patch, job.depth, job.seed)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for image_id, image_path in job.images:
        image = read_image_pgm(image_path)
        features = backbone.extract(image)
        name = f"{image_id}.feat.fpss"
        write_tensor_f32(features, job.out_dir / name)
        logger.info("%s: %s -> %s %s", job.backbone, image_path, name, features.shape)
        entries.append({"image_id": image_id, "feature_path": name})
    fragment = job.out_dir / "features.fragment.json"
    _write_fragment(fragment, entries, {"backbone": job.backbone})
    return fragment


def export_tp_outputs(job: ExportJob, write_logits: bool = True) -> Path:
    """Write a u8 mask (and optionally f32 logits) per (image, class).

    Prompts come from the shared template applied to each class name.
    Returns the manifest fragment path; entries carry tp_masks/tp_logits
    maps keyed by class id, file names relative to the output directory.
    """
    if not job.classes:
        raise ValueError("text-prompt export needs at least one class")
    segmenter = load_text_segmenter(job.backbone)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for image_id, image_path in job.images:
        image = read_image_pgm(image_path)
        masks: dict[str, str] = {}
        logit_files: dict[str, str] = {}
        for class_id, class_name in sorted(job.classes.items()):
            prompt = job.prompt_template.format(name=class_name)
            logits, mask = segmenter.predict(image, prompt)
            mask_name = f"{image_id}.tp.c{class_id}.pgm"
            write_mask_pgm(mask, job.out_dir / mask_name)
            masks[class_id] = mask_name
            if write_logits:
                logits_name = f"{image_id}.tplog.c{class_id}.fpss"
                write_tensor_f32(logits, job.out_dir / logits_name)
                logit_files[class_id] = logits_name
        entry = {"image_id": image_id, "tp_masks": masks}
        if write_logits:
            entry["tp_logits"] = logit_files
        entries.append(entry)
    fragment = job.out_dir / "tp.fragment.json"
    classes = [{"id": cid, "name": name} for cid, name in sorted(job.classes.items())]
    _write_fragment(fragment, entries, {"model": job.backbone, "classes": classes})
    return fragment


def export_bank(job: ExportJob, cap: int = 64) -> Path:
    """Write one candidate-mask bank per image plus its score sidecar.

    The bank is a u8 (N, H, W) stack; scores land in a JSON sidecar named
    by appending '.scores.json' to the bank file name, the location the
    engine's bank reader probes.
    """
    if cap < 1:
        raise ValueError(f"candidate cap must be >= 1, got {cap}")
    generator = load_proposal_generator(job.backbone, cap)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for image_id, image_path in job.images:
        image = read_image_pgm(image_path)
        masks, scores = generator.propose(image)
        name = f"{image_id}.bank.fpss"
        write_mask_stack(masks, job.out_dir / name)
        (job.out_dir / f"{name}.scores.json").write_text(
            json.dumps({"scores": scores}, sort_keys=True) + "\n"
        )
        logger.info("%s: %s -> %s (%d candidates)", job.backbone, image_path, name, len(scores))
        entries.append({"image_id": image_id, "proposal_bank": name})
    fragment = job.out_dir / "bank.fragment.json"
    _write_fragment(fragment, entries, {"generator": job.backbone})
    return fragment
