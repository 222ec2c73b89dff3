"""Dataset manifests, prompt-episode sampling, and text-prompt templating.

A manifest is a UTF-8 JSON file:

    {
      "dataset_id": "...",
      "domain": "General" | "Earth" | "Medical" | "Engineering" | "Agriculture",
      "classes": [{"id": ..., "name": ...}, ...],
      "images": [
        {
          "image_id": "...",
          "feature_path": "...",
          "gt_masks": {"<class_id>": "path", ...},
          "tp_masks":  {...},          # optional
          "tp_logits": {...},          # optional
          "proposal_bank": "path"      # optional
        }, ...
      ]
    }

Paths are relative to the manifest's directory.  Episode sampling draws one
reference image (the visual prompt) per prediction, uniformly over eligible
candidates, from a seed derived deterministically from the run seed and the
episode's identity.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateId,
    EmptyClassName,
    NoEligibleReference,
    SchemaViolation,
    UnknownDomain,
)
from .tensor_core import BinaryMask, load_mask

logger = logging.getLogger(__name__)

DOMAINS = ("General", "Earth", "Medical", "Engineering", "Agriculture")

TEXT_PROMPT_TEMPLATE = "Segment all the instances of class {class_name} in the image"


def template_text_prompt(class_name: str) -> str:
    """Embed a class name in the canonical segmentation instruction."""
    if not class_name:
        raise EmptyClassName("class name must be nonempty")
    return TEXT_PROMPT_TEMPLATE.format(class_name=class_name)


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    feature_path: Path
    gt_masks: dict[str, Path]
    tp_masks: dict[str, Path] = field(default_factory=dict)
    tp_logits: dict[str, Path] = field(default_factory=dict)
    proposal_bank: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    domain: str
    classes: list[tuple[str, str]]  # (class_id, class_name)
    images: list[ImageEntry]

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise UnknownDomain(f"domain {self.domain!r} is not one of {DOMAINS}")
        class_ids = [cid for cid, _ in self.classes]
        if len(set(class_ids)) != len(class_ids):
            raise DuplicateId(f"{self.dataset_id}: repeated class id")
        image_ids = [img.image_id for img in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise DuplicateId(f"{self.dataset_id}: repeated image id")

    def class_name(self, class_id: str) -> str:
        for cid, name in self.classes:
            if cid == class_id:
                return name
        raise KeyError(f"unknown class id {class_id!r} in {self.dataset_id}")

    def image(self, image_id: str) -> ImageEntry:
        for img in self.images:
            if img.image_id == image_id:
                return img
        raise KeyError(f"unknown image id {image_id!r} in {self.dataset_id}")


@dataclass(frozen=True)
class PromptEpisode:
    """One prediction's worth of prompting: a target, a class, one reference."""

    target: ImageEntry
    class_id: str
    reference: ImageEntry
    reference_mask: BinaryMask
    text_prompt: str
    rng_seed: int

    def __post_init__(self) -> None:
        if self.reference.image_id == self.target.image_id:
            raise ValueError("reference must differ from target")
        if self.reference_mask.area == 0:
            raise ValueError("reference mask must have nonzero area")


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------

def _require(obj: dict, key: str, path: Path) -> object:
    if key not in obj:
        raise SchemaViolation(f"{path}: missing required key {key!r}")
    return obj[key]


def _path_map(obj: object, base: Path, context: str, path: Path) -> dict[str, Path]:
    if not isinstance(obj, dict):
        raise SchemaViolation(f"{path}: {context} must be an object of class->path")
    return {str(k): base / str(v) for k, v in obj.items()}


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest file; paths come back resolved."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaViolation(f"{path}: cannot parse manifest: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaViolation(f"{path}: manifest root must be an object")
    base = path.parent

    dataset_id = str(_require(doc, "dataset_id", path))
    domain = str(_require(doc, "domain", path))
    if domain not in DOMAINS:
        raise UnknownDomain(f"{path}: domain {domain!r} is not one of {DOMAINS}")

    raw_classes = _require(doc, "classes", path)
    if not isinstance(raw_classes, list) or not raw_classes:
        raise SchemaViolation(f"{path}: classes must be a nonempty array")
    classes: list[tuple[str, str]] = []
    for entry in raw_classes:
        if not isinstance(entry, dict) or "id" not in entry or "name" not in entry:
            raise SchemaViolation(f"{path}: each class needs id and name")
        classes.append((str(entry["id"]), str(entry["name"])))

    raw_images = _require(doc, "images", path)
    if not isinstance(raw_images, list) or not raw_images:
        raise SchemaViolation(f"{path}: images must be a nonempty array")
    images: list[ImageEntry] = []
    known_classes = {cid for cid, _ in classes}
    for entry in raw_images:
        if not isinstance(entry, dict):
            raise SchemaViolation(f"{path}: each image entry must be an object")
        image_id = str(_require(entry, "image_id", path))
        feature_path = base / str(_require(entry, "feature_path", path))
        gt_masks = _path_map(_require(entry, "gt_masks", path), base, "gt_masks", path)
        unknown = set(gt_masks) - known_classes
        if unknown:
            raise SchemaViolation(f"{path}: image {image_id} lists unknown classes {sorted(unknown)}")
        images.append(
            ImageEntry(
                image_id=image_id,
                feature_path=feature_path,
                gt_masks=gt_masks,
                tp_masks=_path_map(entry.get("tp_masks", {}), base, "tp_masks", path),
                tp_logits=_path_map(entry.get("tp_logits", {}), base, "tp_logits", path),
                proposal_bank=(base / str(entry["proposal_bank"])) if "proposal_bank" in entry else None,
            )
        )
    return DatasetManifest(dataset_id=dataset_id, domain=domain, classes=classes, images=images)


# ---------------------------------------------------------------------------
# Episode sampling
# ---------------------------------------------------------------------------

_MIX_CONST = 0x9E3779B97F4A7C15  # 64-bit golden-ratio multiplier


def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(global_seed: int, *tokens: str) -> int:
    """Mix a run seed with identity tokens into a 64-bit episode seed.

    Multiply-xor mixing over stable (blake2b) token hashes keeps the result
    identical across platforms and Python processes.
    """
    h = global_seed & 0xFFFFFFFFFFFFFFFF
    for token in tokens:
        h ^= _token_hash(token)
        h = (h * _MIX_CONST) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 29
    return h


def eligible_references(
    manifest: DatasetManifest, target: ImageEntry, class_id: str
) -> list[ImageEntry]:
    """Images other than the target whose ground truth for the class is nonempty."""
    out = []
    for img in manifest.images:
        if img.image_id == target.image_id:
            continue
        mask_path = img.gt_masks.get(class_id)
        if mask_path is None:
            continue
        if load_mask(mask_path).area > 0:
            out.append(img)
    return out


def sample_episode(
    manifest: DatasetManifest, target: ImageEntry, class_id: str, seed: int
) -> PromptEpisode:
    """Draw one reference uniformly (seeded) and assemble the prompt episode."""
    candidates = eligible_references(manifest, target, class_id)
    if not candidates:
        raise NoEligibleReference(
            f"{manifest.dataset_id}: no other image holds class {class_id!r} "
            f"with nonzero area (target {target.image_id})"
        )
    episode_seed = derive_seed(seed, manifest.dataset_id, target.image_id, class_id)
    rng = np.random.default_rng(episode_seed)
    reference = candidates[int(rng.integers(len(candidates)))]
    return PromptEpisode(
        target=target,
        class_id=class_id,
        reference=reference,
        reference_mask=load_mask(reference.gt_masks[class_id]),
        text_prompt=template_text_prompt(manifest.class_name(class_id)),
        rng_seed=episode_seed,
    )
