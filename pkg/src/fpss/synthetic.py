"""Planted-outcome fixture generator for tests and demos.

Scenes are built from an orthonormal direction set so that every cosine in
the pipeline is known by construction:

* object cells carry their class direction (similarity ~1 to the
  reference prototypes, retained and accepted),
* distractor cells carry a texture at cosine ~0.7 to class 0 — above the
  retention threshold, so they get proposed, but the same texture appears
  outside the mask in the reference image, so their nearest reference
  cells are out-of-mask and the backward check rejects them,
* hallucination cells carry a direction orthogonal to every prototype —
  invisible to forward matching, and anchored out-of-mask in the
  reference so a text mask over them scores 0 backward consistency,
* background cells sit at cosine ~0.2, below every threshold.

Blobs occupy separate quadrants, keeping clusters disjoint at the default
link radius.  Pixel and feature grids coincide in these fixtures.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import EpisodeInputs
from .proposal import RegionOracleBackend
from .tensor_core import (
    BinaryMask,
    FeatureMap,
    MaskStack,
    ScalarGrid,
    write_mask_pgm,
    write_tensor,
)

# cosine placements of the painted directions relative to class 0
DISTRACTOR_COS = 0.7
BACKGROUND_COS = 0.2

OBJECT_LABEL_BASE = 1          # class c paints label c+1
DISTRACTOR_LABEL = 250         # distinct from any class label


@dataclass(frozen=True)
class ImageScene:
    """One generated image: features plus every planted region."""

    features: FeatureMap
    object_masks: list[BinaryMask]       # one per class
    distractor_mask: BinaryMask
    hallucination_mask: BinaryMask
    label_map: np.ndarray                # uint8; objects, then distractor


@dataclass(frozen=True)
class SyntheticEpisode:
    """A reference/target pair wired for the class-0 episode."""

    inputs: EpisodeInputs
    backend: RegionOracleBackend
    gt_mask: BinaryMask                  # target object blob, class 0
    distractor_mask: BinaryMask
    hallucination_mask: BinaryMask

    @property
    def tp_mask_gt(self) -> BinaryMask:
        return self.gt_mask

    @property
    def tp_mask_hallucinated(self) -> BinaryMask:
        return self.hallucination_mask


def _directions(rng: np.random.Generator, depth: int) -> np.ndarray:
    """Orthonormal direction set as rows (QR of a random square matrix)."""
    q, _ = np.linalg.qr(rng.normal(size=(depth, depth)))
    return q.T


def _blob_boxes(
    rng: np.random.Generator, height: int, width: int, count: int
) -> list[tuple[int, int, int, int]]:
    """Place up to four blobs, one per quadrant, jittered inside it."""
    if count > 4:
        raise ValueError("a scene holds at most four blobs")
    half_h, half_w = height // 2, width // 2
    quadrants = [
        (1, 1, half_h - 2, half_w - 2),
        (1, half_w + 1, half_h - 2, width - 2),
        (half_h + 1, 1, height - 2, half_w - 2),
        (half_h + 1, half_w + 1, height - 2, width - 2),
    ]
    boxes = []
    for top, left, bottom, right in quadrants[:count]:
        max_h, max_w = bottom - top, right - left
        if max_h < 4 or max_w < 4:
            raise ValueError(f"grid {height}x{width} too small for quadrant blobs")
        bh = int(rng.integers(4, min(6, max_h) + 1))
        bw = int(rng.integers(4, min(6, max_w) + 1))
        y0 = int(rng.integers(top, bottom - bh + 1))
        x0 = int(rng.integers(left, right - bw + 1))
        boxes.append((y0, x0, bh, bw))
    return boxes


def _box_mask(shape: tuple[int, int], box: tuple[int, int, int, int]) -> BinaryMask:
    grid = np.zeros(shape, dtype=bool)
    y0, x0, bh, bw = box
    grid[y0 : y0 + bh, x0 : x0 + bw] = True
    return BinaryMask(grid)


def make_scene(
    rng: np.random.Generator,
    directions: np.ndarray,
    height: int,
    width: int,
    classes: int = 1,
    noise: float = 0.01,
) -> ImageScene:
    """Paint one image from a shared direction set.

    Blob quadrants: class objects first, then the distractor, then the
    hallucination region.  The direction set must provide classes + 3
    rows: class directions, a distractor mixing axis, the hallucination
    direction, and a background mixing axis.
    """
    if not 1 <= classes <= 2:
        raise ValueError("scenes support one or two classes")
    depth = directions.shape[1]
    if directions.shape[0] < classes + 3:
        raise ValueError("direction set too small for the requested classes")
    e_obj = directions[:classes]
    e_mix = directions[classes]
    e_hall = directions[classes + 1]
    e_bg_axis = directions[classes + 2]
    distractor_dir = DISTRACTOR_COS * e_obj[0] + np.sqrt(1 - DISTRACTOR_COS**2) * e_mix
    background_dir = BACKGROUND_COS * e_obj[0] + np.sqrt(1 - BACKGROUND_COS**2) * e_bg_axis

    boxes = _blob_boxes(rng, height, width, classes + 2)
    object_boxes, distractor_box, hall_box = boxes[:classes], boxes[classes], boxes[classes + 1]

    features = np.tile(background_dir, (height, width, 1))
    labels = np.zeros((height, width), dtype=np.uint8)
    object_masks = []
    for index, box in enumerate(object_boxes):
        mask = _box_mask((height, width), box)
        features[mask.data] = e_obj[index]
        labels[mask.data] = OBJECT_LABEL_BASE + index
        object_masks.append(mask)
    distractor_mask = _box_mask((height, width), distractor_box)
    features[distractor_mask.data] = distractor_dir
    labels[distractor_mask.data] = DISTRACTOR_LABEL
    hallucination_mask = _box_mask((height, width), hall_box)
    features[hallucination_mask.data] = e_hall

    features = features + rng.normal(scale=noise, size=features.shape)
    return ImageScene(
        features=FeatureMap(features.astype(np.float32)),
        object_masks=object_masks,
        distractor_mask=distractor_mask,
        hallucination_mask=hallucination_mask,
        label_map=labels,
    )


def make_episode(
    seed: int,
    height: int = 28,
    width: int = 28,
    depth: int = 8,
    noise: float = 0.01,
) -> SyntheticEpisode:
    """One class-0 episode: reference and target scenes sharing directions."""
    rng = np.random.default_rng((seed, 97))
    directions = _directions(rng, depth)
    reference = make_scene(rng, directions, height, width, classes=1, noise=noise)
    target = make_scene(rng, directions, height, width, classes=1, noise=noise)
    inputs = EpisodeInputs(
        reference_features=reference.features,
        target_features=target.features,
        reference_mask=reference.object_masks[0],
        image_shape=(height, width),
        seed=seed,
    )
    return SyntheticEpisode(
        inputs=inputs,
        backend=RegionOracleBackend(target.label_map),
        gt_mask=target.object_masks[0],
        distractor_mask=target.distractor_mask,
        hallucination_mask=target.hallucination_mask,
    )


def logits_from_mask(mask: BinaryMask, high: float = 8.0, low: float = 0.0) -> ScalarGrid:
    """Logit grid whose softmax concentrates on the mask cells."""
    return ScalarGrid(np.where(mask.data, high, low).astype(np.float32))


# ---------------------------------------------------------------------------
# On-disk evaluation suites
# ---------------------------------------------------------------------------

def write_suite(
    root: str | Path,
    datasets: int = 2,
    images: int = 3,
    classes: int = 1,
    seed: int = 0,
    height: int = 24,
    width: int = 24,
    depth: int = 8,
    tp_mode: str = "gt",
    domains: tuple[str, ...] = ("General", "Earth", "Medical", "Engineering", "Agriculture"),
) -> list[Path]:
    """Write manifests plus every per-image artifact for a synthetic run.

    Each dataset gets its own direction set; images inside it share that
    set, so any image can serve as the reference for any other.  Proposal
    banks carry the object blobs and the distractor, making bank decoding
    agree with the region-oracle outcome.  ``tp_mode`` controls the text
    masks: "gt", "hallucinated", or "mixed" (alternating by image/class
    parity).  Returns the manifest paths.
    """
    if tp_mode not in ("gt", "hallucinated", "mixed"):
        raise ValueError(f"unknown tp_mode {tp_mode!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifests = []
    for d_index in range(datasets):
        dataset_id = f"synth{d_index}"
        dataset_dir = root / dataset_id
        dataset_dir.mkdir(exist_ok=True)
        dir_rng = np.random.default_rng((seed, d_index, 11))
        directions = _directions(dir_rng, depth)
        image_entries = []
        for i_index in range(images):
            rng = np.random.default_rng((seed, d_index, i_index, 13))
            scene = make_scene(rng, directions, height, width, classes=classes)
            image_id = f"img{i_index}"
            feature_name = f"{image_id}.feat.fpss"
            write_tensor(scene.features, dataset_dir / feature_name)

            gt_masks, tp_masks, tp_logits = {}, {}, {}
            for c_index in range(classes):
                cid = str(c_index + 1)
                gt_name = f"{image_id}.gt.c{cid}.pgm"
                write_mask_pgm(scene.object_masks[c_index], dataset_dir / gt_name)
                gt_masks[cid] = gt_name

                if tp_mode == "gt":
                    hallucinated = False
                elif tp_mode == "hallucinated":
                    hallucinated = True
                else:
                    hallucinated = (i_index + c_index) % 2 == 1
                tp_source = (
                    scene.hallucination_mask if hallucinated else scene.object_masks[c_index]
                )
                tp_name = f"{image_id}.tp.c{cid}.pgm"
                write_mask_pgm(tp_source, dataset_dir / tp_name)
                tp_masks[cid] = tp_name

                logit_name = f"{image_id}.tplog.c{cid}.fpss"
                write_tensor(logits_from_mask(tp_source), dataset_dir / logit_name)
                tp_logits[cid] = logit_name

            bank_name = f"{image_id}.bank.fpss"
            candidates = [m.data for m in scene.object_masks] + [scene.distractor_mask.data]
            write_tensor(MaskStack(np.stack(candidates)), dataset_dir / bank_name)
            scores = [0.9 - 0.1 * k for k in range(len(candidates))]
            (dataset_dir / f"{bank_name}.scores.json").write_text(
                json.dumps({"scores": scores})
            )

            image_entries.append(
                {
                    "image_id": image_id,
                    "feature_path": feature_name,
                    "gt_masks": gt_masks,
                    "tp_masks": tp_masks,
                    "tp_logits": tp_logits,
                    "proposal_bank": bank_name,
                }
            )
        manifest = {
            "dataset_id": dataset_id,
            "domain": domains[d_index % len(domains)],
            "classes": [
                {"id": str(c + 1), "name": f"object-{c + 1}"} for c in range(classes)
            ],
            "images": image_entries,
        }
        manifest_path = dataset_dir / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2))
        manifests.append(manifest_path)
    return manifests
