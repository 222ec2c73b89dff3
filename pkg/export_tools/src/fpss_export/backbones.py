"""Deterministic stand-in backbones behind the same interface real ones use.

A feature backbone maps a grayscale image to an (H, W, D) float32 stack on
its own patch grid; a text segmenter maps (image, prompt) to pixel logits
plus the thresholded mask.  The two built-ins below need no weights and
are bit-reproducible, which is what the export contract actually tests:
the file a backbone's numbers land in, not the numbers themselves.
Loading a named real model is routed through the same registry and fails
cleanly when the model is not available in this build.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class BackboneUnavailable(RuntimeError):
    """The requested model cannot be loaded in this environment."""


def _patch_grid(image: np.ndarray, patch: int) -> np.ndarray:
    """View the image as (H, W, patch, patch) whole patches, remainder dropped."""
    h, w = image.shape
    if patch < 1:
        raise ValueError(f"patch size must be >= 1, got {patch}")
    gh, gw = h // patch, w // patch
    if gh == 0 or gw == 0:
        raise ValueError(f"image {image.shape} is smaller than one {patch}x{patch} patch")
    trimmed = image[: gh * patch, : gw * patch]
    return trimmed.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3)


@dataclass(frozen=True)
class GridStatsBackbone:
    """Eight fixed statistics per patch; no weights, no randomness."""

    patch: int = 4
    depth = 8

    def extract(self, image: np.ndarray) -> np.ndarray:
        patches = _patch_grid(image, self.patch)
        gh, gw = patches.shape[:2]
        flat = patches.reshape(gh, gw, -1)
        dx = np.abs(np.diff(patches, axis=3)).reshape(gh, gw, -1)
        dy = np.abs(np.diff(patches, axis=2)).reshape(gh, gw, -1)
        ys, xs = np.meshgrid(np.linspace(0.0, 1.0, gh), np.linspace(0.0, 1.0, gw), indexing="ij")
        channels = [
            flat.mean(axis=2),
            flat.std(axis=2),
            flat.min(axis=2),
            flat.max(axis=2),
            dx.mean(axis=2) if dx.size else np.zeros((gh, gw)),
            dy.mean(axis=2) if dy.size else np.zeros((gh, gw)),
            ys,
            xs,
        ]
        return np.stack(channels, axis=2).astype(np.float32)


@dataclass(frozen=True)
class RandomProjectionBackbone:
    """Seeded Gaussian projection of raw patches to a chosen depth."""

    patch: int = 4
    depth: int = 16
    seed: int = 0

    def extract(self, image: np.ndarray) -> np.ndarray:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        patches = _patch_grid(image, self.patch)
        gh, gw = patches.shape[:2]
        flat = patches.reshape(gh, gw, -1)
        rng = np.random.default_rng(self.seed)
        weights = rng.standard_normal((flat.shape[2], self.depth)) / np.sqrt(flat.shape[2])
        return (flat @ weights).astype(np.float32)


@dataclass(frozen=True)
class ThresholdSegmenter:
    """Text-prompted stand-in: the prompt sets an intensity quantile.

    A stable hash of the prompt picks a quantile in [0.35, 0.65]; logits
    are the signed distance of each pixel from that intensity level and
    the mask is logits > 0.  Different prompts give different masks,
    identical prompts give identical bytes.
    """

    def predict(self, image: np.ndarray, prompt: str) -> tuple[np.ndarray, np.ndarray]:
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        quantile = 0.35 + 0.30 * (int.from_bytes(digest[:4], "big") / 0xFFFFFFFF)
        level = float(np.quantile(image, quantile))
        logits = (image - level).astype(np.float32)
        return logits, logits > 0


def _components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components in scan order (tiny BFS, no dependencies)."""
    height, width = mask.shape
    seen = np.zeros_like(mask)
    found = []
    for sy in range(height):
        for sx in range(width):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            component = np.zeros_like(mask)
            queue = [(sy, sx)]
            seen[sy, sx] = True
            while queue:
                y, x = queue.pop()
                component[y, x] = True
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < height and 0 <= nx < width and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            found.append(component)
    return found


@dataclass(frozen=True)
class EverythingSegmenter:
    """Promptless candidate generator: components of nested intensity levels.

    For each quantile level the image is thresholded and split into
    connected components; every component big enough becomes one candidate
    mask, scored by its mean interior intensity.  Candidates come back
    score-descending (stable on ties), capped.
    """

    levels: tuple[float, ...] = (0.5, 0.75, 0.9)
    min_area: int = 4
    cap: int = 64

    def propose(self, image: np.ndarray) -> tuple[np.ndarray, list[float]]:
        candidates = []
        for level in self.levels:
            cut = float(np.quantile(image, level))
            for component in _components(image >= cut):
                candidates.append((component, float(image[component].mean())))
        kept = [c for c in candidates if c[0].sum() >= self.min_area] or candidates
        kept.sort(key=lambda pair: -pair[1])
        kept = kept[: self.cap]
        masks = np.stack([m for m, _ in kept])
        return masks, [s for _, s in kept]


FEATURE_BACKBONES = {
    "grid-stats": lambda patch, depth, seed: GridStatsBackbone(patch=patch),
    "random-proj": lambda patch, depth, seed: RandomProjectionBackbone(
        patch=patch, depth=depth, seed=seed
    ),
}

TEXT_SEGMENTERS = {
    "threshold-seg": lambda: ThresholdSegmenter(),
}

PROPOSAL_GENERATORS = {
    "everything-thresh": lambda cap: EverythingSegmenter(cap=cap),
}


def load_feature_backbone(name: str, patch: int, depth: int, seed: int):
    if name not in FEATURE_BACKBONES:
        raise BackboneUnavailable(
            f"feature backbone {name!r} is not available in this build; "
            f"have: {', '.join(sorted(FEATURE_BACKBONES))}"
        )
    return FEATURE_BACKBONES[name](patch, depth, seed)


def load_text_segmenter(name: str):
    if name not in TEXT_SEGMENTERS:
        raise BackboneUnavailable(
            f"text segmenter {name!r} is not available in this build; "
            f"have: {', '.join(sorted(TEXT_SEGMENTERS))}"
        )
    return TEXT_SEGMENTERS[name]()


def load_proposal_generator(name: str, cap: int):
    if name not in PROPOSAL_GENERATORS:
        raise BackboneUnavailable(
            f"proposal generator {name!r} is not available in this build; "
            f"have: {', '.join(sorted(PROPOSAL_GENERATORS))}"
        )
    return PROPOSAL_GENERATORS[name](cap)
