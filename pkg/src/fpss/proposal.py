"""Promptable mask decoding behind a file boundary.

Point clusters become mask proposals through a decoder backend.  Neural
decoders run out of process: their per-image candidate masks are dumped to
a proposal-bank file which the bank backend replays.  The region-oracle
backend decodes against a labeled region map and exists for synthetic
fixtures where exact expected masks are known.

Backends are read-only after construction, so decode calls are safe to run
concurrently.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    NoCoveringProposal,
    PointOutOfBounds,
    SchemaViolation,
)
from .matching import PointCluster
from .tensor_core import (
    BinaryMask,
    MaskStack,
    PointPrompt,
    map_point,
    read_label_grid,
    read_tensor,
)

logger = logging.getLogger(__name__)


class ProposalSource(Enum):
    VISUAL_BRANCH = "VisualBranch"
    TEXT_BRANCH = "TextBranch"


class DecoderKind(Enum):
    REGION_ORACLE = "RegionOracle"
    PROPOSAL_BANK = "ProposalBank"
    EXTERNAL = "External"


@dataclass(frozen=True)
class MaskProposal:
    """One candidate segment, tagged with the branch that proposed it."""

    mask: BinaryMask
    source: ProposalSource
    prompt_points: list[PointPrompt] = field(default_factory=list)
    decoder_score: float | None = None

    def __post_init__(self) -> None:
        if self.source is ProposalSource.TEXT_BRANCH and self.prompt_points:
            raise ValueError("text-branch proposals carry no prompt points")


def text_proposal(mask: BinaryMask) -> MaskProposal:
    """Wrap a text-model mask as a proposal with no prompt points."""
    return MaskProposal(mask=mask, source=ProposalSource.TEXT_BRANCH)


@dataclass(frozen=True)
class TargetContext:
    """Geometry of the image being decoded: feature grid vs pixel canvas."""

    feature_shape: tuple[int, int]
    image_shape: tuple[int, int]


class DecoderBackend(Protocol):
    kind: DecoderKind

    def decode(self, points: Sequence[PointPrompt], context: TargetContext) -> MaskProposal:
        ...


# ---------------------------------------------------------------------------
# Region oracle
# ---------------------------------------------------------------------------

def _label_components(labels: np.ndarray) -> np.ndarray:
    """4-connected components of same-label nonzero cells; -1 = background.

    Component ids follow row-major discovery order, which makes them a
    stable tie-break key.
    """
    height, width = labels.shape
    comp = np.full(labels.shape, -1, dtype=np.int64)
    next_id = 0
    for y, x in np.argwhere(labels != 0):
        if comp[y, x] != -1:
            continue
        value = labels[y, x]
        queue = deque([(int(y), int(x))])
        comp[y, x] = next_id
        while queue:
            cy, cx = queue.popleft()
            for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                if 0 <= ny < height and 0 <= nx < width:
                    if labels[ny, nx] == value and comp[ny, nx] == -1:
                        comp[ny, nx] = next_id
                        queue.append((ny, nx))
        next_id += 1
    return comp


class RegionOracleBackend:
    """Decodes points against a labeled region map (synthetic fixtures).

    The proposal is the connected component receiving the majority of the
    prompt points.  Vote ties resolve to the component of the peak point
    when it is among the leaders, else to the earliest-discovered leader.
    Points that all land on background decode to an empty mask.
    """

    kind = DecoderKind.REGION_ORACLE

    def __init__(self, labels: np.ndarray):
        labels = np.ascontiguousarray(np.asarray(labels, dtype=np.uint8))
        labels.flags.writeable = False
        self.labels = labels
        self._components = _label_components(labels)

    @classmethod
    def from_file(cls, path: str | Path) -> "RegionOracleBackend":
        return cls(read_label_grid(path))

    def decode(self, points: Sequence[PointPrompt], context: TargetContext) -> MaskProposal:
        _check_points(points, context)
        if self.labels.shape != context.image_shape:
            raise DimensionMismatch(
                f"label map {self.labels.shape} does not cover image {context.image_shape}"
            )
        votes: dict[int, int] = {}
        pixel_comp: list[int] = []
        for point in points:
            py, px = map_point(point.y, point.x, context.feature_shape, context.image_shape)
            comp_id = int(self._components[py, px])
            pixel_comp.append(comp_id)
            if comp_id != -1:
                votes[comp_id] = votes.get(comp_id, 0) + 1
        if not votes:
            empty = BinaryMask.full(context.image_shape, False)
            return MaskProposal(mask=empty, source=ProposalSource.VISUAL_BRANCH,
                                prompt_points=list(points))
        top = max(votes.values())
        leaders = sorted(cid for cid, count in votes.items() if count == top)
        peak_index = min(
            range(len(points)),
            key=lambda i: (-points[i].score, points[i].y, points[i].x),
        )
        winner = pixel_comp[peak_index] if pixel_comp[peak_index] in leaders else leaders[0]
        mask = BinaryMask(self._components == winner)
        return MaskProposal(mask=mask, source=ProposalSource.VISUAL_BRANCH,
                            prompt_points=list(points))


# ---------------------------------------------------------------------------
# Proposal bank
# ---------------------------------------------------------------------------

class ProposalBankBackend:
    """Replays candidate masks dumped by an out-of-process decoder.

    The candidate covering the most prompt points wins; ties resolve to the
    higher stored decoder score, then to file order.
    """

    kind = DecoderKind.PROPOSAL_BANK

    def __init__(self, stack: MaskStack, scores: Sequence[float] | None = None):
        if scores is None:
            scores = [0.0] * len(stack)
        if len(scores) != len(stack):
            raise SchemaViolation(
                f"bank holds {len(stack)} candidates but {len(scores)} scores"
            )
        self.stack = stack
        self.scores = [float(s) for s in scores]

    @classmethod
    def from_file(cls, path: str | Path, scores_path: str | Path | None = None) -> "ProposalBankBackend":
        stack = read_tensor(path)
        if not isinstance(stack, MaskStack):
            raise SchemaViolation(f"{path}: proposal banks must be 3-D uint8 stacks")
        if scores_path is None:
            scores_path = Path(str(path) + ".scores.json")
        scores: Sequence[float] | None = None
        if Path(scores_path).exists():
            payload = json.loads(Path(scores_path).read_text())
            if not isinstance(payload, dict) or "scores" not in payload:
                raise SchemaViolation(f"{scores_path}: expected an object with a 'scores' list")
            scores = payload["scores"]
        else:
            logger.debug("no score sidecar at %s; candidates tie-break by file order", scores_path)
        return cls(stack, scores)

    def decode(self, points: Sequence[PointPrompt], context: TargetContext) -> MaskProposal:
        _check_points(points, context)
        if self.stack.mask_shape != context.image_shape:
            raise DimensionMismatch(
                f"bank masks {self.stack.mask_shape} do not cover image {context.image_shape}"
            )
        pixels = [
            map_point(p.y, p.x, context.feature_shape, context.image_shape) for p in points
        ]
        best: tuple[int, float, int] | None = None  # (covered, score, -index) maximized
        for index in range(len(self.stack)):
            mask = self.stack.data[index]
            covered = sum(1 for py, px in pixels if mask[py, px])
            if covered == 0:
                continue
            key = (covered, self.scores[index], -index)
            if best is None or key > best:
                best = key
                best_index = index
        if best is None:
            raise NoCoveringProposal(
                f"none of the {len(self.stack)} bank candidates contains a prompt point"
            )
        return MaskProposal(
            mask=self.stack[best_index],
            source=ProposalSource.VISUAL_BRANCH,
            prompt_points=list(points),
            decoder_score=self.scores[best_index],
        )


class ExternalBackend:
    """Placeholder for an in-process neural decoder; not part of this engine.

    Real decoders contribute through proposal-bank files instead.
    """

    kind = DecoderKind.EXTERNAL

    def decode(self, points: Sequence[PointPrompt], context: TargetContext) -> MaskProposal:
        raise NotImplementedError(
            "external decoders run out of process; dump their candidates to a "
            "proposal bank and use ProposalBankBackend"
        )


def _check_points(points: Sequence[PointPrompt], context: TargetContext) -> None:
    if not points:
        raise ValueError("decode requires at least one prompt point")
    gh, gw = context.feature_shape
    for point in points:
        if not (0 <= point.y < gh and 0 <= point.x < gw):
            raise PointOutOfBounds(
                f"point (y={point.y}, x={point.x}) outside feature grid {context.feature_shape}"
            )


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def decode(
    backend: DecoderBackend, points: Sequence[PointPrompt], context: TargetContext
) -> MaskProposal:
    """Decode one point set through the backend."""
    return backend.decode(points, context)


def decode_all(
    backend: DecoderBackend, clusters: Sequence[PointCluster], context: TargetContext
) -> list[MaskProposal]:
    """Decode every cluster's prompt points, deduplicating identical masks.

    Clusters whose points no bank candidate covers are skipped with a
    diagnostic; pixel-identical masks keep only their first occurrence.
    """
    proposals: list[MaskProposal] = []
    seen: set[bytes] = set()
    for index, cluster in enumerate(clusters):
        try:
            prop = decode(backend, cluster.prompt_points, context)
        except NoCoveringProposal as exc:
            logger.debug("cluster %d produced no proposal: %s", index, exc)
            continue
        key = np.packbits(prop.mask.data).tobytes()
        if key in seen:
            continue
        seen.add(key)
        proposals.append(prop)
    return proposals
