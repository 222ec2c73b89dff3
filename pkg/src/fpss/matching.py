"""Forward probabilistic feature matching and backward consistency scoring.

Forward direction: reference-mask prototypes are compared against every
target cell (max cosine over the prototype set), the resulting similarity
grid is softmaxed into a probability map, and high-similarity cells are
grouped into point clusters that later prompt the mask decoder.

Backward direction: cells inside a candidate mask are traced back to their
nearest reference cell; the fraction landing inside the reference mask is
the consistency score used to reject implausible proposals.

All operations are pure functions of their inputs; cell-level work is
vectorized with numpy and computed in float64.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import (
    DepthMismatch,
    EmptyMaskAfterDownsample,
    EmptyProposalAfterDownsample,
    FpssError,
)
from .tensor_core import (
    BinaryMask,
    FeatureMap,
    PointPrompt,
    ProbabilityMap,
    ScalarGrid,
    resize_mask_nearest,
    spatial_softmax,
)

if TYPE_CHECKING:  # circular only for type names
    from .proposal import MaskProposal

logger = logging.getLogger(__name__)

# Similarity grids are plain scalar grids; the alias keeps signatures readable.
SimilarityGrid = ScalarGrid


@dataclass(frozen=True)
class MatchingParams:
    """Threshold bundle shared by matching, rejection, and the fusion strategies.

    Defaults are engine configuration: deployments with a real backbone are
    expected to retune them; the synthetic test fixtures pin them as-is.
    """

    temperature: float = 0.1          # softmax temperature over similarity
    theta: float = 0.55               # similarity retention threshold
    link_radius: int = 2              # Chebyshev linking distance for clustering
    points_per_cluster: int = 3       # decoder prompts emitted per cluster
    rho: float = 0.5                  # backward-consistency acceptance threshold
    min_area: int = 16                # proposals below this pixel area are dropped
    max_area_frac: float = 0.95       # proposals above this image fraction are dropped
    proto_cap: int = 1024             # cell-sample cap, both matching directions
    selection_iou_threshold: float = 0.20

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not -1.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (-1, 1), got {self.theta}")
        if self.link_radius < 1:
            raise ValueError(f"link radius must be >= 1, got {self.link_radius}")
        if self.points_per_cluster < 1:
            raise ValueError(f"points per cluster must be >= 1, got {self.points_per_cluster}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.min_area < 0:
            raise ValueError(f"min area must be >= 0, got {self.min_area}")
        if not 0.0 < self.max_area_frac <= 1.0:
            raise ValueError(f"max area fraction must lie in (0, 1], got {self.max_area_frac}")
        if self.proto_cap < 1:
            raise ValueError(f"prototype cap must be >= 1, got {self.proto_cap}")
        if not 0.0 <= self.selection_iou_threshold <= 1.0:
            raise ValueError(
                f"selection IoU threshold must lie in [0, 1], got {self.selection_iou_threshold}"
            )


@dataclass(frozen=True)
class PrototypeSet:
    """Unit-norm reference descriptors drawn from inside the reference mask."""

    vectors: np.ndarray          # (P, D) float32, unit rows
    source_cells: np.ndarray     # (P, 2) int64, (y, x) on the reference grid
    max_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors", np.ascontiguousarray(self.vectors, dtype=np.float32))
        object.__setattr__(self, "source_cells", np.ascontiguousarray(self.source_cells, dtype=np.int64))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def depth(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class PointCluster:
    """Connected group of retained cells plus the prompts it contributes."""

    members: list[PointPrompt]         # every retained cell, row-major
    centroid: tuple[float, float]      # (y, x) mean of member coordinates
    peak: PointPrompt                  # highest-score member
    prompt_points: list[PointPrompt]   # spread-out subset fed to the decoder


class RejectionReason(Enum):
    PASS = "Pass"
    BACKWARD_INCONSISTENT = "BackwardInconsistent"
    TOO_SMALL = "TooSmall"
    TOO_LARGE = "TooLarge"


@dataclass(frozen=True)
class RejectionVerdict:
    score: float
    accepted: bool
    reason: RejectionReason

    def __post_init__(self) -> None:
        if self.accepted != (self.reason is RejectionReason.PASS):
            raise ValueError("accepted must hold exactly when the reason is Pass")

    @classmethod
    def from_reason(cls, reason: RejectionReason, score: float) -> "RejectionVerdict":
        return cls(score=score, accepted=reason is RejectionReason.PASS, reason=reason)


@dataclass(frozen=True)
class RejectionContext:
    """Everything reject_masks needs to judge a proposal list."""

    reference_features: FeatureMap
    target_features: FeatureMap
    reference_mask: BinaryMask
    params: MatchingParams
    seed: int = 0
    merged_mass: np.ndarray | None = None  # feature-grid mass map (merged-map variant)


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------

def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    """Normalize rows to unit L2 norm in float64; zero rows stay zero."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / np.where(norms == 0.0, 1.0, norms)


def _flat_cells(features: FeatureMap) -> np.ndarray:
    return np.asarray(features.data, dtype=np.float64).reshape(-1, features.depth)


# ---------------------------------------------------------------------------
# Prototypes and forward matching
# ---------------------------------------------------------------------------

def build_prototypes(
    ref_features: FeatureMap,
    ref_mask: BinaryMask,
    cap: int,
    rng: np.random.Generator | None = None,
) -> PrototypeSet:
    """Collect in-mask reference cell vectors, subsampling above the cap.

    The mask is nearest-neighbor resampled onto the feature grid.  Zero-norm
    cells are excluded; subsampling uses the provided generator (episode
    seed) and keeps row-major cell order.
    """
    grid_mask = resize_mask_nearest(ref_mask, ref_features.grid_shape)
    coords = np.argwhere(grid_mask.data)  # (n, 2) row-major (y, x)
    if coords.shape[0] == 0:
        raise EmptyMaskAfterDownsample(
            "reference mask is empty on the feature grid "
            f"({ref_mask.shape} -> {ref_features.grid_shape})"
        )
    vectors = np.asarray(ref_features.data, dtype=np.float64)[coords[:, 0], coords[:, 1]]
    norms = np.linalg.norm(vectors, axis=1)
    nonzero = norms > 0.0
    coords, vectors, norms = coords[nonzero], vectors[nonzero], norms[nonzero]
    if coords.shape[0] == 0:
        raise EmptyMaskAfterDownsample("every in-mask reference cell has a zero feature vector")
    if coords.shape[0] > cap:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(rng.choice(coords.shape[0], size=cap, replace=False))
        coords, vectors, norms = coords[keep], vectors[keep], norms[keep]
    unit = (vectors / norms[:, None]).astype(np.float32)
    return PrototypeSet(vectors=unit, source_cells=coords, max_count=cap)


def forward_match(
    protos: PrototypeSet, target_features: FeatureMap, temperature: float
) -> tuple[ScalarGrid, ProbabilityMap]:
    """Max-cosine similarity of each target cell against the prototype set.

    Returns the similarity grid (values in [-1, 1]) and its spatial softmax
    at the given temperature.  The softmax is computed from the stored
    float32 similarity values so equal similarities stay equal mass.
    """
    if target_features.depth != protos.depth:
        raise DepthMismatch(
            f"target depth {target_features.depth} != prototype depth {protos.depth}"
        )
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    cells = _unit_rows(_flat_cells(target_features))
    sims = cells @ np.asarray(protos.vectors, dtype=np.float64).T  # (HW, P)
    best = sims.max(axis=1).reshape(target_features.grid_shape)
    grid = ScalarGrid(np.clip(best, -1.0, 1.0))
    return grid, spatial_softmax(grid, temperature)


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

def top_k_cells(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean grid keeping the k largest cells; ties break row-major."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    out = np.zeros(flat.shape[0], dtype=bool)
    if k > 0:
        order = np.argsort(-flat, kind="stable")  # stable: ties keep row-major order
        out[order[: min(k, flat.shape[0])]] = True
    return out.reshape(np.asarray(values).shape)


def cluster_cells(
    retained: np.ndarray,
    scores: np.ndarray,
    link_radius: int,
    points_per_cluster: int,
) -> list[PointCluster]:
    """Group retained cells into Chebyshev-linked components and pick prompts.

    Two retained cells belong to the same cluster when their Chebyshev
    distance is at most ``link_radius``.  Each cluster contributes up to
    ``points_per_cluster`` prompts: the peak first, then the next-highest
    scores at pairwise Chebyshev distance >= 2.  Clusters come back ordered
    by peak score descending.
    """
    retained = np.asarray(retained, dtype=bool)
    height, width = retained.shape
    labels = np.full(retained.shape, -1, dtype=np.int64)
    offsets = [
        (dy, dx)
        for dy in range(-link_radius, link_radius + 1)
        for dx in range(-link_radius, link_radius + 1)
        if (dy, dx) != (0, 0)
    ]
    clusters: list[list[tuple[int, int]]] = []
    for y, x in np.argwhere(retained):
        if labels[y, x] != -1:
            continue
        label = len(clusters)
        component: list[tuple[int, int]] = []
        queue = deque([(int(y), int(x))])
        labels[y, x] = label
        while queue:
            cy, cx = queue.popleft()
            component.append((cy, cx))
            for dy, dx in offsets:
                ny, nx = cy + dy, cx + dx
                if 0 <= ny < height and 0 <= nx < width and retained[ny, nx] and labels[ny, nx] == -1:
                    labels[ny, nx] = label
                    queue.append((ny, nx))
        clusters.append(sorted(component))  # row-major member order

    built: list[PointCluster] = []
    for component in clusters:
        members = [PointPrompt(x=cx, y=cy, score=float(scores[cy, cx])) for cy, cx in component]
        ranked = sorted(members, key=lambda p: (-p.score, p.y, p.x))
        peak = ranked[0]
        prompts = [peak]
        for candidate in ranked[1:]:
            if len(prompts) >= points_per_cluster:
                break
            if all(max(abs(candidate.y - p.y), abs(candidate.x - p.x)) >= 2 for p in prompts):
                prompts.append(candidate)
        centroid = (
            float(np.mean([cy for cy, _ in component])),
            float(np.mean([cx for _, cx in component])),
        )
        built.append(PointCluster(members=members, centroid=centroid, peak=peak, prompt_points=prompts))
    built.sort(key=lambda c: (-c.peak.score, c.peak.y, c.peak.x))
    return built


def sample_and_cluster(
    sim: ScalarGrid,
    threshold: float,
    link_radius: int,
    points_per_cluster: int,
) -> list[PointCluster]:
    """Threshold the similarity grid and cluster what survives."""
    if not -1.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (-1, 1), got {threshold}")
    if link_radius < 1:
        raise ValueError(f"link radius must be >= 1, got {link_radius}")
    retained = np.asarray(sim.data, dtype=np.float64) >= threshold
    return cluster_cells(retained, sim.data, link_radius, points_per_cluster)


# ---------------------------------------------------------------------------
# Backward consistency and rejection
# ---------------------------------------------------------------------------

def backward_score(
    proposal: BinaryMask,
    target_features: FeatureMap,
    ref_features: FeatureMap,
    ref_mask: BinaryMask,
    cap: int,
    rng: np.random.Generator | None = None,
) -> float:
    """Fraction of in-proposal target cells whose nearest reference cell is in-mask.

    Up to ``cap`` in-proposal cells are sampled (seeded, row-major order
    preserved); nearest = max cosine over every reference cell, ties broken
    toward the lowest row-major index.
    """
    if target_features.depth != ref_features.depth:
        raise DepthMismatch(
            f"target depth {target_features.depth} != reference depth {ref_features.depth}"
        )
    grid_proposal = resize_mask_nearest(proposal, target_features.grid_shape)
    coords = np.argwhere(grid_proposal.data)
    if coords.shape[0] == 0:
        raise EmptyProposalAfterDownsample(
            f"proposal is empty on the feature grid ({proposal.shape} -> {target_features.grid_shape})"
        )
    if coords.shape[0] > cap:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(rng.choice(coords.shape[0], size=cap, replace=False))
        coords = coords[keep]
    cells = _unit_rows(
        np.asarray(target_features.data, dtype=np.float64)[coords[:, 0], coords[:, 1]]
    )
    ref_cells = _unit_rows(_flat_cells(ref_features))
    nearest = np.argmax(cells @ ref_cells.T, axis=1)  # first max = row-major tie-break
    in_mask = resize_mask_nearest(ref_mask, ref_features.grid_shape).data.ravel()
    return float(in_mask[nearest].mean())


def reject_masks(
    proposals: Sequence["MaskProposal"], context: RejectionContext
) -> list[tuple["MaskProposal", RejectionVerdict]]:
    """Attach a verdict to every proposal; never raises per-proposal.

    Size gates run first (pixel area against ``min_area`` and
    ``max_area_frac``), then the backward-consistency check against ``rho``.
    When the context carries a merged mass map, acceptance additionally
    requires the mean in-proposal mass to reach the grid mean.  Errors
    inside the backward check demote the proposal to BackwardInconsistent
    with score 0.  The same gates apply to every proposal regardless of the
    branch that produced it.
    """
    params = context.params
    out: list[tuple["MaskProposal", RejectionVerdict]] = []
    for index, prop in enumerate(proposals):
        area = prop.mask.area
        limit = params.max_area_frac * prop.mask.height * prop.mask.width
        if area < params.min_area:
            verdict = RejectionVerdict.from_reason(RejectionReason.TOO_SMALL, 0.0)
        elif area > limit:
            verdict = RejectionVerdict.from_reason(RejectionReason.TOO_LARGE, 0.0)
        else:
            try:
                score = backward_score(
                    prop.mask,
                    context.target_features,
                    context.reference_features,
                    context.reference_mask,
                    cap=params.proto_cap,
                    rng=np.random.default_rng((context.seed, 2, index)),
                )
            except FpssError as exc:
                logger.debug("backward check failed for proposal %d: %s", index, exc)
                verdict = RejectionVerdict.from_reason(RejectionReason.BACKWARD_INCONSISTENT, 0.0)
            else:
                if score < params.rho:
                    verdict = RejectionVerdict.from_reason(RejectionReason.BACKWARD_INCONSISTENT, score)
                elif context.merged_mass is not None and not _passes_mass_check(prop.mask, context):
                    verdict = RejectionVerdict.from_reason(RejectionReason.BACKWARD_INCONSISTENT, score)
                else:
                    verdict = RejectionVerdict.from_reason(RejectionReason.PASS, score)
        out.append((prop, verdict))
    return out


def _passes_mass_check(mask: BinaryMask, context: RejectionContext) -> bool:
    """Mean merged mass over in-proposal cells must reach the grid mean."""
    mass = np.asarray(context.merged_mass, dtype=np.float64)
    grid_mask = resize_mask_nearest(mask, (mass.shape[0], mass.shape[1]))
    cells = mass[grid_mask.data]
    if cells.size == 0:
        return False
    return bool(cells.mean() >= mass.mean())
