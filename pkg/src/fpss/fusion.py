"""Segmentation strategies built on matching, decoding, and rejection.

The visual-only pipeline runs five steps per episode: reference prototypes,
forward matching, point sampling and clustering, promptable decoding, and
backward-verified union.  The text-augmented strategies splice a
text-model mask or logit map into that pipeline at different points:

* appended text mask before rejection (the default fusion),
* probability-map merging (add the two maps, renormalize, resample),
* cluster merging (cluster the text map, decode its points too),
* hard selection between branches gated on reference-image IoU.

Every strategy is a pure function of (episode inputs, backend state, seed)
and returns the same result structure.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyMaskAfterDownsample,
    MissingReferenceTPMask,
)
from .matching import (
    MatchingParams,
    PointCluster,
    RejectionContext,
    RejectionReason,
    RejectionVerdict,
    build_prototypes,
    cluster_cells,
    forward_match,
    reject_masks,
    sample_and_cluster,
    top_k_cells,
)
from .proposal import (
    DecoderBackend,
    MaskProposal,
    TargetContext,
    decode_all,
    text_proposal,
)
from .tensor_core import (
    BinaryMask,
    FeatureMap,
    ProbabilityMap,
    ScalarGrid,
    mask_union,
    renormalize,
    resize_grid_nearest,
    spatial_softmax,
)

logger = logging.getLogger(__name__)


class StrategyKind(Enum):
    VISUAL_ONLY = "VisualOnly"
    PROMPT_MATCHER = "PromptMatcher"
    PROBABILITY_MERGING = "ProbabilityMerging"
    CLUSTER_MERGING = "ClusterMerging"
    SELECTION = "Selection"


class SelectionBranch(Enum):
    TEXT_PROMPT = "TextPrompt"
    VISUAL_PROMPT = "VisualPrompt"


@dataclass(frozen=True)
class FusionStrategy:
    """Which pipeline to run and with which thresholds."""

    kind: StrategyKind
    with_lisa_mask: bool = False
    params: MatchingParams = field(default_factory=MatchingParams)

    def resolve(self) -> "FusionStrategy":
        """Visual-only plus an appended text mask IS the default fusion."""
        if self.kind is StrategyKind.VISUAL_ONLY and self.with_lisa_mask:
            return replace(self, kind=StrategyKind.PROMPT_MATCHER)
        return self


@dataclass(frozen=True)
class EpisodeInputs:
    """Loaded arrays for one (target, class, reference) prediction."""

    reference_features: FeatureMap
    target_features: FeatureMap
    reference_mask: BinaryMask          # reference-image pixel space
    image_shape: tuple[int, int]        # target-image pixel dims
    seed: int = 0


@dataclass(frozen=True)
class EpisodeResult:
    final_mask: BinaryMask
    proposals: list[tuple[MaskProposal, RejectionVerdict]]
    branch_taken: SelectionBranch | None = None
    diagnostics: dict[str, int] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------

def _empty_result(episode: EpisodeInputs, note: str) -> EpisodeResult:
    logger.debug("episode degenerated to an empty mask: %s", note)
    return EpisodeResult(
        final_mask=BinaryMask.full(episode.image_shape, False),
        proposals=[],
        diagnostics={"empty_reference": 1},
    )


def _finish(
    episode: EpisodeInputs,
    params: MatchingParams,
    proposals: list[MaskProposal],
    n_clusters: int,
    merged_mass: np.ndarray | None = None,
    extra: dict[str, int] | None = None,
) -> EpisodeResult:
    """Rejection plus union; the tail every strategy shares."""
    context = RejectionContext(
        reference_features=episode.reference_features,
        target_features=episode.target_features,
        reference_mask=episode.reference_mask,
        params=params,
        seed=episode.seed,
        merged_mass=merged_mass,
    )
    judged = reject_masks(proposals, context)
    accepted = [prop.mask for prop, verdict in judged if verdict.accepted]
    final = mask_union(accepted, shape=episode.image_shape)
    counts = {reason: 0 for reason in RejectionReason}
    for _, verdict in judged:
        counts[verdict.reason] += 1
    diagnostics = {
        "clusters": n_clusters,
        "proposals": len(judged),
        "accepted": counts[RejectionReason.PASS],
        "rejected_backward": counts[RejectionReason.BACKWARD_INCONSISTENT],
        "rejected_small": counts[RejectionReason.TOO_SMALL],
        "rejected_large": counts[RejectionReason.TOO_LARGE],
    }
    if extra:
        diagnostics.update(extra)
    return EpisodeResult(final_mask=final, proposals=judged, diagnostics=diagnostics)


def _visual_clusters(
    episode: EpisodeInputs, params: MatchingParams
) -> tuple[list[PointCluster], ScalarGrid, ProbabilityMap]:
    protos = build_prototypes(
        episode.reference_features,
        episode.reference_mask,
        params.proto_cap,
        rng=np.random.default_rng((episode.seed, 1)),
    )
    sim, prob = forward_match(protos, episode.target_features, params.temperature)
    clusters = sample_and_cluster(sim, params.theta, params.link_radius, params.points_per_cluster)
    return clusters, sim, prob


def _target_context(episode: EpisodeInputs) -> TargetContext:
    return TargetContext(
        feature_shape=episode.target_features.grid_shape,
        image_shape=episode.image_shape,
    )


def _check_tp_mask(mask: BinaryMask, episode: EpisodeInputs, label: str) -> None:
    if mask.shape != episode.image_shape:
        raise DimensionMismatch(
            f"{label} is {mask.shape} but the target image is {episode.image_shape}"
        )


def _tp_probability(tp_logits: ScalarGrid, grid_shape: tuple[int, int]) -> ProbabilityMap:
    """Text-branch logits softmaxed on the feature grid (unit temperature)."""
    if tp_logits.data.shape != grid_shape:
        tp_logits = resize_grid_nearest(tp_logits, grid_shape)
    return spatial_softmax(tp_logits, temperature=1.0)


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

def run_visual_only(
    episode: EpisodeInputs, backend: DecoderBackend, params: MatchingParams
) -> EpisodeResult:
    """Reference-prompted pipeline with no text input."""
    return run_promptmatcher(episode, backend, tp_mask=None, params=params)


def run_promptmatcher(
    episode: EpisodeInputs,
    backend: DecoderBackend,
    tp_mask: BinaryMask | None,
    params: MatchingParams,
) -> EpisodeResult:
    """Visual pipeline with the text-branch mask appended before rejection.

    The appended mask faces the same verdicts as every decoded proposal, so
    a hallucinated text mask is rejected rather than unioned in.  With
    ``tp_mask=None`` this IS the visual-only strategy.
    """
    if tp_mask is not None:
        _check_tp_mask(tp_mask, episode, "text-branch mask")
    try:
        clusters, _, _ = _visual_clusters(episode, params)
    except EmptyMaskAfterDownsample as exc:
        return _empty_result(episode, str(exc))
    proposals = decode_all(backend, clusters, _target_context(episode))
    if tp_mask is not None:
        proposals.append(text_proposal(tp_mask))
    return _finish(episode, params, proposals, n_clusters=len(clusters))


def merge_probability_maps(p_vp: ProbabilityMap, p_tp: ProbabilityMap) -> ProbabilityMap:
    """Add the two distributions and renormalize (their elementwise mean)."""
    if p_vp.data.shape != p_tp.data.shape:
        raise DimensionMismatch(
            f"probability maps differ in shape: {p_vp.data.shape} vs {p_tp.data.shape}"
        )
    return renormalize(np.asarray(p_vp.data) + np.asarray(p_tp.data))


def run_probability_merging(
    episode: EpisodeInputs,
    backend: DecoderBackend,
    tp_logits: ScalarGrid,
    params: MatchingParams,
    with_lisa_mask: bool = False,
    tp_mask: BinaryMask | None = None,
) -> EpisodeResult:
    """Merge the two probability maps and sample clusters from the blend.

    Retention keeps as many cells of the merged map as the similarity
    threshold keeps on the visual map (mass rank replaces the cosine
    threshold, which has no meaning on a probability scale).  Acceptance
    additionally requires mean in-proposal merged mass at or above the grid
    mean.
    """
    if with_lisa_mask and tp_mask is None:
        raise ValueError("with_lisa_mask requires the text-branch mask")
    if tp_mask is not None:
        _check_tp_mask(tp_mask, episode, "text-branch mask")
    try:
        protos = build_prototypes(
            episode.reference_features,
            episode.reference_mask,
            params.proto_cap,
            rng=np.random.default_rng((episode.seed, 1)),
        )
    except EmptyMaskAfterDownsample as exc:
        return _empty_result(episode, str(exc))
    sim, p_vp = forward_match(protos, episode.target_features, params.temperature)
    p_tp = _tp_probability(tp_logits, episode.target_features.grid_shape)
    merged = merge_probability_maps(p_vp, p_tp)
    mass = np.asarray(merged.data)
    keep = int(np.count_nonzero(np.asarray(sim.data, dtype=np.float64) >= params.theta))
    retained = top_k_cells(mass, keep)
    clusters = cluster_cells(retained, mass, params.link_radius, params.points_per_cluster)
    proposals = decode_all(backend, clusters, _target_context(episode))
    if with_lisa_mask and tp_mask is not None:
        proposals.append(text_proposal(tp_mask))
    return _finish(
        episode, params, proposals, n_clusters=len(clusters), merged_mass=mass
    )


def run_cluster_merging(
    episode: EpisodeInputs,
    backend: DecoderBackend,
    tp_logits: ScalarGrid,
    params: MatchingParams,
    with_lisa_mask: bool = False,
    tp_mask: BinaryMask | None = None,
) -> EpisodeResult:
    """Cluster the text map separately and decode its points as well.

    Text-map retention keeps cells strictly above the map's mean mass so a
    flat map contributes nothing, capped at the visual retention count (at
    least one) so a diffuse text map cannot flood the decoder.  Text-derived
    proposals are appended after the visual ones and face the same verdicts.
    """
    if with_lisa_mask and tp_mask is None:
        raise ValueError("with_lisa_mask requires the text-branch mask")
    if tp_mask is not None:
        _check_tp_mask(tp_mask, episode, "text-branch mask")
    try:
        clusters, sim, _ = _visual_clusters(episode, params)
    except EmptyMaskAfterDownsample as exc:
        return _empty_result(episode, str(exc))
    p_tp = _tp_probability(tp_logits, episode.target_features.grid_shape)
    tp_mass = np.asarray(p_tp.data)
    mean = float(tp_mass.mean())
    # relative guard: a numerically flat map must stay flat under summation noise
    above = tp_mass > mean * (1.0 + 1e-9)
    keep_vp = int(np.count_nonzero(np.asarray(sim.data, dtype=np.float64) >= params.theta))
    cap = max(keep_vp, 1)
    if int(above.sum()) > cap:
        above = top_k_cells(np.where(above, tp_mass, -np.inf), cap)
    tp_clusters = cluster_cells(above, tp_mass, params.link_radius, params.points_per_cluster)
    proposals = decode_all(backend, clusters + tp_clusters, _target_context(episode))
    if with_lisa_mask and tp_mask is not None:
        proposals.append(text_proposal(tp_mask))
    return _finish(
        episode,
        params,
        proposals,
        n_clusters=len(clusters) + len(tp_clusters),
        extra={"text_point_clusters": len(tp_clusters)},
    )


def run_selection(
    episode: EpisodeInputs,
    backend: DecoderBackend,
    tp_mask_target: BinaryMask,
    tp_mask_reference: BinaryMask | None,
    params: MatchingParams,
    with_lisa_mask: bool = False,
) -> EpisodeResult:
    """Pick one branch outright, gated on the reference-image text mask.

    The text mask for the reference image is scored against the reference
    ground truth; a strictly greater IoU than the threshold selects the
    target text mask verbatim, anything else falls back to the visual
    branch (text-augmented when ``with_lisa_mask``).  The verdict recorded
    for a selected text mask carries the gate IoU as its score.
    """
    if tp_mask_reference is None:
        raise MissingReferenceTPMask(
            "selection needs the text-branch mask for the reference image"
        )
    _check_tp_mask(tp_mask_target, episode, "text-branch target mask")
    if tp_mask_reference.shape != episode.reference_mask.shape:
        raise DimensionMismatch(
            f"reference text mask is {tp_mask_reference.shape} but the reference "
            f"ground truth is {episode.reference_mask.shape}"
        )
    inter = int(np.count_nonzero(tp_mask_reference.data & episode.reference_mask.data))
    union = int(np.count_nonzero(tp_mask_reference.data | episode.reference_mask.data))
    gate = 1.0 if union == 0 else inter / union
    if gate > params.selection_iou_threshold:
        chosen = text_proposal(tp_mask_target)
        verdict = RejectionVerdict.from_reason(RejectionReason.PASS, gate)
        return EpisodeResult(
            final_mask=tp_mask_target,
            proposals=[(chosen, verdict)],
            branch_taken=SelectionBranch.TEXT_PROMPT,
            diagnostics={"gate_open": 1},
        )
    if with_lisa_mask:
        result = run_promptmatcher(episode, backend, tp_mask_target, params)
    else:
        result = run_visual_only(episode, backend, params)
    return replace(result, branch_taken=SelectionBranch.VISUAL_PROMPT)


def run_episode(
    strategy: FusionStrategy,
    episode: EpisodeInputs,
    backend: DecoderBackend,
    tp_mask: BinaryMask | None = None,
    tp_mask_reference: BinaryMask | None = None,
    tp_logits: ScalarGrid | None = None,
) -> EpisodeResult:
    """Dispatch one episode to the configured strategy.

    Callers supply whichever text-branch artifacts the strategy consumes;
    a strategy that needs an absent artifact raises ValueError.
    """
    resolved = strategy.resolve()
    params = resolved.params
    kind = resolved.kind
    if kind is StrategyKind.VISUAL_ONLY:
        return run_visual_only(episode, backend, params)
    if kind is StrategyKind.PROMPT_MATCHER:
        if tp_mask is None:
            raise ValueError("the default fusion strategy needs the text-branch mask")
        return run_promptmatcher(episode, backend, tp_mask, params)
    if kind is StrategyKind.PROBABILITY_MERGING:
        if tp_logits is None:
            raise ValueError("probability merging needs the text-branch logits")
        return run_probability_merging(
            episode, backend, tp_logits, params,
            with_lisa_mask=resolved.with_lisa_mask, tp_mask=tp_mask,
        )
    if kind is StrategyKind.CLUSTER_MERGING:
        if tp_logits is None:
            raise ValueError("cluster merging needs the text-branch logits")
        return run_cluster_merging(
            episode, backend, tp_logits, params,
            with_lisa_mask=resolved.with_lisa_mask, tp_mask=tp_mask,
        )
    if tp_mask is None:
        raise ValueError("selection needs the text-branch target mask")
    return run_selection(
        episode, backend, tp_mask, tp_mask_reference, params,
        with_lisa_mask=resolved.with_lisa_mask,
    )
