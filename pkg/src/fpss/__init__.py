"""Training-free prompt-fusion semantic segmentation over file-backed model outputs.

The engine never runs a neural network.  Backbone features, text-branch
masks and logits, and decoder candidate masks all arrive as files in a
small binary tensor format; everything downstream — prototype matching,
point clustering, promptable decoding, backward verification, fusion, and
benchmark aggregation — is deterministic numpy.
"""
from .errors import FpssError
from .evaluation import (
    AggregateReport,
    IoURecord,
    aggregate,
    class_diff_ranking,
    dataset_miou,
    format_report_table,
    iou,
    iou_counts,
    oracle_ensemble,
    oracle_ensemble_plus,
    read_records,
    sort_records,
    write_records,
)
from .fusion import (
    EpisodeInputs,
    EpisodeResult,
    FusionStrategy,
    SelectionBranch,
    StrategyKind,
    merge_probability_maps,
    run_cluster_merging,
    run_episode,
    run_probability_merging,
    run_promptmatcher,
    run_selection,
    run_visual_only,
)
from .ingest import (
    DOMAINS,
    DatasetManifest,
    ImageEntry,
    PromptEpisode,
    derive_seed,
    eligible_references,
    load_manifest,
    sample_episode,
    template_text_prompt,
)
from .matching import (
    MatchingParams,
    PointCluster,
    PrototypeSet,
    RejectionContext,
    RejectionReason,
    RejectionVerdict,
    backward_score,
    build_prototypes,
    forward_match,
    reject_masks,
    sample_and_cluster,
)
from .proposal import (
    DecoderKind,
    MaskProposal,
    ProposalBankBackend,
    ProposalSource,
    RegionOracleBackend,
    TargetContext,
    decode,
    decode_all,
    text_proposal,
)
from .tensor_core import (
    BinaryMask,
    FeatureMap,
    MaskStack,
    PointPrompt,
    ProbabilityMap,
    ScalarGrid,
    load_mask,
    mask_union,
    normalize_l2,
    read_label_grid,
    read_mask_pgm,
    read_tensor,
    renormalize,
    spatial_softmax,
    write_label_grid,
    write_mask_pgm,
    write_tensor,
)

__version__ = "0.1.0"
