"""
One episode, every fusion strategy
==================================

A synthetic episode bundles a reference image with ground truth, a target
image containing the same object plus a 0.7-cosine distractor, and two
text-branch masks: the true object and a hallucinated blob.  This script
runs all five strategies on one episode and shows what each accepted,
what each rejected, and why the distractor never survives.
"""
import numpy as np

from fpss.evaluation import iou
from fpss.fusion import (
    run_cluster_merging,
    run_probability_merging,
    run_promptmatcher,
    run_selection,
    run_visual_only,
)
from fpss.matching import MatchingParams
from fpss.synthetic import logits_from_mask, make_episode

params = MatchingParams()
ep = make_episode(seed=3)

print(f"episode: image {ep.inputs.image_shape}, object {ep.gt_mask.area}px, "
      f"distractor {ep.distractor_mask.area}px\n")


def report(name, result):
    accepted = sum(v.accepted for _, v in result.proposals)
    reasons = sorted({v.reason.value for _, v in result.proposals if not v.accepted})
    line = (f"{name:22s} IoU {iou(result.final_mask, ep.gt_mask):.3f}  "
            f"{accepted}/{len(result.proposals)} proposals accepted")
    if reasons:
        line += f"  rejected: {', '.join(reasons)}"
    if result.branch_taken is not None:
        line += f"  branch: {result.branch_taken.value}"
    print(line)


# 1. Visual only: reference prompts, no text.  The distractor clusters
#    (cosine 0.7 > theta 0.55) but its proposal fails the backward check:
#    its nearest reference cells sit outside the reference mask.
report("visual-only", run_visual_only(ep.inputs, ep.backend, params))

# 2. Text mask appended as one more proposal before rejection.  A perfect
#    mask is accepted; a hallucinated one faces the same verdicts and dies.
report("promptmatcher (GT tp)", run_promptmatcher(ep.inputs, ep.backend, ep.tp_mask_gt, params))
report("promptmatcher (hall.)",
       run_promptmatcher(ep.inputs, ep.backend, ep.tp_mask_hallucinated, params))

# 3. Probability merging: blend the visual softmax with a text
#    probability map and re-sample clusters from the blend.
tp_logits = logits_from_mask(ep.tp_mask_gt)
report("probability-merge", run_probability_merging(ep.inputs, ep.backend, tp_logits, params))

# 4. Cluster merging: text clusters are added next to visual ones,
#    capped at the visual cluster count.
report("cluster-merge", run_cluster_merging(ep.inputs, ep.backend, tp_logits, params))

# 5. Selection: trust the text branch outright only when its mask on the
#    reference image clears IoU > 0.20 against the reference annotation.
report("selection (good ref)",
       run_selection(ep.inputs, ep.backend, ep.tp_mask_gt, ep.inputs.reference_mask, params))
empty_ref = type(ep.inputs.reference_mask)(np.zeros(ep.inputs.reference_mask.shape, dtype=bool))
report("selection (bad ref)",
       run_selection(ep.inputs, ep.backend, ep.tp_mask_gt, empty_ref, params))
