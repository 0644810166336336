"""CLEAR-MOT and identity metrics (MOTA, MOTP, IDF1, MT, ML, FP, FN, IDS)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .assignment import solve_with_threshold, solve_min_cost
from .core import BoundingBox, iou

IOU_THRESHOLD = 0.5
MOSTLY_TRACKED = 0.8
MOSTLY_LOST = 0.2


@dataclass
class FrameBoxes:
    """All (identity, box) pairs of one frame, used for ground truth and hypotheses alike."""

    frame: int
    objects: list = field(default_factory=list)

    def __post_init__(self):
        ids = [i for i, _ in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate identity in frame {self.frame}")


GroundTruthFrame = FrameBoxes


@dataclass
class FrameMatch:
    matches: list  # (gt_id, hyp_id, iou)
    fp: list  # unmatched hypothesis ids
    fn: list  # unmatched gt ids


@dataclass
class EvalResult:
    idf1: float
    mota: float
    motp: float
    mt: float
    ml: float
    fp: int
    fn: int
    ids: int
    num_gt: int = 0
    num_hyp: int = 0
    idtp: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def match_frame(gt: FrameBoxes, hyp: FrameBoxes, prev_matches: dict | None = None) -> FrameMatch:
    """Match one frame, keeping previous gt->hyp correspondences that still overlap."""
    if gt.frame != hyp.frame:
        raise ValueError(f"frame mismatch: gt {gt.frame} vs hyp {hyp.frame}")
    prev_matches = prev_matches or {}
    gt_boxes = dict(gt.objects)
    hyp_boxes = dict(hyp.objects)
    matches = []
    for g, h in prev_matches.items():
        if g in gt_boxes and h in hyp_boxes:
            o = iou(gt_boxes[g], hyp_boxes[h])
            if o >= IOU_THRESHOLD:
                matches.append((g, h, o))
    used_g = {m[0] for m in matches}
    used_h = {m[1] for m in matches}
    rest_g = [g for g, _ in gt.objects if g not in used_g]
    rest_h = [h for h, _ in hyp.objects if h not in used_h]
    if rest_g and rest_h:
        cost = np.clip(np.array([[1.0 - iou(gt_boxes[g], hyp_boxes[h]) for h in rest_h]
                                 for g in rest_g]), 0.0, 1.0)
        res = solve_with_threshold(cost, 1.0 - IOU_THRESHOLD)
        for r, c in res.matches:
            matches.append((rest_g[r], rest_h[c], 1.0 - cost[r, c]))
    used_g = {m[0] for m in matches}
    used_h = {m[1] for m in matches}
    return FrameMatch(
        matches=matches,
        fp=[h for h, _ in hyp.objects if h not in used_h],
        fn=[g for g, _ in gt.objects if g not in used_g],
    )


def _align(gt_seq, hyp_seq):
    gt = {f.frame: f for f in gt_seq}
    hyp = {f.frame: f for f in hyp_seq}
    for frame in sorted(set(gt) | set(hyp)):
        yield gt.get(frame, FrameBoxes(frame)), hyp.get(frame, FrameBoxes(frame))


def clear_mot(gt_seq, hyp_seq) -> EvalResult:
    """CLEAR-MOT counts; the ``idf1`` field is left at 0 (see :func:`evaluate`)."""
    fp = fn = ids = num_gt = num_hyp = 0
    iou_sum = 0.0
    n_matches = 0
    mapping: dict = {}
    present: dict = {}
    covered: dict = {}
    for gt, hyp in _align(gt_seq, hyp_seq):
        fm = match_frame(gt, hyp, mapping)
        num_gt += len(gt.objects)
        num_hyp += len(hyp.objects)
        fp += len(fm.fp)
        fn += len(fm.fn)
        for g, _ in gt.objects:
            present[g] = present.get(g, 0) + 1
        for g, h, o in fm.matches:
            if g in mapping and mapping[g] != h:
                ids += 1
            mapping[g] = h
            covered[g] = covered.get(g, 0) + 1
            iou_sum += o
            n_matches += 1
    if num_gt == 0:
        raise ValueError("MOTA is undefined without ground-truth boxes")
    ratios = [covered.get(g, 0) / n for g, n in present.items()]
    return EvalResult(
        idf1=0.0,
        mota=1.0 - (fp + fn + ids) / num_gt,
        motp=iou_sum / n_matches if n_matches else 0.0,
        mt=sum(r >= MOSTLY_TRACKED for r in ratios) / len(ratios),
        ml=sum(r <= MOSTLY_LOST for r in ratios) / len(ratios),
        fp=fp, fn=fn, ids=ids, num_gt=num_gt, num_hyp=num_hyp,
    )


def _identity_true_positives(gt_seq, hyp_seq):
    gt_ids: dict = {}
    hyp_ids: dict = {}
    overlap: dict = {}
    num_gt = num_hyp = 0
    for gt, hyp in _align(gt_seq, hyp_seq):
        num_gt += len(gt.objects)
        num_hyp += len(hyp.objects)
        for g, gb in gt.objects:
            gt_ids.setdefault(g, len(gt_ids))
            for h, hb in hyp.objects:
                hyp_ids.setdefault(h, len(hyp_ids))
                if iou(gb, hb) >= IOU_THRESHOLD:
                    overlap[g, h] = overlap.get((g, h), 0) + 1
        for h, _ in hyp.objects:
            hyp_ids.setdefault(h, len(hyp_ids))
    if num_gt == 0:
        raise ValueError("IDF1 is undefined without ground-truth boxes")
    if not overlap:
        return 0, num_gt, num_hyp
    counts = np.zeros((len(gt_ids), len(hyp_ids)))
    for (g, h), n in overlap.items():
        counts[gt_ids[g], hyp_ids[h]] = n
    # Maximizing the matched overlap == minimizing (max - overlap) over full assignments.
    res = solve_min_cost(counts.max() - counts)
    idtp = int(sum(counts[r, c] for r, c in res.matches))
    return idtp, num_gt, num_hyp


def idf1(gt_seq, hyp_seq) -> float:
    idtp, num_gt, num_hyp = _identity_true_positives(gt_seq, hyp_seq)
    return 2.0 * idtp / (num_gt + num_hyp)


def evaluate(gt_seq, hyp_seq) -> EvalResult:
    gt_seq = list(gt_seq)
    hyp_seq = list(hyp_seq)
    res = clear_mot(gt_seq, hyp_seq)
    idtp, num_gt, num_hyp = _identity_true_positives(gt_seq, hyp_seq)
    res.idtp = idtp
    res.idf1 = 2.0 * idtp / (num_gt + num_hyp)
    return res


def frames_from_tracks(track_output) -> list[FrameBoxes]:
    """Convert ``{frame: [(id, box), ...]}`` into a frame list."""
    return [FrameBoxes(f, list(objs)) for f, objs in sorted(track_output.items())]


__all__ = ["BoundingBox", "EvalResult", "FrameBoxes", "FrameMatch", "GroundTruthFrame",
           "clear_mot", "evaluate", "frames_from_tracks", "idf1", "match_frame"]
