"""Detection scoring: FROC curves, CPM, strata, t-SNE export, rater stats.

Matching is greedy in descending score order, so a detection's TP/FP
status depends only on higher-scored detections; one matching pass
yields the correct counts for every threshold in the sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ATTENUATION_CLASSES, SIZE_CLASSES, NoduleAnnotation
from .errors import InvalidArgumentError
from .volume import Box3, iou

DEFAULT_MATCH_IOU = 0.25
CPM_FP_RATES = (1 / 8, 1 / 4, 1 / 2, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class Detection:
    scan_id: str
    box: Box3
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InvalidArgumentError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class FrocCurve:
    """(fp_per_scan, sensitivity) per distinct threshold, threshold descending."""

    points: tuple[tuple[float, float], ...]
    thresholds: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(f), float(s)) for f, s in self.points))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        last_fp, last_sens = -1.0, -1.0
        for fp, sens in self.points:
            if fp < last_fp - 1e-12 or sens < last_sens - 1e-12:
                raise InvalidArgumentError("FROC points must be monotone along the sweep")
            last_fp, last_sens = max(last_fp, fp), max(last_sens, sens)
            if not 0.0 <= sens <= 1.0 or fp < 0:
                raise InvalidArgumentError(f"invalid FROC point ({fp}, {sens})")


@dataclass(frozen=True)
class CpmReport:
    cpm: float
    per_rate: dict[float, float] = field(default_factory=dict)
    strata: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "cpm": self.cpm,
            "per_rate": {str(rate): sens for rate, sens in sorted(self.per_rate.items())},
            "by_size": self.strata.get("size", {}),
            "by_attenuation": self.strata.get("attenuation", {}),
        }


def _sorted_dets(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)  # stable: ties keep input order


def match_detections(dets: list[Detection], gts: list[Box3 | NoduleAnnotation],
                     iou_threshold: float = DEFAULT_MATCH_IOU
                     ) -> tuple[list[bool], list[int], list[bool]]:
    """Greedy one-to-one matching on a single scan.

    Returns (per-detection TP flags, per-detection matched GT index or -1,
    per-GT hit flags), with detections processed in descending score order
    but flags reported in the input order.
    """
    gt_boxes = [g.box if isinstance(g, NoduleAnnotation) else g for g in gts]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    is_tp = [False] * len(dets)
    matched_gt = [-1] * len(dets)
    gt_hit = [False] * len(gt_boxes)
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gt_boxes):
            if gt_hit[j]:
                continue
            v = iou(dets[i].box, gt)
            if v >= iou_threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            gt_hit[best_j] = True
            is_tp[i] = True
            matched_gt[i] = best_j
    return is_tp, matched_gt, gt_hit


def froc(dets_by_scan: dict[str, list[Detection]],
         gts_by_scan: dict[str, list[Box3 | NoduleAnnotation]],
         iou_threshold: float = DEFAULT_MATCH_IOU) -> FrocCurve:
    """Sweep all distinct scores; one curve point per threshold.

    The scan set is gts_by_scan's key set; detections for unknown scans are
    rejected, and the total GT count must be positive.
    """
    n_scans = len(gts_by_scan)
    total_gts = sum(len(g) for g in gts_by_scan.values())
    if n_scans == 0 or total_gts == 0:
        raise InvalidArgumentError("FROC needs at least one scan and one ground-truth nodule")
    unknown = set(dets_by_scan) - set(gts_by_scan)
    if unknown:
        raise InvalidArgumentError(f"detections reference scans outside the evaluation set: {sorted(unknown)}")

    statuses: list[tuple[float, bool]] = []  # (score, is_tp) across scans
    for scan_id, gts in gts_by_scan.items():
        dets = dets_by_scan.get(scan_id, [])
        is_tp, _, _ = match_detections(dets, gts, iou_threshold)
        statuses.extend((d.score, tp) for d, tp in zip(dets, is_tp))

    statuses.sort(key=lambda t: -t[0])
    points: list[tuple[float, float]] = []
    thresholds: list[float] = []
    tp = fp = 0
    i = 0
    while i < len(statuses):
        threshold = statuses[i][0]
        while i < len(statuses) and statuses[i][0] == threshold:
            if statuses[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        thresholds.append(threshold)
        points.append((fp / n_scans, tp / total_gts))
    if not points:
        points = [(0.0, 0.0)]
        thresholds = [float("inf")]
    return FrocCurve(points=tuple(points), thresholds=tuple(thresholds))


def cpm(curve: FrocCurve, rates: tuple[float, ...] = CPM_FP_RATES) -> CpmReport:
    """Average sensitivity at the target FP rates under step interpolation:
    at each rate, the best sensitivity among points with fp_per_scan <= rate."""
    per_rate: dict[float, float] = {}
    for rate in rates:
        best = 0.0
        for fp, sens in curve.points:
            if fp <= rate and sens > best:
                best = sens
        per_rate[rate] = best
    return CpmReport(cpm=sum(per_rate.values()) / len(rates), per_rate=per_rate)


def stratified_cpm(dets_by_scan: dict[str, list[Detection]],
                   gts_by_scan: dict[str, list[NoduleAnnotation]],
                   iou_threshold: float = DEFAULT_MATCH_IOU) -> CpmReport:
    """Overall CPM plus per-size and per-attenuation strata.

    A stratum's sensitivity counts only its own ground truths, while false
    positives stay global (a detector cannot know a stratum). Strata with
    no ground truths are absent from the report, not zero.
    """
    n_scans = len(gts_by_scan)
    total_gts = sum(len(g) for g in gts_by_scan.values())
    if n_scans == 0 or total_gts == 0:
        raise InvalidArgumentError("stratified CPM needs at least one scan and one nodule")

    # one matching pass; every event carries its stratum labels
    fp_scores: list[float] = []
    hits: list[tuple[float, str, str]] = []  # (score, size, attenuation)
    counts: dict[tuple[str, str], int] = {}
    for scan_id, gts in gts_by_scan.items():
        for g in gts:
            key = (g.size_class, g.attenuation_class)
            counts[key] = counts.get(key, 0) + 1
        dets = dets_by_scan.get(scan_id, [])
        is_tp, matched, _ = match_detections(dets, gts, iou_threshold)
        for d, tp, j in zip(dets, is_tp, matched):
            if tp:
                hits.append((d.score, gts[j].size_class, gts[j].attenuation_class))
            else:
                fp_scores.append(d.score)

    def curve_for(select) -> FrocCurve | None:
        n_sel = sum(c for key, c in counts.items() if select(key))
        if n_sel == 0:
            return None
        events = [(s, True) for s, sz, at in hits if select((sz, at))] + \
                 [(s, False) for s in fp_scores]
        events.sort(key=lambda t: -t[0])
        pts, tp, fp = [], 0, 0
        i = 0
        while i < len(events):
            thr = events[i][0]
            while i < len(events) and events[i][0] == thr:
                tp += events[i][1]
                fp += not events[i][1]
                i += 1
            pts.append((fp / n_scans, tp / n_sel))
        if not pts:
            pts = [(0.0, 0.0)]
        return FrocCurve(points=tuple(pts))

    overall = cpm(curve_for(lambda key: True))
    strata: dict[str, dict[str, float]] = {"size": {}, "attenuation": {}}
    for size in SIZE_CLASSES:
        c = curve_for(lambda key, s=size: key[0] == s)
        if c is not None:
            strata["size"][size] = cpm(c).cpm
    for att in ATTENUATION_CLASSES:
        c = curve_for(lambda key, a=att: key[1] == a)
        if c is not None:
            strata["attenuation"][att] = cpm(c).cpm
    return CpmReport(cpm=overall.cpm, per_rate=overall.per_rate, strata=strata)


def tsne_embed(images: list[np.ndarray] | np.ndarray,
               perplexity: float = 100.0,
               iterations: int = 1000,
               seed: int = 0,
               categories: list[str] | None = None) -> np.ndarray:
    """2D embedding of flattened cubes, normalized to [0, 1] collectively.

    Deterministic given the seed (PCA init, exact gradients below 2000
    samples, Barnes-Hut above). Returns an (n, 2) array aligned with the
    input order; categories are only validated here and travel with the
    scatter in the CSV writer.
    """
    from sklearn.manifold import TSNE

    stack = np.stack([np.asarray(im, dtype=np.float64).reshape(-1) for im in images])
    n = stack.shape[0]
    if perplexity >= n:
        raise InvalidArgumentError(f"perplexity {perplexity} must be < number of images {n}")
    if categories is not None and len(categories) != n:
        raise InvalidArgumentError(f"{len(categories)} categories for {n} images")
    lo, hi = stack.min(), stack.max()
    if hi > lo:
        stack = (stack - lo) / (hi - lo)
    else:
        stack = np.zeros_like(stack)
    method = "exact" if n <= 2000 else "barnes_hut"
    tsne = TSNE(n_components=2, perplexity=perplexity, max_iter=max(iterations, 250),
                random_state=seed, init="pca", method=method)
    return tsne.fit_transform(stack)


def write_tsne_csv(path, points: np.ndarray, categories: list[str]) -> None:
    lines = ["x,y,category"]
    for (x, y), cat in zip(points, categories):
        lines.append(f"{x:.6f},{y:.6f},{cat}")
    path.write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class VttResponse:
    session_id: str
    test_id: int
    item_id: str
    truth: str
    answer: str
    timestamp: float = 0.0

    def __post_init__(self):
        if self.test_id not in (1, 2, 3, 4):
            raise InvalidArgumentError(f"test_id must be 1..4, got {self.test_id}")
        for fieldname, value in (("truth", self.truth), ("answer", self.answer)):
            if value not in ("real", "synthetic"):
                raise InvalidArgumentError(f"{fieldname} must be real|synthetic, got {value!r}")


@dataclass(frozen=True)
class VttSessionStats:
    test_id: int
    rater: str
    real_as_real: int
    real_as_synt: int
    synt_as_real: int
    synt_as_synt: int

    @property
    def total(self) -> int:
        return self.real_as_real + self.real_as_synt + self.synt_as_real + self.synt_as_synt

    @property
    def accuracy(self) -> float:
        return (self.real_as_real + self.synt_as_synt) / self.total if self.total else 0.0

    def to_json(self) -> dict:
        return {
            "test_id": self.test_id,
            "rater": self.rater,
            "accuracy": self.accuracy,
            "real_as_real": self.real_as_real,
            "real_as_synt": self.real_as_synt,
            "synt_as_real": self.synt_as_real,
            "synt_as_synt": self.synt_as_synt,
        }


def vtt_statistics(responses: list[VttResponse],
                   expected_items: int = 100,
                   raters: dict[str, str] | None = None
                   ) -> tuple[list[VttSessionStats], list[str]]:
    """Confusion counts and accuracy per completed session.

    A session is complete when it holds expected_items distinct answered
    items; incomplete or duplicated sessions are excluded and returned as
    flagged ids. raters maps session_id -> rater label for the table rows.
    """
    by_session: dict[str, list[VttResponse]] = {}
    for r in responses:
        by_session.setdefault(r.session_id, []).append(r)

    rows: list[VttSessionStats] = []
    flagged: list[str] = []
    for session_id in sorted(by_session):
        rs = by_session[session_id]
        items = {r.item_id for r in rs}
        if len(rs) != expected_items or len(items) != expected_items:
            flagged.append(session_id)
            continue
        test_ids = {r.test_id for r in rs}
        if len(test_ids) != 1:
            flagged.append(session_id)
            continue
        cells = {("real", "real"): 0, ("real", "synthetic"): 0,
                 ("synthetic", "real"): 0, ("synthetic", "synthetic"): 0}
        for r in rs:
            cells[(r.truth, r.answer)] += 1
        rows.append(VttSessionStats(
            test_id=test_ids.pop(),
            rater=(raters or {}).get(session_id, session_id),
            real_as_real=cells[("real", "real")],
            real_as_synt=cells[("real", "synthetic")],
            synt_as_real=cells[("synthetic", "real")],
            synt_as_synt=cells[("synthetic", "synthetic")],
        ))
    rows.sort(key=lambda s: (s.test_id, s.rater))
    return rows, flagged
