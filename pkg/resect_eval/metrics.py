"""
Validation metrics

Voxel-wise overlap (Dice, Jaccard), patient-wise detection status and
confusion metrics, fold-pooled statistics, and inter-rater consensus.

Undefined values are ``None``, never 0: Dice of two empty masks, a ratio
with a zero denominator, a statistic over an empty group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, cast

import numpy as np

from .errors import InvalidArgumentError
from .grid import BinaryMask, require_same_geometry
from .postprocess import DEFAULT_CUTOFF_ML

TP = 'TP'
TN = 'TN'
FP = 'FP'
FN = 'FN'
STATUSES = (TP, TN, FP, FN)

DETECTION_LOOSE = 'detection-loose'
DETECTION_VOLUME = 'detection-volume'
DETECTION_RULES = (DETECTION_LOOSE, DETECTION_VOLUME)
DEFAULT_DICE_FLOOR = 0.01


def _overlap_counts(gt: BinaryMask, pred: BinaryMask) -> Tuple[int, int, int]:
    require_same_geometry(gt, pred)
    a = gt.as_bool()
    b = pred.as_bool()
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a)), int(np.count_nonzero(b))


def dice(gt: BinaryMask, pred: BinaryMask) -> Optional[float]:
    """2|A∩B| / (|A| + |B|); None when both masks are empty"""
    intersection, n_gt, n_pred = _overlap_counts(gt, pred)
    if n_gt + n_pred == 0:
        return None
    return 2.0 * intersection / (n_gt + n_pred)


def jaccard(gt: BinaryMask, pred: BinaryMask) -> Optional[float]:
    """|A∩B| / |A∪B|; None when both masks are empty"""
    intersection, n_gt, n_pred = _overlap_counts(gt, pred)
    union = n_gt + n_pred - intersection
    if union == 0:
        return None
    return intersection / union


def jaccard_from_dice(d: Optional[float]) -> Optional[float]:
    if d is None:
        return None
    if not 0.0 <= d <= 1.0:
        raise InvalidArgumentError(f"Dice must be in [0, 1], got {d}")
    return d / (2.0 - d)


@dataclass(frozen=True)
class DetectionStatus:
    status: str
    gt_volume_ml: float
    pred_volume_ml: float
    dice: Optional[float]


def patient_detection_status(
    gt_volume_ml: float,
    pred_volume_ml: float,
    dice_score: Optional[float],
    cutoff_ml: float = DEFAULT_CUTOFF_ML,
    dice_floor: float = DEFAULT_DICE_FLOOR,
    rule: str = DETECTION_LOOSE,
) -> DetectionStatus:
    """
    Patient-wise TP/TN/FP/FN from residual volumes (and overlap)

    With ``detection-loose`` a patient is TP only if both volumes reach the
    cutoff and the Dice reaches ``dice_floor``; otherwise a positive ground
    truth is FN. ``detection-volume`` ignores the Dice.
    """
    if gt_volume_ml < 0 or pred_volume_ml < 0:
        raise InvalidArgumentError('Volumes must be >= 0')
    if rule not in DETECTION_RULES:
        raise InvalidArgumentError(f"Unknown detection rule '{rule}'. Must be one of: {list(DETECTION_RULES)}")

    gt_positive = gt_volume_ml >= cutoff_ml
    pred_positive = pred_volume_ml >= cutoff_ml
    if not gt_positive:
        status = FP if pred_positive else TN
    elif not pred_positive:
        status = FN
    elif rule == DETECTION_LOOSE and (dice_score is None or dice_score < dice_floor):
        status = FN
    else:
        status = TP
    return DetectionStatus(status, float(gt_volume_ml), float(pred_volume_ml), dice_score)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise InvalidArgumentError('Confusion counts must be non-negative')

    @classmethod
    def from_statuses(cls, statuses: Iterable[DetectionStatus]) -> 'ConfusionCounts':
        tally = {s: 0 for s in STATUSES}
        for item in statuses:
            tally[item.status] += 1
        return cls(tally[TP], tally[TN], tally[FP], tally[FN])

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: 'ConfusionCounts') -> 'ConfusionCounts':
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


def _ratio(numerator: float, denominator: float) -> Optional[float]:
    if denominator == 0:
        return None
    return numerator / denominator


def f1_score(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    """Harmonic mean of precision and recall"""
    if precision is None or recall is None:
        return None
    return _ratio(2.0 * precision * recall, precision + recall)


def balanced_accuracy(sensitivity: Optional[float], specificity: Optional[float]) -> Optional[float]:
    if sensitivity is None or specificity is None:
        return None
    return (sensitivity + specificity) / 2.0


@dataclass(frozen=True)
class DetectionMetrics:
    recall: Optional[float]
    precision: Optional[float]
    specificity: Optional[float]
    f1: Optional[float]
    balanced_accuracy: Optional[float]

    @property
    def sensitivity(self) -> Optional[float]:
        return self.recall

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            'recall': self.recall,
            'precision': self.precision,
            'specificity': self.specificity,
            'f1': self.f1,
            'balanced_accuracy': self.balanced_accuracy,
        }


def detection_metrics(counts: ConfusionCounts) -> DetectionMetrics:
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    specificity = _ratio(counts.tn, counts.tn + counts.fp)
    return DetectionMetrics(
        recall=recall,
        precision=precision,
        specificity=specificity,
        f1=f1_score(precision, recall),
        balanced_accuracy=balanced_accuracy(recall, specificity),
    )


@dataclass(frozen=True)
class PooledStat:
    """Mean and standard deviation over n defined values (n=0 means undefined)"""

    mean: Optional[float]
    std: Optional[float]
    n: int
    excluded: int = 0

    @classmethod
    def undefined(cls, excluded: int = 0) -> 'PooledStat':
        return cls(None, None, 0, excluded)

    @property
    def defined(self) -> bool:
        return self.n > 0


def pooled_stats(values: Sequence[Optional[float]], ddof: int = 0) -> PooledStat:
    """
    Mean and std over per-fold (or per-patient) values

    Undefined (None or NaN) entries are excluded and counted. ``ddof=0``
    gives the population std.
    """
    if len(values) == 0:
        raise InvalidArgumentError('Cannot pool an empty list of values')
    defined = [float(v) for v in values if v is not None and not np.isnan(v)]
    excluded = len(values) - len(defined)
    if not defined:
        return PooledStat.undefined(excluded)
    array = np.asarray(defined, dtype=np.float64)
    std = float(array.std(ddof=ddof)) if len(defined) > ddof else 0.0
    if len(defined) == 1:
        std = 0.0
    return PooledStat(float(array.mean()), std, len(defined), excluded)


def group_dice(
    statuses: Sequence[DetectionStatus], cutoff_ml: float = DEFAULT_CUTOFF_ML, ddof: int = 0
) -> Tuple[PooledStat, PooledStat]:
    """
    (DSC-P, DSC-TP): Dice pooled over patients with residual tumor in the
    ground truth, and over the true-positive patients
    """
    positive = [s.dice for s in statuses if s.gt_volume_ml >= cutoff_ml]
    true_positive = [s.dice for s in statuses if s.status == TP]
    dsc_p = pooled_stats(positive, ddof) if positive else PooledStat.undefined()
    dsc_tp = pooled_stats(true_positive, ddof) if true_positive else PooledStat.undefined()
    return dsc_p, dsc_tp


def consensus_vote(annotations: Sequence[BinaryMask]) -> BinaryMask:
    """Voxel is foreground when strictly more than half of the raters marked it"""
    if not annotations:
        raise InvalidArgumentError('At least one annotation is required')
    geometry = require_same_geometry(*annotations)
    votes = np.zeros(geometry.shape, dtype=np.int32)
    for mask in annotations:
        votes += mask.data
    return BinaryMask(geometry, 2 * votes > len(annotations))


def interrater_scores(
    annotations: Mapping[str, BinaryMask], reference: BinaryMask
) -> Dict[str, Optional[float]]:
    """Jaccard of each named annotation against the reference, in input order"""
    return {name: jaccard(reference, mask) for name, mask in annotations.items()}


def interrater_table(
    annotations: Mapping[str, BinaryMask], reference: BinaryMask
) -> List[Dict[str, object]]:
    """Per-rater Jaccard and Dice rows for reporting"""
    rows = []
    for name, mask in annotations.items():
        rows.append({'rater': name, 'jaccard': jaccard(reference, mask), 'dice': dice(reference, mask)})
    return rows


def _range(values: Sequence[Optional[float]]) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    defined = [v for v in values if v is not None]
    if not defined:
        return None, None, None
    return min(defined), max(defined), float(np.mean(defined))


def interrater_group_summary(
    rows: Sequence[Mapping[str, object]], groups: Mapping[str, str]
) -> List[Dict[str, object]]:
    """
    Min, max and mean Jaccard and Dice per rater group

    Groups come out in order of first appearance in ``rows``. Raters with no
    group entry are left out, so a model can be listed in ``rows`` and
    compared against the rater ranges without being pooled into them.

    Raises:
        InvalidArgumentError: a group entry names a rater not in ``rows``
    """
    raters = [str(row['rater']) for row in rows]
    unknown = sorted(set(groups) - set(raters))
    if unknown:
        raise InvalidArgumentError(f"Group mapping names unknown raters: {unknown}")

    members: Dict[str, List[Mapping[str, object]]] = {}
    for row in rows:
        group = groups.get(str(row['rater']))
        if group is not None:
            members.setdefault(group, []).append(row)

    summary = []
    for group, group_rows in members.items():
        j_min, j_max, j_mean = _range([cast(Optional[float], row['jaccard']) for row in group_rows])
        d_min, d_max, d_mean = _range([cast(Optional[float], row['dice']) for row in group_rows])
        summary.append({
            'group': group,
            'raters': len(group_rows),
            'jaccard_min': j_min,
            'jaccard_max': j_max,
            'jaccard_mean': j_mean,
            'dice_min': d_min,
            'dice_max': d_max,
            'dice_mean': d_mean,
        })
    return summary
