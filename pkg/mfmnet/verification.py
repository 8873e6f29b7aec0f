"""
Face verification on embedding pairs: cosine scores, ROC, EER, AUC and
fold-based accuracy with thresholds chosen on the other folds.

Pair files hold one ``pathA pathB same`` record per line (``same`` is 0 or 1)
and separate folds with blank lines.
"""

import csv
from dataclasses import dataclass, field
import pathlib
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn import metrics

from .data import parallel_map
from .errors import (
    DatasetIOError,
    DegenerateInputError,
    InvalidEmbeddingError,
    InvalidInputError,
    InvalidShapeError,
    MissingEmbeddingError,
)
from .tensor import Tensor

PathLike = Union[str, pathlib.Path]

LFW_FOLDS = 10
LFW_PAIRS_PER_FOLD = 600


@dataclass(frozen=True)
class PairRef:
    path_a: str
    path_b: str
    same: bool


@dataclass(frozen=True)
class VerificationPair:
    embedding_a: Tensor
    embedding_b: Tensor
    same: bool

    def score(self) -> float:
        return cosine_similarity(self.embedding_a, self.embedding_b)


@dataclass
class FoldProtocol:
    folds: List[List[PairRef]]

    @property
    def pair_counts(self) -> List[int]:
        return [len(fold) for fold in self.folds]

    @property
    def num_pairs(self) -> int:
        return sum(self.pair_counts)

    def is_lfw_layout(self) -> bool:
        return len(self.folds) == LFW_FOLDS and all(n == LFW_PAIRS_PER_FOLD for n in self.pair_counts)


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def cosine_similarity(a: Tensor, b: Tensor) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidShapeError(f"Embeddings differ in length: {a.size} and {b.size}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise InvalidEmbeddingError("Cannot score a zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def _split_scores(scores) -> Tuple[np.ndarray, np.ndarray]:
    if not len(scores):
        return np.zeros(0), np.zeros(0, dtype=bool)
    values, labels = zip(*scores)
    return np.asarray(values, dtype=np.float64), np.asarray(labels, dtype=bool)


def roc_curve(scores: Sequence[Tuple[float, bool]]) -> List[RocPoint]:
    """
    Sweep the threshold over every distinct score, from above the maximum
    (the (0, 0) endpoint) down to the minimum (the (1, 1) endpoint). A pair
    is predicted "same" when its score is >= the threshold.
    """
    values, labels = _split_scores(scores)
    if labels.all() or not labels.any():
        raise DegenerateInputError("ROC needs at least one same and one different pair")
    fpr, tpr, thresholds = metrics.roc_curve(labels.astype(int), values, drop_intermediate=False)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    thresholds[0] = np.inf
    return [RocPoint(float(t), float(tp), float(fp)) for t, tp, fp in zip(thresholds, tpr, fpr)]


def _check_roc(roc: Sequence[RocPoint]) -> Tuple[np.ndarray, np.ndarray]:
    if len(roc) < 2:
        raise DegenerateInputError("ROC needs at least two points")
    fpr = np.array([p.fpr for p in roc])
    tpr = np.array([p.tpr for p in roc])
    return fpr, tpr


def eer(roc: Sequence[RocPoint]) -> float:
    "Equal error rate: where fpr = 1 - tpr, interpolated linearly between sweep points"
    fpr, tpr = _check_roc(roc)
    gap = fpr - (1.0 - tpr)
    crossed = np.flatnonzero(gap >= 0)
    if not len(crossed) or crossed[0] == 0:
        raise DegenerateInputError("ROC does not cross the equal error line")
    i = int(crossed[0])
    if gap[i] == 0:
        return float(fpr[i])
    t = -gap[i - 1] / (gap[i] - gap[i - 1])
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def auc(roc: Sequence[RocPoint]) -> float:
    fpr, tpr = _check_roc(roc)
    return float(metrics.auc(fpr, tpr))


# Fold accuracy


def best_threshold(scores, labels) -> Tuple[float, float]:
    """
    The threshold with the highest accuracy on ``scores``.

    Candidates are the lowest score (accept everything), the midpoint between
    each pair of neighbouring distinct scores and +inf (reject everything).
    Ties resolve to the lowest candidate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not len(scores):
        raise InvalidInputError("Cannot pick a threshold from zero pairs")
    distinct = np.unique(scores)
    candidates = np.concatenate([distinct[:1], (distinct[:-1] + distinct[1:]) / 2, [np.inf]])
    positives = np.sort(scores[labels])
    negatives = np.sort(scores[~labels])
    true_accepts = len(positives) - np.searchsorted(positives, candidates, side="left")
    true_rejects = np.searchsorted(negatives, candidates, side="left")
    correct = true_accepts + true_rejects
    best = int(np.argmax(correct))
    return float(candidates[best]), float(correct[best]) / len(scores)


def accuracy_at(scores, labels, threshold: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    return float(np.mean((scores >= threshold) == labels))


@dataclass
class FoldResult:
    accuracies: List[float]
    thresholds: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def cross_fold_accuracy(fold_scores: Sequence, fold_labels: Sequence) -> FoldResult:
    "Each fold is scored with the best threshold of all the other folds"
    if len(fold_scores) < 2:
        raise InvalidInputError("Fold accuracy needs at least two folds")
    if any(len(s) == 0 for s in fold_scores):
        raise InvalidInputError("Every fold needs at least one pair")
    accuracies, thresholds = [], []
    for i in range(len(fold_scores)):
        others = [j for j in range(len(fold_scores)) if j != i]
        threshold, _ = best_threshold(
            np.concatenate([np.asarray(fold_scores[j], dtype=np.float64) for j in others]),
            np.concatenate([np.asarray(fold_labels[j], dtype=bool) for j in others]),
        )
        thresholds.append(threshold)
        accuracies.append(accuracy_at(fold_scores[i], fold_labels[i], threshold))
    return FoldResult(accuracies, thresholds)


def score_pairs(pairs: Sequence[PairRef], embeddings: Mapping[str, Tensor]) -> List[Tuple[float, bool]]:
    scored = []
    for pair in pairs:
        for path in (pair.path_a, pair.path_b):
            if path not in embeddings:
                raise MissingEmbeddingError(path)
        scored.append((cosine_similarity(embeddings[pair.path_a], embeddings[pair.path_b]), pair.same))
    return scored


def fold_accuracy(protocol: FoldProtocol, embeddings: Mapping[str, Tensor]) -> FoldResult:
    fold_scores, fold_labels = [], []
    for fold in protocol.folds:
        values, labels = _split_scores(score_pairs(fold, embeddings))
        fold_scores.append(values)
        fold_labels.append(labels)
    return cross_fold_accuracy(fold_scores, fold_labels)


# Protocol files and reports


def parse_pairs(path: PathLike) -> FoldProtocol:
    try:
        text = pathlib.Path(path).read_text()
    except (OSError, UnicodeDecodeError) as ex:
        raise DatasetIOError(f"Could not read pairs file {path}: {ex}")
    folds: List[List[PairRef]] = [[]]
    for line_number, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            if folds[-1]:
                folds.append([])
            continue
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise InvalidInputError(f"Line {line_number}: expected 'pathA pathB same(0|1)'")
        folds[-1].append(PairRef(parts[0], parts[1], parts[2] == "1"))
    if not folds[-1]:
        folds.pop()
    return FoldProtocol(folds)


@dataclass
class VerificationReport:
    roc: List[RocPoint]
    eer: float
    auc: float
    folds: Optional[FoldResult] = None
    pair_counts: List[int] = field(default_factory=list)

    @property
    def eer_accuracy(self) -> float:
        return 1.0 - self.eer

    def summary(self) -> dict:
        summary = {
            "pairs": sum(self.pair_counts),
            "folds": len(self.pair_counts),
            "eer": self.eer,
            "1-eer": self.eer_accuracy,
            "auc": self.auc,
        }
        if self.folds is not None:
            summary["mean_accuracy"] = self.folds.mean
            summary["std_accuracy"] = self.folds.std
        return summary


def verify(
    protocol: FoldProtocol, embeddings: Mapping[str, Tensor], threads: int = 1
) -> VerificationReport:
    """
    Score every pair of ``protocol`` and compute the ROC, EER, AUC and, when
    there are two or more folds, the cross-fold accuracy. Folds are scored on
    ``threads`` workers.
    """
    fold_scores = parallel_map(lambda fold: score_pairs(fold, embeddings), protocol.folds, threads)
    everything = [item for scores in fold_scores for item in scores]
    roc = roc_curve(everything)
    folds = None
    if len(protocol.folds) >= 2:
        split = [_split_scores(scores) for scores in fold_scores]
        folds = cross_fold_accuracy([s for s, _ in split], [lab for _, lab in split])
    return VerificationReport(roc, eer(roc), auc(roc), folds, protocol.pair_counts)


def write_roc_csv(path: PathLike, roc: Sequence[RocPoint]) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["threshold", "fpr", "tpr"])
        for point in roc:
            writer.writerow([repr(point.threshold), repr(point.fpr), repr(point.tpr)])


def write_folds_csv(path: PathLike, folds: FoldResult) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["fold", "accuracy", "threshold"])
        for i, (accuracy, threshold) in enumerate(zip(folds.accuracies, folds.thresholds), 1):
            writer.writerow([i, repr(accuracy), repr(threshold)])
        writer.writerow(["mean", repr(folds.mean), ""])
