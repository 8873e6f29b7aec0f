import csv
import math

import numpy as np
import pytest

from mfmnet.errors import (
    DegenerateInputError,
    InvalidEmbeddingError,
    InvalidInputError,
    InvalidShapeError,
    MissingEmbeddingError,
)
from mfmnet.tensor import make_rng
from mfmnet.verification import (
    FoldProtocol,
    PairRef,
    VerificationPair,
    auc,
    best_threshold,
    cosine_similarity,
    cross_fold_accuracy,
    eer,
    fold_accuracy,
    parse_pairs,
    roc_curve,
    verify,
    write_folds_csv,
    write_roc_csv,
)


@pytest.mark.parametrize(
    "a,b,expected",
    (
        ([1, 0], [0, 1], 0.0),
        ([1, 1], [2, 2], 1.0),
        ([1, 0], [-3, 0], -1.0),
        ([1, 2, 3], [1, 2, 3], 1.0),
        ([3, 4], [4, 3], 24 / 25),
    ),
)
def test_cosine_similarity(a, b, expected):
    assert cosine_similarity(np.array(a), np.array(b)) == pytest.approx(expected)


def test_cosine_similarity_is_scale_invariant():
    rng = make_rng(0)
    a, b = rng.standard_normal(256), rng.standard_normal(256)
    assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(5 * a, 0.1 * b))
    assert -1.0 <= cosine_similarity(a, a) <= 1.0


def test_cosine_similarity_errors():
    with pytest.raises(InvalidEmbeddingError):
        cosine_similarity(np.zeros(3), np.ones(3))
    with pytest.raises(InvalidShapeError):
        cosine_similarity(np.ones(3), np.ones(4))


def test_verification_pair_score():
    pair = VerificationPair(np.array([1.0, 0.0]), np.array([1.0, 1.0]), True)
    assert pair.score() == pytest.approx(1 / math.sqrt(2))


def test_roc_curve_separable():
    roc = roc_curve([(0.9, True), (0.8, True), (0.2, False), (0.1, False)])
    assert roc[0].threshold == math.inf
    assert (roc[0].fpr, roc[0].tpr) == (0.0, 0.0)
    assert (roc[-1].fpr, roc[-1].tpr) == (1.0, 1.0)
    assert [p.threshold for p in roc[1:]] == [0.9, 0.8, 0.2, 0.1]
    assert [(p.fpr, p.tpr) for p in roc] == [(0, 0), (0, 0.5), (0, 1), (0.5, 1), (1, 1)]
    assert eer(roc) == 0.0
    assert auc(roc) == 1.0


def test_roc_curve_is_monotone():
    rng = make_rng(1)
    scores = [(float(s), bool(rng.random() < 0.5)) for s in rng.standard_normal(300)]
    scores.append((0.0, True))
    scores.append((0.0, False))
    roc = roc_curve(scores)
    fpr = [p.fpr for p in roc]
    tpr = [p.tpr for p in roc]
    assert fpr == sorted(fpr)
    assert tpr == sorted(tpr)


def test_eer_on_crossing_point():
    scores = [(0.9, True), (0.6, False), (0.4, True), (0.1, False)]
    assert eer(roc_curve(scores)) == pytest.approx(0.5)


def test_eer_interpolates_between_sweep_points():
    # gap = fpr - (1 - tpr) goes from -1/6 to +1/6 between 0.8 and 0.7
    scores = [(0.9, True), (0.8, False), (0.7, True), (0.3, True), (0.2, False)]
    roc = roc_curve(scores)
    assert eer(roc) == pytest.approx(0.5)
    # The crossing falls exactly on a sweep point
    scores = [(0.9, True), (0.8, True), (0.7, False), (0.6, True), (0.5, False), (0.4, False)]
    assert eer(roc_curve(scores)) == pytest.approx(1 / 3)


def test_eer_matches_brute_force():
    rng = make_rng(2)
    same = rng.normal(1.0, 1.0, 200)
    different = rng.normal(0.0, 1.0, 200)
    scores = [(float(s), True) for s in same] + [(float(s), False) for s in different]
    roc = roc_curve(scores)
    fpr = np.array([p.fpr for p in roc])
    fnr = 1 - np.array([p.tpr for p in roc])
    i = int(np.argmin(np.abs(fpr - fnr)))
    assert eer(roc) == pytest.approx((fpr[i] + fnr[i]) / 2, abs=1 / 200)
    assert 0.2 < eer(roc) < 0.5
    assert 0.5 < auc(roc) < 1.0


def test_roc_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        roc_curve([(0.5, True), (0.7, True)])
    with pytest.raises(DegenerateInputError):
        roc_curve([])


def test_auc_of_reversed_scores():
    roc = roc_curve([(0.1, True), (0.9, False)])
    assert auc(roc) == 0.0
    assert eer(roc) == 1.0


def test_best_threshold_brute_force():
    rng = make_rng(3)
    scores = np.round(rng.uniform(-1, 1, 60), 1)
    labels = scores + rng.normal(0, 0.3, 60) > 0
    threshold, accuracy = best_threshold(scores, labels)
    distinct = sorted(set(scores.tolist()))
    midpoints = [(lo + hi) / 2 for lo, hi in zip(distinct, distinct[1:])]
    candidates = distinct[:1] + midpoints + [math.inf]
    accuracies = [np.mean((scores >= t) == labels) for t in candidates]
    best = int(np.argmax(accuracies))
    assert threshold == pytest.approx(candidates[best])
    assert accuracy == pytest.approx(accuracies[best])


def test_best_threshold_ties_resolve_low():
    threshold, accuracy = best_threshold([0.2, 0.5], [True, False])
    assert threshold == 0.2
    assert accuracy == 0.5
    # Constant scores can only accept or reject everything
    assert best_threshold([0.3] * 4, [True, False, False, False]) == (math.inf, 0.75)
    assert best_threshold([0.3] * 4, [True, True, True, False]) == (0.3, 0.75)
    with pytest.raises(InvalidInputError):
        best_threshold([], [])


def test_cross_fold_accuracy():
    result = cross_fold_accuracy(
        [np.array([0.9, 0.1]), np.array([0.8, 0.7])],
        [np.array([True, False]), np.array([True, False])],
    )
    # Midpoints between the best neighbouring scores of the other fold
    assert result.thresholds == pytest.approx([0.75, 0.5])
    assert result.accuracies == [1.0, 0.5]
    assert result.mean == 0.75
    assert result.std == 0.25


def test_cross_fold_accuracy_errors():
    with pytest.raises(InvalidInputError):
        cross_fold_accuracy([np.array([0.5])], [np.array([True])])
    with pytest.raises(InvalidInputError):
        cross_fold_accuracy([np.array([0.5]), np.array([])], [np.array([True]), np.array([], dtype=bool)])


def test_parse_pairs(tmp_path):
    path = tmp_path / "pairs.txt"
    path.write_text("\n\na/1.pgm a/2.pgm 1\nb/1.pgm c/1.pgm 0\n\n\nd/1.pgm d/2.pgm 1\n\n")
    protocol = parse_pairs(path)
    assert protocol.pair_counts == [2, 1]
    assert protocol.folds[0][1] == PairRef("b/1.pgm", "c/1.pgm", False)
    assert not protocol.is_lfw_layout()


def test_parse_pairs_lfw_layout(tmp_path):
    path = tmp_path / "pairs.txt"
    fold = "".join(f"x/{i}.pgm y/{i}.pgm {i % 2}\n" for i in range(600))
    path.write_text("\n".join([fold] * 10))
    protocol = parse_pairs(path)
    assert protocol.num_pairs == 6000
    assert protocol.is_lfw_layout()


@pytest.mark.parametrize("line", ("a b", "a b 2", "a b 1 extra"))
def test_parse_pairs_errors(tmp_path, line):
    path = tmp_path / "pairs.txt"
    path.write_text("a b 1\n" + line + "\n")
    with pytest.raises(InvalidInputError) as ex:
        parse_pairs(path)
    assert str(ex.value).startswith("Line 2:")


def _embeddings():
    return {
        "p1/a": np.array([1.0, 0.1]),
        "p1/b": np.array([1.0, 0.2]),
        "p2/a": np.array([0.1, 1.0]),
        "p2/b": np.array([0.2, 1.0]),
        "p3/a": np.array([-1.0, 0.3]),
        "p3/b": np.array([-1.0, 0.2]),
    }


def _protocol():
    return FoldProtocol(
        [
            [PairRef("p1/a", "p1/b", True), PairRef("p1/a", "p2/a", False)],
            [PairRef("p2/a", "p2/b", True), PairRef("p2/b", "p3/a", False)],
            [PairRef("p3/a", "p3/b", True), PairRef("p3/b", "p1/b", False)],
        ]
    )


def test_verify_separable_embeddings():
    report = verify(_protocol(), _embeddings())
    assert report.eer == 0.0
    assert report.auc == 1.0
    assert report.folds.accuracies == [1.0, 1.0, 1.0]
    summary = report.summary()
    assert summary["pairs"] == 6
    assert summary["folds"] == 3
    assert summary["1-eer"] == 1.0
    assert summary["mean_accuracy"] == 1.0


def test_fold_accuracy_matches_verify():
    result = fold_accuracy(_protocol(), _embeddings())
    assert result.accuracies == [1.0, 1.0, 1.0]
    assert result.thresholds == verify(_protocol(), _embeddings()).folds.thresholds
    assert result.mean == 1.0
    assert result.std == 0.0


def test_verify_single_fold_has_no_fold_accuracy():
    protocol = FoldProtocol([[pair for fold in _protocol().folds for pair in fold]])
    report = verify(protocol, _embeddings())
    assert report.folds is None
    assert "mean_accuracy" not in report.summary()


def test_verify_missing_embedding():
    embeddings = _embeddings()
    del embeddings["p3/a"]
    with pytest.raises(MissingEmbeddingError) as ex:
        verify(_protocol(), embeddings)
    assert ex.value.sample == "p3/a"
    assert str(ex.value) == "No embedding for sample: p3/a"


def test_verify_identical_pairs_are_degenerate():
    protocol = FoldProtocol([[PairRef("p1/a", "p1/a", True), PairRef("p2/a", "p2/a", True)]])
    with pytest.raises(DegenerateInputError):
        verify(protocol, _embeddings())


def test_report_files(tmp_path):
    report = verify(_protocol(), _embeddings())
    write_roc_csv(tmp_path / "roc.csv", report.roc)
    write_folds_csv(tmp_path / "folds.csv", report.folds)
    with open(tmp_path / "roc.csv") as fp:
        rows = list(csv.DictReader(fp))
    assert list(rows[0]) == ["threshold", "fpr", "tpr"]
    assert rows[0]["threshold"] == "inf"
    assert float(rows[-1]["fpr"]) == 1.0
    lines = (tmp_path / "folds.csv").read_text().splitlines()
    assert lines[0] == "fold,accuracy,threshold"
    assert len(lines) == 5
    assert lines[-1] == "mean,1.0,"


def _brute_force_eer(values, labels):
    "Sweep +inf and every distinct score by hand and interpolate the first crossing"
    positives, negatives = values[labels], values[~labels]
    thresholds = np.concatenate([[np.inf], np.unique(values)[::-1]])
    tpr = (positives[None, :] >= thresholds[:, None]).sum(axis=1) / len(positives)
    fpr = (negatives[None, :] >= thresholds[:, None]).sum(axis=1) / len(negatives)
    for i in range(1, len(thresholds)):
        gap = fpr[i] - (1 - tpr[i])
        if gap == 0:
            return fpr[i]
        if gap > 0:
            previous = fpr[i - 1] - (1 - tpr[i - 1])
            return fpr[i - 1] + (-previous / (gap - previous)) * (fpr[i] - fpr[i - 1])
    raise AssertionError("no crossing")


def _brute_force_threshold(values, labels):
    distinct = sorted(set(values.tolist()))
    candidates = distinct[:1] + [(lo + hi) / 2 for lo, hi in zip(distinct, distinct[1:])] + [math.inf]
    best, best_correct = None, -1
    for candidate in candidates:
        correct = int(np.sum((values >= candidate) == labels))
        if correct > best_correct:
            best, best_correct = candidate, correct
    return best


def _random_score_set(rng):
    "Up to 1000 labelled pairs over a small vector pool, so tied scores are common"
    pool = rng.integers(-2, 3, size=(int(rng.integers(4, 30)), 3)).astype(np.float64)
    pool[np.all(pool == 0, axis=1)] = 1.0
    embeddings = {f"v{i}": vector for i, vector in enumerate(pool)}
    num_folds = int(rng.integers(2, 6))
    num_pairs = int(rng.integers(2 * num_folds, 1001))
    sizes = np.diff(np.sort(rng.choice(np.arange(1, num_pairs), num_folds - 1, replace=False)), prepend=0, append=num_pairs)
    folds = []
    for size in sizes:
        a, b = rng.integers(0, len(pool), size=(2, size))
        same = rng.random(size) < 0.5
        folds.append([PairRef(f"v{i}", f"v{j}", bool(s)) for i, j, s in zip(a, b, same)])
    folds[0][0] = PairRef(folds[0][0].path_a, folds[0][0].path_b, True)
    folds[-1][-1] = PairRef(folds[-1][-1].path_a, folds[-1][-1].path_b, False)
    return FoldProtocol(folds), embeddings


@pytest.mark.parametrize("seed", range(100))
def test_eer_and_fold_accuracy_match_exhaustive_search(seed):
    protocol, embeddings = _random_score_set(make_rng(seed))
    assert 2 <= protocol.num_pairs <= 1000
    fold_scores = []
    for fold in protocol.folds:
        scored = [
            (cosine_similarity(embeddings[p.path_a], embeddings[p.path_b]), p.same) for p in fold
        ]
        fold_scores.append(
            (np.array([s for s, _ in scored]), np.array([same for _, same in scored], dtype=bool))
        )
    values = np.concatenate([v for v, _ in fold_scores])
    labels = np.concatenate([flags for _, flags in fold_scores])

    pairs = list(zip(values.tolist(), labels.tolist()))
    assert abs(eer(roc_curve(pairs)) - _brute_force_eer(values, labels)) <= 1e-12

    result = fold_accuracy(protocol, embeddings)
    for i, (fold_values, fold_labels) in enumerate(fold_scores):
        others = [j for j in range(len(fold_scores)) if j != i]
        threshold = _brute_force_threshold(
            np.concatenate([fold_scores[j][0] for j in others]),
            np.concatenate([fold_scores[j][1] for j in others]),
        )
        expected = np.mean((fold_values >= threshold) == fold_labels)
        assert result.thresholds[i] == threshold
        assert abs(result.accuracies[i] - expected) <= 1e-12


def test_verify_threads_do_not_change_report():
    single = verify(_protocol(), _embeddings())
    threaded = verify(_protocol(), _embeddings(), threads=3)
    assert threaded.summary() == single.summary()
    assert threaded.folds.thresholds == single.folds.thresholds
