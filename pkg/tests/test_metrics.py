import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from maskdistill.core import ContractError, MetricError, ProtocolError, ScoringError, make_rng
from maskdistill.dataio import Scenario, make_protocol, write_landmarks
from maskdistill.metrics import (
    FAR2000, FMR100, FMR1000, ScoreSet, accuracy_at_threshold, cosine_score, det_curve, fdr,
    fmr_at, fnmr_at, fnmr_at_fmr, kfold_accuracy, match_rate, max_accuracy, read_scores, report,
    score_protocol, tpr_at_far, write_scores,
)
from maskdistill.toydata import REFERENCE_LANDMARKS


# --- brute-force oracle -----------------------------------------------------------
# Every rate is a step function of the threshold that only changes at observed
# scores, so evaluating at each score, just above each score and at +-inf
# (2 * (n_g + n_i) + 2 points) visits every attainable operating point.

def oracle_candidates(g, i):
    pts = [-math.inf, math.inf]
    for s in list(g) + list(i):
        pts += [s, math.nextafter(s, math.inf)]
    return sorted(set(pts))


def counts(g, i, t):
    return sum(x >= t for x in g), sum(x >= t for x in i)


def oracle_fnmr_at_fmr(g, i, ceiling, strict=True):
    best = None
    for t in oracle_candidates(g, i):
        tg, ti = counts(g, i, t)
        fmr = ti / len(i)
        if (fmr < ceiling) if strict else (fmr <= ceiling):
            fnmr = (len(g) - tg) / len(g)
            best = fnmr if best is None else min(best, fnmr)
    return best


def oracle_tpr_at_far(g, i, ceiling, strict=False):
    best = None
    for t in oracle_candidates(g, i):
        tg, ti = counts(g, i, t)
        far = ti / len(i)
        if (far < ceiling) if strict else (far <= ceiling):
            best = tg / len(g) if best is None else max(best, tg / len(g))
    return best


def oracle_max_acc(g, i):
    return max((tg + len(i) - ti) / (len(g) + len(i))
               for tg, ti in (counts(g, i, t) for t in oracle_candidates(g, i)))


def random_scoreset(rng):
    ng, ni = int(rng.integers(1, 26)), int(rng.integers(1, 26))
    if rng.random() < 0.5:  # coarse grid so that ties occur
        g = rng.integers(0, 8, ng) / 8
        i = rng.integers(0, 8, ni) / 8 - 0.25
    else:
        g = rng.normal(0.5, 0.3, ng)
        i = rng.normal(0.1, 0.3, ni)
    return ScoreSet(g, i)


@pytest.mark.parametrize("block", range(4))
def test_metrics_equal_brute_force(block):
    rng = make_rng(block, "oracle")
    for _ in range(50):
        s = random_scoreset(rng)
        g, i = s.genuine.tolist(), s.impostor.tolist()
        for ceiling in (FMR1000, FMR100, 0.1, 0.3, 1.0):
            for strict in (True, False):
                fnmr, thr = fnmr_at_fmr(s, ceiling, strict)
                expected = oracle_fnmr_at_fmr(g, i, ceiling, strict)
                if expected is None:
                    continue
                assert fnmr == expected
                assert fnmr_at(s, thr) == fnmr
                tpr, thr = tpr_at_far(s, ceiling, strict)
                assert tpr == oracle_tpr_at_far(g, i, ceiling, strict)
                assert match_rate(s.genuine, thr) == tpr
        acc, thr = max_accuracy(s)
        assert acc == oracle_max_acc(g, i)
        assert accuracy_at_threshold(s, thr) == acc


def test_det_curve_is_monotone():
    s = random_scoreset(make_rng(9, "det"))
    t, fmr, fnmr = det_curve(s)
    assert np.all(np.diff(t) > 0)
    assert np.all(np.diff(fmr) <= 0) and np.all(np.diff(fnmr) >= 0)
    assert fmr[0] == 1 and fnmr[0] == 0 and fmr[-1] == 0 and fnmr[-1] == 1


# --- worked examples ----------------------------------------------------------------

def test_fnmr_at_fmr_worked_example():
    s = ScoreSet([0.9, 0.8, 0.7, 0.2], [0.05 * k for k in range(1, 11)])
    fnmr, thr = fnmr_at_fmr(s, 0.1)
    assert fnmr == 0.25
    assert thr == 0.7 and thr > 0.5
    assert fmr_at(s, thr) == 0.0


def test_fnmr_at_fmr_extremes():
    assert fnmr_at_fmr(ScoreSet([0.9, 0.8], [0.1, 0.2]), FMR1000)[0] == 0.0
    assert fnmr_at_fmr(ScoreSet([0.1, 0.2], [0.8, 0.9]), FMR100)[0] == 1.0
    with pytest.raises(MetricError):
        fnmr_at_fmr(ScoreSet([0.5], []), 0.1)
    with pytest.raises(MetricError):
        fnmr_at_fmr(ScoreSet([0.5], [0.1]), 0.0)


def test_tpr_at_far_examples():
    tpr, thr = tpr_at_far(ScoreSet([0.9, 0.5], [0.6, 0.1]), 0.25)
    assert tpr == 0.5 and thr > 0.6
    assert tpr_at_far(ScoreSet([0.9, 0.8], [0.1, 0.2]), FAR2000)[0] == 1.0
    assert tpr_at_far(ScoreSet([0.1, 0.2], [0.8, 0.9]), 1.0) == (1.0, -math.inf)


def test_accuracy_examples():
    assert accuracy_at_threshold(ScoreSet([0.9], [0.1]), 0.95) == 0.5
    assert accuracy_at_threshold(ScoreSet([0.9, 0.8], [0.1]), 0.5) == 1.0
    assert accuracy_at_threshold(ScoreSet([0.9, 0.8], [0.1]), -math.inf) == pytest.approx(2 / 3)


def test_max_accuracy_examples():
    acc, thr = max_accuracy(ScoreSet([0.8, 0.3], [0.7, 0.2]))
    assert acc == 0.75
    # (0.2, 0.3] and (0.7, 0.8] both give 3/4; the tie goes to the lower
    # interval and the threshold sits just above 0.2
    assert thr == np.nextafter(0.2, 1.0)
    assert accuracy_at_threshold(ScoreSet([0.8, 0.3], [0.7, 0.2]), 0.8) == 0.75
    assert max_accuracy(ScoreSet([0.9, 0.8], [0.1, 0.2]))[0] == 1.0
    assert max_accuracy(ScoreSet([0.3, 0.5, 0.7], [0.3, 0.5, 0.7]))[0] == 0.5


def test_fdr_examples():
    g = np.array([0.7, 0.9])  # mean 0.8, unbiased variance 0.02
    i = np.array([0.1, 0.3])
    g3 = np.array([0.7, 0.8, 0.9])  # mean 0.8, unbiased variance 0.01
    i3 = g3 - 0.6
    assert fdr(ScoreSet(g3, i3)) == pytest.approx(18.0, rel=1e-12)
    assert fdr(ScoreSet(g, i)) == pytest.approx(0.36 / 0.04, rel=1e-12)
    assert fdr(ScoreSet([0.1, 0.3], [0.3, 0.1])) == 0.0
    assert fdr(ScoreSet([0.5, 0.5], [0.5, 0.5])) == 0.0
    with pytest.raises(MetricError):
        fdr(ScoreSet([0.5, 0.5], [0.2, 0.2]))
    with pytest.raises(MetricError):
        fdr(ScoreSet([0.5], [0.2, 0.3]))


def test_fdr_affine_invariance():
    s = random_scoreset(make_rng(3, "fdr"))
    while len(s.genuine) < 2 or len(s.impostor) < 2:
        s = random_scoreset(make_rng(4, "fdr"))
    base = fdr(s)
    for a, b in [(1.0, 5.0), (3.0, 0.0), (-2.0, 1.0), (1e-3, -7.0)]:
        moved = fdr(ScoreSet(a * s.genuine + b, a * s.impostor + b))
        assert moved == pytest.approx(base, rel=1e-9)


def test_fdr_monte_carlo():
    rng = make_rng(0, "fdr-mc")
    s = ScoreSet(rng.normal(0.8, 0.1, 100_000), rng.normal(0.2, 0.1, 100_000))
    assert abs(fdr(s) - 18.0) <= 0.5


def test_monotone_transform_invariance():
    rng = make_rng(11, "monotone")
    for _ in range(20):
        s = random_scoreset(rng)
        folds = np.arange(len(s.genuine) + len(s.impostor)) % 2
        pair = np.concatenate([s.genuine, s.impostor])
        gen = np.arange(len(pair)) < len(s.genuine)
        for f in (np.exp, lambda x: x ** 3 + 2 * x, lambda x: np.arctan(5 * x)):
            t = ScoreSet(f(s.genuine), f(s.impostor))
            assert fnmr_at_fmr(t, 0.1)[0] == fnmr_at_fmr(s, 0.1)[0]
            assert tpr_at_far(t, 0.2)[0] == tpr_at_far(s, 0.2)[0]
            assert max_accuracy(t)[0] == max_accuracy(s)[0]
            if len(pair) >= 2:
                assert kfold_accuracy(folds, f(pair), gen) == kfold_accuracy(folds, pair, gen)


# --- k-fold --------------------------------------------------------------------------

def test_kfold_separable():
    folds = np.repeat(np.arange(10), 6)
    # every fold holds the same separated score grid, shuffled within the fold
    grid = np.array([0.7, 0.8, 0.9, 0.1, 0.2, 0.3])
    rng = make_rng(0, "kf")
    scores, gen = np.empty(60), np.empty(60, bool)
    for f in range(10):
        order = rng.permutation(6)
        scores[6 * f:6 * f + 6] = grid[order]
        gen[6 * f:6 * f + 6] = order < 3
    mean, per = kfold_accuracy(folds, scores, gen)
    assert mean == 1.0 and per == [1.0] * 10


def test_kfold_two_fold_replication():
    rng = make_rng(1, "kf2")
    g0, i0 = rng.normal(0.6, 0.2, 15), rng.normal(0.2, 0.2, 15)
    shift = 0.05
    s0 = np.concatenate([g0, i0])
    scores = np.concatenate([s0, s0 + shift])
    gen = np.tile(np.arange(30) < 15, 2)
    folds = np.repeat([0, 1], 30)
    mean, per = kfold_accuracy(folds, scores, gen)
    _, t0 = max_accuracy(ScoreSet(g0, i0))
    _, t1 = max_accuracy(ScoreSet(g0 + shift, i0 + shift))
    expected = [accuracy_at_threshold(ScoreSet(g0, i0), t1),
                accuracy_at_threshold(ScoreSet(g0 + shift, i0 + shift), t0)]
    assert per == expected
    assert mean == pytest.approx(np.mean(expected))


def test_kfold_on_6000_pairs():
    rng = make_rng(2, "kf6000")
    gen = np.tile(np.repeat([True, False], 300), 10)
    proto = make_protocol([(f"a{k}", f"b{k}", g) for k, g in enumerate(gen)], Scenario.NO_MASK,
                          k_folds=10)
    scores = np.where(gen, rng.normal(0.6, 0.2, 6000), rng.normal(0.1, 0.2, 6000))
    mean, per = kfold_accuracy(proto, scores)
    assert len(per) == 10
    assert mean == pytest.approx(sum(per) / 10, abs=1e-15)
    assert all(0.5 < a <= 1 for a in per)
    assert list(np.bincount(proto.fold_of())) == [600] * 10


def test_kfold_needs_two_folds():
    with pytest.raises(ProtocolError):
        kfold_accuracy(np.zeros(4, int), [0.1, 0.2, 0.3, 0.4], [True, False, True, False])


# --- scores, report -----------------------------------------------------------------

def test_cosine_score():
    a = np.array([1.0, 0.0])
    assert cosine_score(a, a) == 1.0
    assert cosine_score(a, [0.0, 1.0]) == 0.0
    assert cosine_score(a, [math.sqrt(2) / 2] * 2) == pytest.approx(0.70710678, abs=1e-8)
    with pytest.raises(ContractError):
        cosine_score(a * 1.001, a)


def test_report_thresholds_reproduce_rates(tmp_path):
    rng = make_rng(5, "report")
    gen = np.tile(np.repeat([True, False], 50), 4)
    proto = make_protocol([(f"a{k}", f"b{k}", g) for k, g in enumerate(gen)], Scenario.NO_MASK,
                          k_folds=4)
    scores = ScoreSet.from_pairs(np.where(gen, rng.normal(0.6, 0.2, 400),
                                          rng.normal(0.1, 0.2, 400)), gen)
    r = report(scores, proto, name="toy")
    th = r.thresholds
    assert fnmr_at(scores, th["fmr1000"]) == r.fmr1000_fnmr
    assert fnmr_at(scores, th["fmr100"]) == r.fmr100_fnmr
    assert match_rate(scores.genuine, th["far2000"]) == r.tpr_at_far2000
    assert accuracy_at_threshold(scores, th["acc2000"]) == r.acc2000
    assert accuracy_at_threshold(scores, th["max_acc"]) == r.max_acc
    assert r.counts == (200, 200)
    assert r.kfold_acc is not None
    csv_text = r.to_csv(tmp_path / "r.csv")
    assert csv_text.splitlines()[0].startswith("name,FMR1000,FMR100,FDR,FAR2000,ACC2000,ACC")
    assert "FMR1000" in r.to_text().splitlines()[0]
    with pytest.raises(MetricError):
        report(ScoreSet([0.5, 0.6], []))


def test_score_dump_round_trip(tmp_path):
    s = ScoreSet.from_pairs([0.1, 0.9, -0.3, 1 / 3], [False, True, False, True])
    write_scores(tmp_path / "s.csv", s)
    again = read_scores(tmp_path / "s.csv")
    assert np.array_equal(again.pair_scores, s.pair_scores)
    assert np.array_equal(again.genuine, s.genuine) and np.array_equal(again.impostor, s.impostor)


# --- score_protocol -----------------------------------------------------------------

class MeanColorModel:
    """Embeds an image as its normalized mean color plus a constant offset."""

    def __init__(self):
        self.calls = 0
        self.images = 0

    def embed(self, images):
        self.calls += 1
        self.images += len(images)
        out = np.array([[*img.pixels.reshape(-1, 3).mean(0), 1.0] for img in images])
        return out / np.linalg.norm(out, axis=1, keepdims=True)


class CountingMasker:
    def __init__(self):
        from maskdistill.maskgen import mask_for_benchmark
        self.inner = mask_for_benchmark
        self.calls = 0

    def __call__(self, image, rng):
        self.calls += 1
        return self.inner(image, rng)


@pytest.fixture
def image_tree(tmp_path):
    rng = make_rng(0, "tree")
    paths = []
    for k in range(4):
        path = tmp_path / f"id{k}" / f"id{k}_0001.png"
        path.parent.mkdir()
        Image.fromarray(rng.integers(0, 256, (112, 112, 3), dtype=np.uint8)).save(path)
        write_landmarks(path.with_suffix(".landmarks"), REFERENCE_LANDMARKS)
        paths.append(str(path))
    return paths


def five_pairs(paths):
    p = paths
    return [(p[0], p[1], True), (p[1], p[2], True), (p[2], p[3], True),
            (p[0], p[3], False), (p[1], p[3], False)]


def test_score_protocol_counts_and_cache(image_tree):
    model = MeanColorModel()
    s = score_protocol(make_protocol(five_pairs(image_tree), Scenario.NO_MASK), model)
    assert s.counts == (3, 2)
    assert model.images == 4  # one embedding per distinct image


def test_no_mask_never_calls_masker(image_tree):
    masker = CountingMasker()
    score_protocol(make_protocol(five_pairs(image_tree), Scenario.NO_MASK), MeanColorModel(),
                   masker=masker, rng=make_rng(0, "s"))
    assert masker.calls == 0
    masker = CountingMasker()
    model = MeanColorModel()
    score_protocol(make_protocol(five_pairs(image_tree), Scenario.MASKED_VS_NONMASKED), model,
                   masker=masker, rng=make_rng(0, "s"))
    assert masker.calls == 3  # distinct probe images
    assert model.images == 3 + 3  # unmasked refs plus masked probes


def test_score_protocol_deterministic(image_tree):
    proto = make_protocol(five_pairs(image_tree), Scenario.MASKED_VS_MASKED)
    a = score_protocol(proto, MeanColorModel(), rng=make_rng(3, "s"))
    b = score_protocol(proto, MeanColorModel(), rng=make_rng(3, "s"))
    c = score_protocol(proto, MeanColorModel(), rng=make_rng(4, "s"))
    assert np.array_equal(a.pair_scores, b.pair_scores)
    assert not np.array_equal(a.pair_scores, c.pair_scores)


def test_score_protocol_independent_of_location(image_tree, tmp_path_factory):
    import shutil
    src = Path(image_tree[0]).parent.parent
    moved = tmp_path_factory.mktemp("elsewhere") / "copy"
    shutil.copytree(src, moved)
    copies = [str(moved / Path(p).relative_to(src)) for p in image_tree]
    a = score_protocol(make_protocol(five_pairs(image_tree), Scenario.MASKED_VS_MASKED),
                       MeanColorModel(), rng=make_rng(3, "s"))
    b = score_protocol(make_protocol(five_pairs(copies), Scenario.MASKED_VS_MASKED),
                       MeanColorModel(), rng=make_rng(3, "s"))
    assert np.array_equal(a.pair_scores, b.pair_scores)


def test_missing_image_names_pair(image_tree):
    pairs = five_pairs(image_tree) + [(image_tree[0], image_tree[0] + ".gone.png", False)]
    with pytest.raises(ScoringError, match="pair 5"):
        score_protocol(make_protocol(pairs, Scenario.NO_MASK), MeanColorModel())
