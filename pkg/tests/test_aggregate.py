import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctdx.aggregate import (
    FEATURE_ROWS,
    SliceFilterConfig,
    VoteThresholds,
    assemble_features,
    filter_slices,
    majority_vote,
    pool_ensemble,
    read_features,
    threshold_vote,
    votes_from_records,
    write_features,
)
from ctdx.errors import EmptyPredictionsError
from ctdx.ingest import PredictionRecord
from ctdx.labels import COVID, HEALTHY, LESION, NON_COVID

prediction_lists = st.lists(
    st.tuples(st.sampled_from([COVID, NON_COVID]),
              st.integers(0, 20).map(lambda i: i * 0.05)),
    min_size=1, max_size=12,
)


def vote_oracle(preds, t_noncovid, t_all):
    """Literal restatement of the two-step filter, then counting."""
    kept = []
    for label, confidence in preds:
        if label == NON_COVID and confidence < t_noncovid:
            continue
        if confidence < t_all:
            continue
        kept.append(label)
    if not kept:
        kept = [label for label, _ in preds]
    n_covid = kept.count(COVID)
    n_non = kept.count(NON_COVID)
    return COVID if n_covid >= n_non else NON_COVID


# ---------------------------------------------------------------------------
# threshold_vote


def test_threshold_vote_drops_weak_noncovid_votes():
    preds = [(NON_COVID, 0.65), (COVID, 0.9), (COVID, 0.55)]
    assert threshold_vote(preds, VoteThresholds(t_noncovid=0.7, t_all=0.5)) == COVID


def test_threshold_vote_with_zero_thresholds_is_plain_majority(rng):
    for _ in range(200):
        preds = [(COVID if rng.random() < 0.5 else NON_COVID, float(rng.random()))
                 for _ in range(int(rng.integers(1, 10)))]
        got = threshold_vote(preds, VoteThresholds(0.0, 0.0))
        assert got == majority_vote([label for label, _ in preds])


def test_threshold_vote_tie_breaks_to_covid():
    assert threshold_vote([(COVID, 0.6), (NON_COVID, 0.9)], VoteThresholds(0, 0)) == COVID


def test_threshold_vote_falls_back_to_unfiltered_majority():
    preds = [(NON_COVID, 0.1), (NON_COVID, 0.2), (COVID, 0.3)]
    assert threshold_vote(preds, VoteThresholds(0.9, 0.9)) == NON_COVID


def test_threshold_vote_empty():
    with pytest.raises(EmptyPredictionsError):
        threshold_vote([], VoteThresholds())


def test_threshold_vote_matches_oracle(rng):
    for _ in range(2000):
        preds = [(COVID if rng.random() < 0.5 else NON_COVID,
                  int(rng.integers(0, 21)) * 0.05)
                 for _ in range(int(rng.integers(1, 13)))]
        t = VoteThresholds(int(rng.integers(0, 11)) * 0.1, int(rng.integers(0, 11)) * 0.1)
        assert threshold_vote(preds, t) == vote_oracle(preds, t.t_noncovid, t.t_all)


@given(prediction_lists, st.integers(0, 10), st.integers(0, 10), st.randoms())
def test_threshold_vote_is_permutation_invariant(preds, tn, ta, random):
    thresholds = VoteThresholds(tn * 0.1, ta * 0.1)
    baseline = threshold_vote(preds, thresholds)
    shuffled = list(preds)
    random.shuffle(shuffled)
    assert threshold_vote(shuffled, thresholds) == baseline


@given(prediction_lists, st.integers(0, 9), st.integers(0, 10))
def test_raising_noncovid_threshold_never_flips_covid_outcome(preds, tn, ta):
    t_all = ta * 0.1
    low = VoteThresholds(tn * 0.1, t_all)
    high = VoteThresholds(min(tn * 0.1 + 0.1, 1.0), t_all)
    covid_confident = all(c >= t_all for label, c in preds if label == COVID)
    if covid_confident and threshold_vote(preds, low) == COVID:
        assert threshold_vote(preds, high) == COVID


# ---------------------------------------------------------------------------
# majority_vote and ensemble pooling


def test_majority_vote_examples():
    assert majority_vote([COVID, COVID, NON_COVID]) == COVID
    assert majority_vote([NON_COVID] * 3) == NON_COVID
    assert majority_vote([COVID, NON_COVID]) == COVID
    assert majority_vote([COVID, NON_COVID], tie_break=NON_COVID) == NON_COVID
    with pytest.raises(EmptyPredictionsError):
        majority_vote([])


def test_pool_singleton_equals_threshold_vote(rng):
    preds = [(COVID, 0.8), (NON_COVID, 0.9), (NON_COVID, 0.4)]
    t = VoteThresholds(0.5, 0.5)
    assert pool_ensemble({"only": preds}, t) == threshold_vote(preds, t)


def test_pool_unanimous_models():
    votes = {"m1": [(COVID, 0.9)] * 3, "m2": [(COVID, 0.8)] * 2}
    assert pool_ensemble(votes, VoteThresholds()) == COVID


def test_pool_equals_vote_on_concatenation(rng):
    for _ in range(300):
        per_model = {
            f"m{j}": [(COVID if rng.random() < 0.5 else NON_COVID,
                       int(rng.integers(0, 21)) * 0.05)
                      for _ in range(int(rng.integers(1, 5)))]
            for j in range(10)
        }
        t = VoteThresholds(int(rng.integers(0, 11)) * 0.1, int(rng.integers(0, 11)) * 0.1)
        pooled = [p for m in sorted(per_model) for p in per_model[m]]
        assert pool_ensemble(per_model, t) == vote_oracle(pooled, t.t_noncovid, t.t_all)


def test_pool_empty():
    with pytest.raises(EmptyPredictionsError):
        pool_ensemble({}, VoteThresholds())
    with pytest.raises(EmptyPredictionsError):
        pool_ensemble({"m": []}, VoteThresholds())


# ---------------------------------------------------------------------------
# slice filtering


def probs_with_healthy(values):
    return [[(1 - h) / 2, (1 - h) / 2, h] for h in values]


def test_filter_slices_band_rule():
    kept = filter_slices(probs_with_healthy([0.9, 0.5, 0.1]),
                         SliceFilterConfig(lo=0.2, hi=0.8, central_fraction=1.0))
    assert kept == [(0, HEALTHY), (2, LESION)]


def test_filter_slices_degenerate_band_keeps_everything():
    kept = filter_slices(probs_with_healthy([0.9, 0.5, 0.1]),
                         SliceFilterConfig(lo=0.5, hi=0.5, central_fraction=1.0))
    assert len(kept) == 3


def test_filter_slices_drops_peripheral_healthy_calls():
    healthy = [0.95] * 96
    kept = filter_slices(probs_with_healthy(healthy),
                         SliceFilterConfig(lo=0.2, hi=0.8, central_fraction=0.5))
    indices = [i for i, _ in kept]
    assert 2 not in indices          # outside [24, 72]
    assert 48 in indices
    assert all(24 <= i <= 72 for i in indices)


def test_filter_slices_lesions_kept_anywhere():
    values = [0.05] + [0.5] * 94 + [0.05]
    kept = filter_slices(probs_with_healthy(values),
                         SliceFilterConfig(lo=0.1, hi=0.9, central_fraction=0.5))
    assert (0, LESION) in kept and (95, LESION) in kept


def test_filter_config_validation():
    with pytest.raises(ValueError):
        SliceFilterConfig(lo=0.8, hi=0.2)
    with pytest.raises(ValueError):
        SliceFilterConfig(central_fraction=0.0)


# ---------------------------------------------------------------------------
# feature assembly


def test_assemble_uniform_rows():
    rows = [[1 / 3, 1 / 3, 1 / 3]] * 96
    out = assemble_features(rows)
    assert out.shape == (FEATURE_ROWS, 3)
    assert np.allclose(out, 1 / 3)
    assert out.reshape(-1).shape == (288,)


def test_assemble_doubles_48_rows():
    rows = [[i / 100, 0.0, 1 - i / 100] for i in range(48)]
    out = assemble_features(rows)
    for i in range(48):
        assert np.array_equal(out[2 * i], out[2 * i + 1])
        assert out[2 * i, 0] == pytest.approx(i / 100)


def test_assemble_halves_192_rows():
    rows = [[i / 200, 0.0, 1 - i / 200] for i in range(192)]
    out = assemble_features(rows)
    assert np.allclose(out[:, 0], [2 * j / 200 for j in range(96)])


def test_assemble_preserves_row_normalization(rng):
    raw = rng.dirichlet([1, 1, 1], size=55)
    out = assemble_features(raw)
    assert out.shape == (96, 3)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_assemble_rejects_empty():
    with pytest.raises(ValueError):
        assemble_features(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# record grouping and feature files


def test_votes_from_records_groups_by_patient_and_model():
    recs = [
        PredictionRecord(patient_id="a", model_id="m1", kind="SUBVOLUME",
                         subvolume_start=0, flips=(0, 0, 0), label=COVID, confidence=0.9),
        PredictionRecord(patient_id="a", model_id="m2", kind="SUBVOLUME",
                         subvolume_start=0, flips=(0, 0, 0), label=NON_COVID, confidence=0.7),
        PredictionRecord(patient_id="b", model_id="m1", kind="SLICE",
                         slice_index=0, probs=(1, 0, 0)),
    ]
    grouped = votes_from_records(recs)
    assert set(grouped) == {"a"}
    assert grouped["a"]["m1"] == [(COVID, 0.9)]
    assert grouped["a"]["m2"] == [(NON_COVID, 0.7)]


def test_feature_file_round_trip(tmp_path, rng):
    features = {
        f"p{i}": np.round(rng.dirichlet([2, 2, 2], size=96), 6)
        for i in range(4)
    }
    # renormalize the rounded rows so they are exactly canonical
    for key, mat in features.items():
        mat[:, 2] = 1.0 - mat[:, 0] - mat[:, 1]
        features[key] = np.abs(mat)
    f = tmp_path / "features.csv"
    write_features(features, f)
    back = read_features(f)
    assert set(back) == set(features)
    for key in features:
        assert back[key].shape == (96, 3)
        assert np.allclose(back[key], features[key], atol=1e-6)
    g = tmp_path / "again.csv"
    write_features(back, g)
    assert f.read_bytes() == g.read_bytes()
