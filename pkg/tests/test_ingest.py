import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctdx.errors import (
    EmptyDirectoryError,
    MalformedRecordError,
    MixedDimensionsError,
    NonPositiveWindowError,
    RecordInvariantError,
    UndecodableImageError,
)
from ctdx.ingest import (
    PredictionRecord,
    Volume,
    WindowSpec,
    apply_window,
    canonical_prob_triple,
    format_record,
    load_volume,
    natural_sort_key,
    parse_record,
    read_labels,
    read_predictions,
    write_labels,
    write_predictions,
)
from ctdx.labels import COVID, NON_COVID

from conftest import gray, write_slice_dir


# ---------------------------------------------------------------------------
# natural sort and volume loading


def test_natural_sort_orders_numeric_runs_as_integers(tmp_path):
    write_slice_dir(tmp_path / "p1", {
        "2.jpg": gray(10), "10.jpg": gray(20), "1.jpg": gray(30),
    })
    vol = load_volume(tmp_path / "p1")
    # 1.jpg, 2.jpg, 10.jpg by natural order; check via the pixel values
    assert vol.slices[0, 0, 0] == pytest.approx(30 / 255)
    assert vol.slices[1, 0, 0] == pytest.approx(10 / 255)
    assert vol.slices[2, 0, 0] == pytest.approx(20 / 255)


def test_natural_sort_key_examples():
    names = ["10.jpg", "2.jpg", "1.jpg"]
    assert sorted(names, key=natural_sort_key) == ["1.jpg", "2.jpg", "10.jpg"]
    # zero-padded duplicates of the same number fall back to lexicographic
    assert sorted(["01.jpg", "1.jpg"], key=natural_sort_key) == ["01.jpg", "1.jpg"]
    assert sorted(["a2b", "a10b", "a1b"], key=natural_sort_key) == ["a1b", "a2b", "a10b"]


@given(st.lists(st.text(alphabet="ab019.", min_size=1, max_size=8), min_size=1, max_size=20))
def test_natural_sort_is_a_total_order(names):
    # sorting must not depend on the incoming order
    forward = sorted(names, key=natural_sort_key)
    backward = sorted(reversed(names), key=natural_sort_key)
    assert forward == backward


def test_empty_directory_rejected(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(EmptyDirectoryError):
        load_volume(tmp_path / "empty")
    # non-image files do not count
    (tmp_path / "empty" / "notes.txt").write_text("x")
    with pytest.raises(EmptyDirectoryError):
        load_volume(tmp_path / "empty")


def test_load_volume_round_trip_counts_and_range(tmp_path, rng):
    pixels = {
        f"{i}.png": rng.integers(0, 256, size=(32, 32)).astype(np.uint8)
        for i in range(700)
    }
    write_slice_dir(tmp_path / "big", pixels)
    vol = load_volume(tmp_path / "big")
    assert vol.n_slices == 700
    assert vol.slices.shape == (700, 32, 32)
    assert vol.slices.min() >= 0.0 and vol.slices.max() <= 1.0
    # 8-bit rescale is p/255
    assert np.allclose(vol.slices[0], pixels["0.png"] / 255.0)


def test_mixed_dimensions_rejected(tmp_path):
    write_slice_dir(tmp_path / "p", {"0.png": gray(1, (8, 8)), "1.png": gray(1, (8, 9))})
    with pytest.raises(MixedDimensionsError):
        load_volume(tmp_path / "p")


def test_undecodable_image_rejected(tmp_path):
    d = tmp_path / "p"
    d.mkdir()
    (d / "0.jpg").write_bytes(b"this is not an image")
    with pytest.raises(UndecodableImageError):
        load_volume(d)


def test_label_attached_from_map(tmp_path):
    write_slice_dir(tmp_path / "p7", {"0.png": gray(5)})
    vol = load_volume(tmp_path / "p7", {"p7": COVID})
    assert vol.label == COVID
    assert load_volume(tmp_path / "p7", {"other": COVID}).label is None


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume("p", np.zeros((0, 4, 4)))
    with pytest.raises(ValueError):
        Volume("p", np.full((2, 4, 4), 1.5))
    with pytest.raises(ValueError):
        Volume("p", np.zeros((2, 4, 4)), label="MAYBE")


def test_write_volume_reload_round_trip(tmp_path, rng):
    # 8-bit grid values survive re-emission exactly
    pixels = rng.integers(0, 256, size=(12, 16, 16)) / 255.0
    vol = Volume("p9", pixels, label=COVID)
    from ctdx.ingest import write_volume

    write_volume(vol, tmp_path / "out")
    back = load_volume(tmp_path / "out", {"out": NON_COVID})
    assert back.patient_id == "out"
    assert back.label == NON_COVID
    assert np.array_equal(back.slices, vol.slices)


# ---------------------------------------------------------------------------
# HU windowing


def test_window_center_maps_to_half():
    spec = WindowSpec(window=350, level=1150)
    assert apply_window(np.array([[1150.0]]), spec)[0, 0] == pytest.approx(0.5)


def test_window_clamps_at_bounds():
    spec = WindowSpec(window=350, level=1150)
    assert apply_window(np.array([[1150 - 200.0]]), spec)[0, 0] == 0.0
    assert apply_window(np.array([[1150 + 200.0]]), spec)[0, 0] == 1.0


def test_window_hand_computed_value():
    # (1237.5 - (1150 - 175)) / 350 = 262.5 / 350 = 0.75
    spec = WindowSpec(window=350, level=1150)
    assert apply_window(np.array([[1237.5]]), spec)[0, 0] == pytest.approx(0.75)


def test_window_monotone_and_bounded(rng):
    spec = WindowSpec(window=80, level=40)
    hu = np.sort(rng.uniform(-1000, 1000, size=256))
    out = apply_window(hu.reshape(1, -1), spec)[0]
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_window_width_must_be_positive():
    with pytest.raises(NonPositiveWindowError):
        WindowSpec(window=0, level=40)


# ---------------------------------------------------------------------------
# prediction records


def make_subvolume_record(**overrides):
    base = dict(
        patient_id="p1", model_id="m1", kind="SUBVOLUME",
        subvolume_start=4, flips=(False, True, False),
        label=COVID, confidence=0.75,
    )
    base.update(overrides)
    return PredictionRecord(**base)


def make_slice_record(**overrides):
    base = dict(
        patient_id="p1", model_id="m1", kind="SLICE",
        slice_index=3, probs=(0.25, 0.25, 0.5),
    )
    base.update(overrides)
    return PredictionRecord(**base)


def test_record_kind_field_rules():
    with pytest.raises(RecordInvariantError):
        make_subvolume_record(probs=(0.5, 0.25, 0.25))
    with pytest.raises(RecordInvariantError):
        make_slice_record(label=COVID)
    with pytest.raises(RecordInvariantError):
        make_slice_record(probs=(0.5, 0.5, 0.5))
    with pytest.raises(RecordInvariantError):
        make_subvolume_record(confidence=1.5)
    with pytest.raises(RecordInvariantError):
        PredictionRecord(patient_id="a,b", model_id="m", kind="SLICE",
                         slice_index=0, probs=(1.0, 0.0, 0.0))


def test_subvolume_line_format():
    line = format_record(make_subvolume_record())
    assert line == "p1,m1,SUBVOLUME,4,010,COVID,0.750000"
    assert parse_record(line) == make_subvolume_record()


def test_slice_line_format():
    line = format_record(make_slice_record())
    assert line == "p1,m1,SLICE,3,0.250000,0.250000,0.500000"
    assert parse_record(line) == make_slice_record()


def test_parse_reports_line_numbers(tmp_path):
    f = tmp_path / "preds.csv"
    f.write_text("p1,m1,SLICE,0,0.500000,0.250000,0.250000\np1,m1,SLICE,bad\n")
    with pytest.raises(MalformedRecordError, match="line 2"):
        read_predictions(f)
    f.write_text("p1,m1,SLICE,0,0.500000,0.500000,0.500000\n")
    with pytest.raises(RecordInvariantError, match="line 1"):
        read_predictions(f)


def test_empty_record_list_writes_empty_file(tmp_path):
    f = tmp_path / "empty.csv"
    write_predictions([], f)
    assert f.read_bytes() == b""
    assert read_predictions(f) == []


def random_canonical_records(rng, count):
    """Random records already at 6-decimal precision (the canonical grid)."""
    records = []
    for i in range(count):
        patient = f"p{rng.integers(0, 50):03d}"
        model = f"m{rng.integers(0, 4)}"
        if rng.random() < 0.5:
            records.append(PredictionRecord(
                patient_id=patient, model_id=model, kind="SUBVOLUME",
                subvolume_start=int(rng.integers(0, 16)),
                flips=tuple(bool(b) for b in rng.integers(0, 2, size=3)),
                label=COVID if rng.random() < 0.5 else NON_COVID,
                confidence=int(rng.integers(0, 1_000_001)) / 1e6,
            ))
        else:
            a = int(rng.integers(0, 1_000_001))
            b = int(rng.integers(0, 1_000_001 - a))
            probs = (a / 1e6, b / 1e6, (1_000_000 - a - b) / 1e6)
            records.append(PredictionRecord(
                patient_id=patient, model_id=model, kind="SLICE",
                slice_index=int(rng.integers(0, 600)), probs=probs,
            ))
    return records


def test_prediction_round_trip_identity(tmp_path, rng):
    records = random_canonical_records(rng, 1000)
    f = tmp_path / "preds.csv"
    write_predictions(records, f)
    assert read_predictions(f) == records


def test_prediction_write_read_write_is_byte_identical(tmp_path, rng):
    records = random_canonical_records(rng, 300)
    first = tmp_path / "a.csv"
    second = tmp_path / "b.csv"
    write_predictions(records, first)
    write_predictions(read_predictions(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_writer_canonicalizes_offgrid_probs(tmp_path):
    # thirds round to 0.333333 each; the residual lands on the largest entry
    rec = PredictionRecord(patient_id="p", model_id="m", kind="SLICE",
                           slice_index=0, probs=(1 / 3, 1 / 3, 1 / 3))
    f = tmp_path / "p.csv"
    write_predictions([rec], f)
    back = read_predictions(f)[0]
    assert sum(back.probs) == pytest.approx(1.0, abs=1e-12)
    assert f.read_text().count("0.333334") == 1


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=3, max_size=3)
       .filter(lambda ps: sum(ps) > 1e-9))
def test_canonical_prob_triple_sums_to_one(ps):
    total = sum(ps)
    triple = canonical_prob_triple([p / total for p in ps])
    assert sum(round(p * 1e6) for p in triple) == 1_000_000
    assert min(triple) >= 0.0


# ---------------------------------------------------------------------------
# label files


def test_labels_round_trip(tmp_path):
    labels = {"p2": COVID, "p10": NON_COVID, "p1": COVID}
    f = tmp_path / "labels.csv"
    write_labels(labels, f)
    assert f.read_text() == "p1,COVID\np10,NON_COVID\np2,COVID\n"
    assert read_labels(f) == labels


def test_labels_malformed(tmp_path):
    f = tmp_path / "labels.csv"
    f.write_text("p1,COVID\np2,WEIRD\n")
    with pytest.raises(MalformedRecordError, match="line 2"):
        read_labels(f)
    f.write_text("p1,COVID\np1,COVID\n")
    with pytest.raises(MalformedRecordError, match="duplicate"):
        read_labels(f)
