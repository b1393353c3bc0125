import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evcsnn.event_io import (
    EVENT_DTYPE,
    DatasetFormatError,
    EncodingMode,
    Event,
    EventBatch,
    EventParseError,
    EventRangeError,
    SensorGeometry,
    bin_to_frames,
    decode_dataset,
    encode_dataset,
    generate_synthetic,
    make_events,
    parse_event_csv,
    read_dataset,
    sample_batches,
    slice_into_batches,
    split_train_val,
    write_dataset,
)

SMALL = SensorGeometry(32, 32)


# -- CSV ----------------------------------------------------------------------


def test_parse_single_line():
    ev = parse_event_csv("1000,5,7,1")
    assert len(ev) == 1
    assert tuple(ev[0]) == (1000, 5, 7, 1)


def test_parse_empty():
    assert len(parse_event_csv("")) == 0


def test_parse_header_and_crlf():
    text = "timestamp,x,y,polarity\r\n10,1,2,0\r\n20,3,4,1\r\n"
    ev = parse_event_csv(io.StringIO(text, newline=""))
    assert ev["t"].tolist() == [10, 20]
    assert ev["p"].tolist() == [0, 1]


def test_parse_x_out_of_range():
    with pytest.raises(EventRangeError):
        parse_event_csv("1000,500,7,1", SensorGeometry(240, 180))


def test_parse_bad_polarity():
    with pytest.raises(EventRangeError):
        parse_event_csv("1,1,1,2")


@pytest.mark.parametrize("text,line", [("1,2,3\n", 1), ("1,2,3,0\n5,a,3,1\n", 2), ("1,2,3,0,9", 1)])
def test_parse_malformed_reports_line(text, line):
    with pytest.raises(EventParseError) as info:
        parse_event_csv(text, source="rec.csv")
    assert info.value.line == line
    assert f"rec.csv:{line}" in str(info.value)


# -- slicing ------------------------------------------------------------------


def test_slice_nine_seconds():
    ev = make_events((t, 0, 0, 1) for t in range(0, 9_000_000, 250_000))
    batches = slice_into_batches(ev, 3_000_000, label=2, subject=1)
    assert len(batches) == 3
    assert all(b.duration == 3_000_000 and b.label == 2 and b.subject == 1 for b in batches)


def test_slice_boundary_half_open():
    ev = make_events([(3_000_000, 1, 1, 0)])
    (b,) = slice_into_batches(ev, 3_000_000, 0, 0)
    assert b.events["t"].tolist() == [0]
    assert list(b) == [Event(0, 1, 1, 0)]


def test_slice_two_events():
    ev = make_events([(500_000, 1, 1, 0), (4_100_000, 2, 2, 1)])
    batches = slice_into_batches(ev, 3_000_000, 0, 0)
    assert [len(b) for b in batches] == [1, 1]
    assert batches[1].events["t"].tolist() == [1_100_000]


def test_slice_unsorted():
    with pytest.raises(ValueError):
        slice_into_batches(make_events([(5, 0, 0, 0), (1, 0, 0, 0)]), 10, 0, 0)


@settings(max_examples=60, deadline=None)
@given(
    times=st.lists(st.integers(0, 10_000), max_size=60),
    window=st.integers(1, 3_000),
)
def test_slice_partitions_events(times, window):
    times = sorted(times)
    ev = make_events((t, i % 7, i % 5, i % 2) for i, t in enumerate(times)) if times else np.empty(0, EVENT_DTYPE)
    batches = slice_into_batches(ev, window, 0, 0)
    for b in batches:
        b.validate()
    assert sum(len(b) for b in batches) == len(times)
    # un-rebase: batches come out in order of the non-empty window indices
    rebuilt = []
    starts = sorted({t // window for t in times})
    for start, b in zip(starts, batches):
        chunk = b.events.copy()
        chunk["t"] += np.uint64(start * window)
        rebuilt.append(chunk)
    if rebuilt:
        np.testing.assert_array_equal(np.concatenate(rebuilt), ev)


# -- sampling and splitting ------------------------------------------------------


def _batches(labels):
    return [EventBatch(lbl, i, 1000, make_events([(i % 1000, 0, 0, 0)])) for i, lbl in enumerate(labels)]


def test_sample_three_distinct():
    batches = _batches([0] * 10)
    picked = sample_batches(batches, 3, np.random.default_rng(5))
    assert len({id(b) for b in picked}) == 3


def test_sample_all_and_deterministic():
    batches = _batches([0] * 6)
    assert {id(b) for b in sample_batches(batches, 6, np.random.default_rng(0))} == {id(b) for b in batches}
    a = sample_batches(batches, 3, np.random.default_rng(11))
    b = sample_batches(batches, 3, np.random.default_rng(11))
    assert [x.subject for x in a] == [x.subject for x in b]


def test_sample_too_many():
    with pytest.raises(ValueError):
        sample_batches(_batches([0] * 2), 3, np.random.default_rng(0))


def test_split_seventy_thirty():
    train, val = split_train_val(_batches([0] * 10), 0.7, np.random.default_rng(0))
    assert (len(train), len(val)) == (7, 3)


def test_split_floor_rule():
    train, val = split_train_val(_batches([4] * 3), 0.5, np.random.default_rng(0))
    assert (len(train), len(val)) == (1, 2)


def test_split_709_batch_subset_counts():
    # 709 batches over 24 classes; this class profile sums to 709 and under the
    # per-class floor rule gives the reported 495 / 214 division
    counts = [30] * 22 + [24, 25]
    assert sum(counts) == 709
    labels = [c for c, n in enumerate(counts) for _ in range(n)]
    train, val = split_train_val(_batches(labels), 0.7, np.random.default_rng(0))
    assert (len(train), len(val)) == (495, 214)


def test_split_empty_and_bad_fraction():
    with pytest.raises(ValueError):
        split_train_val([], 0.7, np.random.default_rng(0))
    with pytest.raises(ValueError):
        split_train_val(_batches([0]), 1.0, np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(
    labels=st.lists(st.integers(0, 5), min_size=1, max_size=80),
    frac=st.floats(0.05, 0.95),
    seed=st.integers(0, 2**64 - 1),
)
def test_split_properties(labels, frac, seed):
    data = _batches(labels)
    train, val = split_train_val(data, frac, np.random.default_rng(seed))
    ids_t, ids_v = {id(b) for b in train}, {id(b) for b in val}
    assert not ids_t & ids_v
    assert ids_t | ids_v == {id(b) for b in data}
    for c in set(labels):
        n = labels.count(c)
        assert sum(b.label == c for b in train) == math.floor(frac * n)


# -- binning --------------------------------------------------------------------


def test_bin_count_default_windows():
    frames = bin_to_frames(EventBatch(0, 0, 3_000_000, make_events([])), 100_000)
    assert frames.shape == (30, 2, 180, 240)


def test_bin_single_event_polarity_split():
    batch = EventBatch(0, 0, 1_000_000, make_events([(150_000, 3, 4, 1)]))
    frames = bin_to_frames(batch, 100_000, EncodingMode.POLARITY_SPLIT, SMALL)
    assert frames.sum() == 1
    assert frames[1, 1, 4, 3] == 1


def test_bin_merged_ignores_polarity():
    batch = EventBatch(0, 0, 200_000, make_events([(10, 3, 4, 1), (20, 3, 4, 0), (30, 5, 5, 0)]))
    frames = bin_to_frames(batch, 100_000, EncodingMode.MERGED, SMALL)
    assert frames.shape == (2, 1, 32, 32)
    assert frames.sum() == 2 and frames[0, 0, 4, 3] == 1


def test_bin_saturates():
    batch = EventBatch(0, 0, 100_000, make_events([(1, 2, 2, 1), (2, 2, 2, 1), (3, 2, 2, 1)]))
    frames = bin_to_frames(batch, 100_000, EncodingMode.POLARITY_SPLIT, SMALL)
    assert frames.max() == 1 and frames.sum() == 1


def test_bin_partial_last_window():
    batch = EventBatch(0, 0, 250_000, make_events([(240_000, 0, 0, 0)]))
    frames = bin_to_frames(batch, 100_000, "polarity", SMALL)
    assert frames.shape[0] == 3 and frames[2, 0, 0, 0] == 1


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(0, 300),
    seed=st.integers(0, 2**32 - 1),
    bin_window=st.integers(1_000, 500_000),
)
def test_bin_conservation(n, seed, bin_window):
    rng = np.random.default_rng(seed)
    duration = 1_000_000
    ev = np.empty(n, EVENT_DTYPE)
    ev["t"] = np.sort(rng.integers(0, duration, n))
    ev["x"] = rng.integers(0, 6, n)
    ev["y"] = rng.integers(0, 5, n)
    ev["p"] = rng.integers(0, 2, n)
    geo = SensorGeometry(6, 5)
    frames = bin_to_frames(EventBatch(0, 0, duration, ev), bin_window, "polarity", geo)
    distinct = {(int(t) // bin_window, int(p), int(y), int(x)) for t, x, y, p in ev}
    assert int(frames.sum()) == len(distinct)
    assert set(np.unique(frames)) <= {0, 1}


# -- synthetic ------------------------------------------------------------------


def test_synthetic_deterministic_and_valid():
    a = generate_synthetic(2, SMALL, 1_000_000, 20, np.random.default_rng(3), num_classes=4)
    b = generate_synthetic(2, SMALL, 1_000_000, 20, np.random.default_rng(3), num_classes=4)
    assert a == b
    a.validate(SMALL)
    assert len(a) == 100 * 20


def test_synthetic_classes_differ():
    a = generate_synthetic(0, SMALL, 1_000_000, 20, np.random.default_rng(3), num_classes=4)
    b = generate_synthetic(1, SMALL, 1_000_000, 20, np.random.default_rng(3), num_classes=4)
    assert a != b
    fa = bin_to_frames(a, 1_000_000, "merged", SMALL)[0, 0].astype(bool)
    fb = bin_to_frames(b, 1_000_000, "merged", SMALL)[0, 0].astype(bool)
    assert (fa ^ fb).sum() > 0.1 * fa.sum()


def test_synthetic_full_geometry():
    geo = SensorGeometry()
    batch = generate_synthetic(23, geo, 3_000_000, 50, np.random.default_rng(0))
    batch.validate(geo)


def test_synthetic_errors():
    with pytest.raises(ValueError):
        generate_synthetic(0, SMALL, 0, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate_synthetic(4, SMALL, 10, 10, np.random.default_rng(0), num_classes=4)


# -- dataset file ---------------------------------------------------------------


def _three():
    rng = np.random.default_rng(9)
    return [generate_synthetic(c, SMALL, 300_000, 5, rng, num_classes=3, subject=c + 1) for c in range(3)]


def test_dataset_round_trip(tmp_path):
    data = _three()
    path = tmp_path / "d.evds"
    write_dataset(path, data)
    back = read_dataset(path)
    assert back == data
    write_dataset(tmp_path / "again.evds", back)
    assert (tmp_path / "again.evds").read_bytes() == path.read_bytes()


def test_dataset_empty_round_trip(tmp_path):
    write_dataset(tmp_path / "e.evds", [])
    assert (tmp_path / "e.evds").read_bytes() == b"EVDS\x01\x00"
    assert read_dataset(tmp_path / "e.evds") == []


def test_dataset_layout_by_hand():
    batch = EventBatch(3, 7, 1_000, make_events([(5, 1, 2, 1)]))
    expected = (
        b"EVDS" + (1).to_bytes(2, "little")
        + (3).to_bytes(2, "little") + (7).to_bytes(2, "little")
        + (1000).to_bytes(8, "little") + (1).to_bytes(8, "little")
        + (5).to_bytes(8, "little") + (1).to_bytes(2, "little") + (2).to_bytes(2, "little") + b"\x01"
    )
    assert encode_dataset([batch]) == expected


@pytest.mark.parametrize("cut", [1, 5, 13, 20])
def test_dataset_truncated(cut):
    data = encode_dataset(_three())
    with pytest.raises(DatasetFormatError):
        decode_dataset(data[:-cut])


def test_dataset_bad_magic_and_version():
    data = encode_dataset(_three())
    with pytest.raises(DatasetFormatError):
        decode_dataset(b"XXXX" + data[4:])
    with pytest.raises(DatasetFormatError):
        decode_dataset(data[:4] + b"\x09\x00" + data[6:])
