import struct

import numpy as np
import pytest

from effective_context import data
from effective_context.data import FormatError, SyntheticTaskSpec, generate


def test_radius_zero_sum_mod_is_symbol_mod_c():
    sym = np.array([0, 3, 7, 2, 5])
    np.testing.assert_array_equal(data.window_labels(sym, 0, 3, "window_sum_mod"), sym % 3)


def test_radius_one_center_label():
    labels = data.window_labels(np.array([2, 3, 4]), 1, 5, "window_sum_mod")
    assert labels[1] == 4
    # edge windows are clipped, not dropped
    assert labels[0] == (2 + 3) % 5 and labels[2] == (3 + 4) % 5


def test_majority_labels_and_center_tie_break():
    sym = np.array([1, 0, 1, 1, 0, 0])
    lab = data.window_labels(sym, 1, 2, "window_majority", 2)
    # t=0 window [1,0] ties -> centre symbol 1; t=5 window [0,0] -> 0
    np.testing.assert_array_equal(lab, [1, 1, 1, 1, 0, 0])


def test_smooth_regression_is_moving_average():
    v = np.array([1.0, 2.0, 3.0, 10.0])
    np.testing.assert_allclose(data.moving_average(v, 1), [1.5, 2.0, 5.0, 6.5])


@pytest.mark.parametrize("kind", ["window_majority", "window_sum_mod", "window_hash", "smooth_regression"])
def test_generation_is_deterministic(kind):
    spec = SyntheticTaskSpec(context_radius=2, task_kind=kind, seed=11, vocab_size=4, num_classes=4)
    a = generate(spec, 5, 5, 12)
    b = generate(spec, 5, 5, 12)
    assert a.equals(b)
    assert not a.equals(generate(spec, 5, 5, 12, split="dev"))


def test_min_len_must_cover_window():
    with pytest.raises(ValueError, match="2\\*radius\\+1"):
        generate(SyntheticTaskSpec(context_radius=3), 2, 6, 10)


@pytest.mark.parametrize("kind", ["window_majority", "window_sum_mod"])
def test_labels_only_depend_on_the_window(kind):
    """Truncating to W >= r around t leaves the label function unchanged."""
    rng = np.random.default_rng(0)
    r, C = 3, 4
    for _ in range(20):
        sym = rng.integers(0, 4, 30)
        full = data.window_labels(sym, r, C, kind, 4)
        for W in (r, r + 2):
            for t in range(len(sym)):
                lo, hi = max(0, t - W), min(len(sym), t + W + 1)
                sub = data.window_labels(sym[lo:hi], r, C, kind, 4)
                assert sub[t - lo] == full[t]


def test_default_labels_are_class_balanced():
    spec = SyntheticTaskSpec(context_radius=2, seed=5)
    ds = generate(spec, 300, 20, 60)
    y = np.concatenate(ds.labels)
    assert y.size >= 10_000
    freq = np.bincount(y, minlength=spec.num_classes) / y.size
    assert np.all(np.abs(freq - 1 / spec.num_classes) <= 0.1 / spec.num_classes)


def test_sum_mod_labels_balanced_when_vocab_multiple_of_classes():
    spec = SyntheticTaskSpec(context_radius=2, task_kind="window_sum_mod", vocab_size=8, num_classes=4)
    y = np.concatenate(generate(spec, 300, 20, 60).labels)
    freq = np.bincount(y, minlength=4) / y.size
    assert np.all(np.abs(freq - 0.25) <= 0.025)


# -- CTXM format -------------------------------------------------------------

def test_round_trip_is_bit_exact(tmp_path):
    ds = generate(SyntheticTaskSpec(seed=3), 4, 5, 9)
    path = tmp_path / "d.ctxm"
    data.save_matrix(ds, path)
    back = data.load_matrix(path)
    assert back.equals(ds)
    assert back.meta == ds.meta and back.frame_rate_hz == ds.frame_rate_hz


def test_round_trip_real_labels(tmp_path):
    ds = generate(SyntheticTaskSpec(task_kind="smooth_regression"), 3, 5, 9)
    data.save_matrix(ds, tmp_path / "r.ctxm")
    back = data.load_matrix(tmp_path / "r.ctxm")
    assert back.equals(ds) and back.label_kind == data.LABEL_REAL


def test_hand_built_two_frame_file(tmp_path):
    payload = (b"CTXM" + struct.pack("<II", 1, 1) + struct.pack("<III", 2, 2, 0)
               + struct.pack("<4f", 1.5, -2.0, 0.25, 8.0) + struct.pack("<2I", 3, 1))
    path = tmp_path / "hand.ctxm"
    path.write_bytes(payload)
    ds = data.load_matrix(path)
    np.testing.assert_array_equal(ds.features[0], [[1.5, -2.0], [0.25, 8.0]])
    np.testing.assert_array_equal(ds.labels[0], [3, 1])
    assert data.dump_matrix(ds) == payload


def test_empty_file_is_rejected(tmp_path):
    (tmp_path / "e.ctxm").write_bytes(b"")
    with pytest.raises(FormatError) as exc:
        data.load_matrix(tmp_path / "e.ctxm")
    assert exc.value.offset == 0


@pytest.mark.parametrize("mutate, offset", [
    (lambda b: b"XTXM" + b[4:], 0),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], 4),
    (lambda b: b[:-3], 24),
    (lambda b: b + b"\x00", 48),
])
def test_malformed_payload_reports_offset(tmp_path, mutate, offset):
    payload = (b"CTXM" + struct.pack("<II", 1, 1) + struct.pack("<III", 2, 2, 0)
               + struct.pack("<4f", 1.5, -2.0, 0.25, 8.0) + struct.pack("<2I", 3, 1))
    with pytest.raises(FormatError) as exc:
        data.parse_matrix(mutate(payload))
    assert exc.value.offset == offset
    assert f"byte offset {offset}" in str(exc.value)
