import math

import numpy as np
import pytest

from effective_context import measure, streaming
from effective_context.data import Dataset
from effective_context.fixtures import ConvFixture
from effective_context.model import ModelConfig, TransformerEncoder
from effective_context.streaming import StreamingConfig, evaluate_streaming, stream_extract
from effective_context.train import ProbeClassifier

CFG = ModelConfig(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16, input_dim=4, seed=5)


def model():
    return TransformerEncoder(CFG, np.float64)


def dataset(n=3, seed=0):
    rng = np.random.default_rng(seed)
    feats = [rng.standard_normal((int(rng.integers(5, 10)), 4)) for _ in range(n)]
    return Dataset(feats, [rng.integers(0, 3, len(x)).astype(np.uint32) for x in feats],
                   meta={"num_classes": 3})


def probe(layer=2):
    rng = np.random.default_rng(1)
    return ProbeClassifier(rng.standard_normal((8, 3)), rng.standard_normal(3), layer)


def test_window_lengths():
    wins = StreamingConfig(history=2, lookahead=1).windows(6)
    assert [(lo, hi) for lo, hi, _ in wins] == [(0, 2), (0, 3), (0, 4), (1, 5), (2, 6), (3, 6)]
    # length = min(H, t) + 1 + min(L, T - 1 - t)
    for lo, hi, t in wins:
        assert hi - lo == min(2, t) + 1 + min(1, 5 - t)


def test_latency_and_validation():
    assert StreamingConfig(lookahead=10).latency_s(50.0) == pytest.approx(0.2)
    assert StreamingConfig(lookahead=None).latency_s(50.0) == math.inf
    with pytest.raises(ValueError):
        StreamingConfig(history=-1)
    with pytest.raises(ValueError):
        StreamingConfig(stride=0)


def test_unlimited_windows_reproduce_full_context_bit_identically():
    m = model()
    x = np.random.default_rng(2).standard_normal((9, 4))
    full = measure.full_states(m, x, [2])[2]
    got = stream_extract(m, x, StreamingConfig(history=None, lookahead=9, layer=2))
    assert np.array_equal(got, full)


def test_zero_history_and_lookahead_encodes_frames_alone():
    m = model()
    x = np.random.default_rng(3).standard_normal((5, 4))
    got = stream_extract(m, x, StreamingConfig(history=0, lookahead=0, layer=-1))
    want = np.stack([measure.full_states(m, x[t:t + 1], [2])[2][0] for t in range(5)])
    assert np.array_equal(got, want)


def test_conv_fixture_needs_one_frame_each_side():
    ds = dataset()
    res = evaluate_streaming(ConvFixture(), ds, StreamingConfig(history=1, lookahead=1))
    assert res.mean_l2_dev == 0.0 and res.frames == ds.num_frames
    assert evaluate_streaming(ConvFixture(), ds, StreamingConfig(history=1, lookahead=0)).mean_l2_dev > 0


def test_chunked_stride_is_flagged_and_covers_every_frame():
    cfg = StreamingConfig(history=1, lookahead=0, stride=3)
    wins = cfg.windows(7)
    assert [t for _, _, t in wins] == list(range(7))
    # frames of one chunk share the chunk's window
    assert {(lo, hi) for lo, hi, t in wins if t < 3} == {(0, 3)}
    assert cfg.approximate and not StreamingConfig().approximate


def test_full_cell_equals_baseline_and_probe_is_unchanged():
    ds, p = dataset(), probe()
    before = p.checksum()
    rows = streaming.sweep(model(), p, ds, [None, 1], [None, 0, 2])
    assert p.checksum() == before
    by_key = {(r[2], r[3]): r for r in rows}
    full = evaluate_streaming(model(), ds, StreamingConfig(None, None), p)
    assert by_key[(-1, -1)][4] == full.full_error
    assert by_key[(-1, -1)][5] == 0.0
    assert by_key[(1, 0)][0] == pytest.approx(1 / 50)
    assert all(r[6] == ds.num_frames for r in rows)


def test_parallel_evaluation_matches_serial():
    ds, p = dataset(n=5, seed=4), probe()
    cfg = StreamingConfig(history=2, lookahead=1)
    a = evaluate_streaming(model(), ds, cfg, p, threads=1)
    b = evaluate_streaming(model(), ds, cfg, p, threads=4)
    assert a.mean_l2_dev == b.mean_l2_dev and a.probe_error == b.probe_error


def test_deviation_shrinks_with_lookahead_on_trained_model(suite):
    run = suite.run(2)
    test = run["test"].subset(range(15))
    devs = [evaluate_streaming(run["model"], test, StreamingConfig(None, L)).mean_l2_dev
            for L in (0, 1, 2, 4, 8, None)]
    assert all(b <= a + 1e-6 for a, b in zip(devs, devs[1:]))
    assert devs[-1] == 0.0
