import numpy as np
import pytest

from effective_context.data import Dataset, SyntheticTaskSpec, generate
from effective_context.model import ModelConfig, TransformerEncoder
from effective_context.train import (ProbeClassifier, TrainConfig, TrainingDiverged, evaluate,
                                     frame_error_rate, length_batches, probe_error, train_probe,
                                     train_supervised)

SMALL = dict(num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, input_dim=16)


def tiny_task(seed=0, n=40, radius=0):
    spec = SyntheticTaskSpec(context_radius=radius, seed=seed)
    return generate(spec, n, 5, 12), generate(spec, 10, 5, 12, "dev")


# -- frame error rate --------------------------------------------------------

def test_frame_error_rate_examples():
    assert frame_error_rate(np.array([1, 2, 3]), np.array([1, 2, 3])) == 0.0
    assert frame_error_rate(np.array([0, 0]), np.array([1, 1])) == 1.0
    assert frame_error_rate(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0])) == 0.25


def test_frame_error_rate_rejects_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        frame_error_rate(np.array([0, 1]), np.array([0]))


def test_frame_error_rate_is_order_invariant():
    rng = np.random.default_rng(0)
    preds = [rng.integers(0, 3, n) for n in (4, 7, 2)]
    labels = [rng.integers(0, 3, n) for n in (4, 7, 2)]
    perm = [2, 0, 1]
    assert frame_error_rate(preds, labels) == frame_error_rate([preds[i] for i in perm],
                                                               [labels[i] for i in perm])


# -- supervised training -----------------------------------------------------

def test_same_seed_gives_identical_first_epoch():
    train, dev = tiny_task()
    cfg = TrainConfig(epochs=1, batch_size=8, warmup_steps=5)
    a = train_supervised(ModelConfig(**SMALL), train, cfg, dev)
    b = train_supervised(ModelConfig(**SMALL), train, cfg, dev)
    assert a.history[0]["train_loss"] == b.history[0]["train_loss"]
    assert a.model.checksum() == b.model.checksum()


def test_loss_falls_during_first_epoch():
    train, _ = tiny_task(n=80)
    losses = []
    cfg = TrainConfig(epochs=1, batch_size=4, warmup_steps=5)
    model_cfg = ModelConfig(**SMALL)
    before = evaluate(TransformerEncoder(model_cfg), train)["loss"]
    res = train_supervised(model_cfg, train, cfg, callback=losses.append)
    assert evaluate(res.model, train)["loss"] < before
    assert len(losses) == 1


def test_constant_labels_are_learned_quickly():
    train, dev = tiny_task()
    const = lambda ds: Dataset(ds.features, [np.zeros_like(y) for y in ds.labels], split=ds.split,
                               meta={"num_classes": 2})
    res = train_supervised(ModelConfig(**SMALL), const(train), TrainConfig(epochs=3, batch_size=8,
                                                                           warmup_steps=5), const(dev))
    assert res.final["dev_error"] == 0.0


def test_divergence_reports_epoch():
    train, _ = tiny_task()
    bad = Dataset([x * np.float32("nan") for x in train.features], train.labels)
    with pytest.raises(TrainingDiverged) as exc:
        train_supervised(ModelConfig(**SMALL), bad, TrainConfig(epochs=2))
    assert exc.value.epoch == 1


def test_head_must_match_labels():
    train, _ = tiny_task()
    with pytest.raises(ValueError, match="head"):
        train_supervised(ModelConfig(head="regressor", **SMALL), train, TrainConfig(epochs=1))


def test_length_batches_cover_every_utterance_once():
    train, _ = tiny_task(n=23)
    batches = length_batches(train, 4, np.random.default_rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(23))


# -- probes ------------------------------------------------------------------

def test_zero_probe_is_at_chance():
    train, _ = tiny_task(n=200)
    model = TransformerEncoder(ModelConfig(**SMALL), np.float64)
    probe = ProbeClassifier(np.zeros((16, 2)), np.zeros(2), 2)
    # every frame predicts class 0, so the error is the share of class-1 frames
    err = probe_error(model, probe, train)
    assert err == pytest.approx(0.5, abs=0.03)


def test_probe_leaves_model_untouched_and_round_trips(tmp_path):
    train, dev = tiny_task()
    model = TransformerEncoder(ModelConfig(**SMALL), np.float64)
    before = model.checksum()
    probe = train_probe(model, 1, train, dev=dev)
    assert model.checksum() == before
    probe.save(tmp_path / "p.npz")
    back = ProbeClassifier.load(tmp_path / "p.npz")
    assert back.checksum() == probe.checksum() and back.source_layer == 1


def test_probe_rejects_bad_layer():
    train, _ = tiny_task()
    with pytest.raises(ValueError, match="layer"):
        train_probe(TransformerEncoder(ModelConfig(**SMALL)), 3, train)


# -- trained task models (shared, session-scoped) ------------------------------

def test_radius_zero_model_reaches_low_dev_error(suite):
    run = suite.run(0)
    assert run["result"].final["dev_error"] < 0.05


def test_final_layer_probe_matches_head(suite):
    run = suite.run(2)
    head = evaluate(run["model"], run["test"])["error"]
    assert abs(probe_error(run["model"], run["probe"], run["test"]) - head) < 0.02


def test_layer_zero_probe_lacks_context(suite):
    run = suite.run(8)
    low = train_probe(run["model"], 0, run["train"].subset(range(200)), dev=run["dev"])
    e0 = probe_error(run["model"], low, run["test"])
    eL = probe_error(run["model"], run["probe"], run["test"])
    assert e0 > eL + 0.15
