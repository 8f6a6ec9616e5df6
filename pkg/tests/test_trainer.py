import copy
import json
import math
import warnings

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from clsa.config import TrainConfig
from clsa.data import synth_dataset
from clsa.encoder import as_batch
from clsa.trainer import (
    CheckpointError,
    checkpoint_path,
    init_state,
    load_checkpoint,
    lr_at,
    make_views,
    pretrain,
    save_checkpoint,
    train_step,
)

TINY = {
    "batch_size": 8,
    "bank_size": 64,
    "arch.width": 8,
    "arch.depths": [1, 1],
    "arch.hidden_dim": 16,
    "arch.embed_dim": 8,
    "arch.gn_groups": 4,
    "weak.crop_size": 16,
    "strong.crop_sizes": [8],
}


def tiny(**overrides) -> TrainConfig:
    return TrainConfig().with_overrides({**TINY, **overrides})


@pytest.fixture(scope="module")
def data():
    return synth_dataset(0, 4, 16, (32, 32))


def _batch(data, n=8, offset=0):
    return list(data.images[offset:offset + n])


# learning-rate schedule

def test_lr_examples():
    assert lr_at(0, 100, TrainConfig(batch_size=256)) == 0.03
    assert lr_at(0, 100, TrainConfig(batch_size=512, bank_size=4096)) == pytest.approx(0.06)
    assert lr_at(50, 100, TrainConfig(batch_size=256)) == pytest.approx(0.015)


def test_lr_endpoints_exact():
    cfg = TrainConfig(batch_size=128, base_lr=0.05)
    assert lr_at(0, 37, cfg) == cfg.lr
    assert lr_at(37, 37, cfg) == 0.0


def test_lr_is_cosine_and_monotone():
    cfg = TrainConfig()
    values = [lr_at(s, 40, cfg) for s in range(41)]
    for s, v in enumerate(values):
        assert v == pytest.approx(cfg.lr * 0.5 * (1 + math.cos(math.pi * s / 40)), abs=1e-15)
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_at(41, 40, cfg)


# single steps

def test_views_are_seeded_per_step_and_sample(data):
    cfg = tiny()
    a = make_views(_batch(data), cfg, step=3)
    b = make_views(_batch(data), cfg, step=3)
    c = make_views(_batch(data), cfg, step=4)
    np.testing.assert_array_equal(a.query, b.query)
    np.testing.assert_array_equal(a.strong[0], b.strong[0])
    assert not np.array_equal(a.query, c.query)
    assert a.query.shape == (8, 3, 16, 16) and a.strong[0].shape == (8, 3, 8, 8)


def test_weak_views_match_across_modes(data):
    clsa = make_views(_batch(data), tiny(), step=0)
    base = make_views(_batch(data), tiny(**{"loss.mode": "baseline"}), step=0)
    np.testing.assert_array_equal(clsa.query, base.query)
    np.testing.assert_array_equal(clsa.key, base.key)
    assert base.strong == []


def test_momentum_and_key_path_isolation(data):
    cfg = tiny(key_momentum=0.999)
    state = init_state(cfg)
    for i in range(3):
        key_prev = [p.clone() for p in state.pair.key.parameters()]
        train_step(state, _batch(data, offset=i))
        # the key encoder moves only through the convex combination with the updated query
        for kp, k, q in zip(key_prev, state.pair.key.parameters(), state.pair.query.parameters()):
            torch.testing.assert_close(k, 0.999 * kp + 0.001 * q, rtol=0, atol=1e-7)
            assert not k.requires_grad


def test_bank_receives_keys_after_loss(data):
    cfg = tiny()
    state = init_state(cfg)
    before = state.bank.snapshot()
    train_step(state, _batch(data))
    after = state.bank.snapshot()
    assert state.bank.cursor == 8
    assert torch.equal(after[8:], before[8:])
    assert not torch.equal(after[:8], before[:8])
    torch.testing.assert_close(after[:8].norm(dim=1), torch.ones(8))


def test_bank_turnover_after_one_epoch(data):
    # N = 64 images, K = 64 slots
    cfg = tiny(epochs=1)
    state = init_state(cfg)
    initial = state.bank.snapshot()
    for b in range(8):
        train_step(state, _batch(data, offset=8 * b))
    now = state.bank.snapshot()
    matches = (now[:, None, :] == initial[None, :, :]).all(-1)
    assert not matches.any()


def test_baseline_has_zero_ddm_and_still_updates(data):
    state = init_state(tiny(**{"loss.mode": "baseline"}))
    q0 = [p.clone() for p in state.pair.query.parameters()]
    k0 = [p.clone() for p in state.pair.key.parameters()]
    bank0 = state.bank.snapshot()
    rec = train_step(state, _batch(data))
    assert rec["loss_ddm"] == [0.0]
    assert rec["loss"] == rec["loss_contrastive"]
    assert any(not torch.equal(a, b) for a, b in zip(q0, state.pair.query.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(k0, state.pair.key.parameters()))
    assert not torch.equal(bank0, state.bank.snapshot())


def _reference_moco_step(pair, bank, views, cfg, lr):
    """Plain momentum-contrast step written out independently."""
    q = F.normalize(pair.query(as_batch(views.query)), dim=1)
    with torch.no_grad():
        k = F.normalize(pair.key(as_batch(views.key)), dim=1)
    logits = torch.cat([(q * k).sum(1, keepdim=True), q @ bank.T], dim=1) / cfg.loss.tau
    loss = F.cross_entropy(logits, torch.zeros(len(q), dtype=torch.long))
    opt = torch.optim.SGD(pair.query.parameters(), lr=lr, momentum=cfg.sgd_momentum,
                          weight_decay=cfg.weight_decay)
    opt.zero_grad()
    loss.backward()
    opt.step()
    with torch.no_grad():
        for pk, pq in zip(pair.key.parameters(), pair.query.parameters()):
            pk.copy_(cfg.key_momentum * pk + (1 - cfg.key_momentum) * pq)
    return loss.item(), k


def test_baseline_equals_reference_moco_step(data):
    cfg = tiny(**{"loss.mode": "baseline", "loss.beta": 7.0})
    state = init_state(cfg)
    state.total_steps = 10
    ref_pair = copy.deepcopy(state.pair)
    ref_bank = state.bank.snapshot()
    views = make_views(_batch(data), cfg, step=0)

    rec = train_step(state, _batch(data))
    ref_loss, ref_keys = _reference_moco_step(ref_pair, ref_bank, views, cfg, lr_at(0, 10, cfg))

    assert rec["loss"] == pytest.approx(ref_loss, abs=1e-6)
    for a, b in zip(state.pair.query.parameters(), ref_pair.query.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)
    for a, b in zip(state.pair.key.parameters(), ref_pair.key.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)
    torch.testing.assert_close(state.bank.snapshot()[:8], ref_keys, rtol=0, atol=1e-6)


@pytest.mark.parametrize("mode", ["clsa", "one_hot_ddm", "strong_query_contrastive", "strong_query_and_key"])
def test_every_mode_runs(data, mode):
    state = init_state(tiny(**{"loss.mode": mode, "strong.crop_sizes": [8, 12]}))
    rec = train_step(state, _batch(data))
    assert math.isfinite(rec["loss"])
    assert len(rec["loss_ddm"]) == 2


def test_non_finite_loss_aborts(data):
    state = init_state(tiny())
    with torch.no_grad():
        next(state.pair.query.parameters()).fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="step 0"):
        train_step(state, _batch(data))


# full runs

def test_two_runs_have_identical_loss_traces(data, tmp_path):
    cfg = tiny(epochs=2)
    a = pretrain(cfg, data, tmp_path / "a")
    b = pretrain(cfg, data, tmp_path / "b")
    assert len(a.history) == 16
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]


def test_worker_threads_do_not_change_results(data, tmp_path):
    a = pretrain(tiny(epochs=1), data, tmp_path / "a")
    b = pretrain(tiny(epochs=1, num_workers=2), data, tmp_path / "b")
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]


def test_metrics_file_records(data, tmp_path):
    pretrain(tiny(epochs=1), data, tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    steps = [l for l in lines if l["type"] == "step"]
    epochs = [l for l in lines if l["type"] == "epoch"]
    assert len(steps) == 8 and len(epochs) == 1
    for key in ("step", "epoch", "lr", "loss_contrastive", "loss_ddm", "p_pos_mean", "wall_time"):
        assert key in steps[0]
    assert epochs[0]["loss_contrastive"] == pytest.approx(np.mean([s["loss_contrastive"] for s in steps]))


def test_zero_epochs_writes_initial_checkpoint(data, tmp_path):
    state = pretrain(tiny(epochs=0), data, tmp_path)
    assert state.step == 0 and state.history == []
    assert checkpoint_path(tmp_path, 0).is_file()


def test_resume_reproduces_uninterrupted_run(data, tmp_path):
    cfg = tiny(epochs=2, checkpoint_every=1)
    full = pretrain(cfg, data, tmp_path / "full")
    resumed = pretrain(cfg, data, tmp_path / "resumed", resume=checkpoint_path(tmp_path / "full", 1))
    assert resumed.step == full.step
    full_losses = [r["loss"] for r in full.history[8:]]
    resumed_losses = [r["loss"] for r in resumed.history[8:]]
    np.testing.assert_allclose(resumed_losses, full_losses, rtol=0, atol=1e-6)


def test_interrupted_run_resumes_next_step(data, tmp_path):
    cfg = tiny(epochs=1)
    full = pretrain(cfg, data, tmp_path / "full")
    part = pretrain(cfg, data, tmp_path / "part", max_steps=3)
    save_checkpoint(part, tmp_path / "part.pt")
    state = load_checkpoint(tmp_path / "part.pt")
    state.total_steps = full.total_steps
    rec = train_step(state, [data.images[i] for i in _order(cfg, data)[24:32]])
    assert rec["loss"] == pytest.approx(full.history[3]["loss"], abs=1e-6)


def _order(cfg, data):
    from clsa.trainer import epoch_order

    return epoch_order(cfg, 0, len(data))


def test_checkpoint_round_trip_is_byte_identical(data, tmp_path):
    state = pretrain(tiny(epochs=1), data, tmp_path)
    first = save_checkpoint(state, tmp_path / "a.pt")
    second = save_checkpoint(load_checkpoint(first), tmp_path / "b.pt")
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_restores_fields(data, tmp_path):
    state = pretrain(tiny(epochs=1), data, tmp_path)
    back = load_checkpoint(checkpoint_path(tmp_path, 1))
    assert (back.step, back.epoch, back.total_steps) == (state.step, state.epoch, state.total_steps)
    assert back.history == state.history
    assert back.bank.cursor == state.bank.cursor
    assert torch.equal(back.bank.snapshot(), state.bank.snapshot())
    for a, b in zip(back.pair.key.parameters(), state.pair.key.parameters()):
        assert torch.equal(a, b)


def test_checkpoint_config_mismatch_warns(data, tmp_path):
    state = pretrain(tiny(epochs=1), data, tmp_path)
    path = save_checkpoint(state, tmp_path / "c.pt")
    with pytest.warns(UserWarning, match="config hash mismatch"):
        back = load_checkpoint(path, tiny(epochs=5))
    assert back.cfg.epochs == 5
    train_step(back, _batch(data))


def test_truncated_checkpoint_is_corrupt(data, tmp_path):
    state = init_state(tiny())
    path = save_checkpoint(state, tmp_path / "x.pt")
    path.write_bytes(path.read_bytes()[:200])
    with pytest.raises(CheckpointError, match="corrupt checkpoint"):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="checkpoint not found"):
        load_checkpoint(tmp_path / "nope.pt")


def test_dataset_smaller_than_batch(tmp_path):
    with pytest.raises(ValueError, match="smaller than batch_size"):
        pretrain(tiny(), synth_dataset(0, 2, 2), tmp_path)


def test_one_epoch_lowers_contrastive_loss(tmp_path):
    # Random initial bank rows are easier negatives than real keys, so L_C
    # climbs while they are replaced. With N = K that lasts the whole epoch.
    cfg = TrainConfig(epochs=1, batch_size=32, bank_size=1024)
    state = pretrain(cfg, synth_dataset(0, 4, 256, (32, 32)), tmp_path)
    lc = [r["loss_contrastive"] for r in state.history]
    assert len(lc) == 32
    assert np.mean(lc[-10:]) < np.mean(lc[:10])
