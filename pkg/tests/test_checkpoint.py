"""Tests for bit-exact checkpoint persistence and resume."""

import json
import os

import numpy as np
import pytest

from sscent import (
    AugmentationPolicy,
    EntropyGate,
    TrainConfig,
    evaluate,
    generate_gaussian_clusters,
    init_train_state,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train,
    train_step,
)


def fixture_dataset(seed=0):
    ds = generate_gaussian_clusters(3, 6, 40, 1.0, 10.0, seed)
    return split_dataset(ds, labels_per_class=4, test_fraction=0.25, seed=seed)


def fixture_config(**overrides):
    base = dict(labeled_batch_size=4, mu=2, epochs=2, steps_per_epoch=4,
                hidden_dims=(8,), embed_dim=4, seed=0, eval_every=3)
    base.update(overrides)
    return TrainConfig(**base)


def test_round_trip_restores_everything_bit_exactly(tmp_path):
    ds = fixture_dataset()
    cfg = fixture_config()
    state, history = train(cfg, ds)
    path = tmp_path / "run.npz"
    save_checkpoint(path, cfg, state)
    back_cfg, back = load_checkpoint(path)

    assert back_cfg == cfg
    assert back.step == state.step
    for a, b in zip(back.encoder.parameters(), state.encoder.parameters()):
        assert np.array_equal(a, b)
    for a, b in zip(back.opt.velocities, state.opt.velocities):
        assert np.array_equal(a, b)
    assert np.array_equal(back.bank.prototypes, state.bank.prototypes)
    assert np.array_equal(back.bank.class_ids, state.bank.class_ids)
    assert np.array_equal(back.proto_opt.velocities[0],
                          state.proto_opt.velocities[0])
    assert back.rng.bit_generator.state == state.rng.bit_generator.state
    assert back.history == state.history
    # history keeps both blank and recorded eval entries
    accs = [m.test_acc for m in back.history]
    assert any(a is None for a in accs) and any(a is not None for a in accs)


def test_restored_rng_continues_the_same_stream(tmp_path):
    ds = fixture_dataset()
    cfg = fixture_config()
    state, _ = train(cfg, ds)
    path = tmp_path / "rng.npz"
    save_checkpoint(path, cfg, state)
    _, back = load_checkpoint(path)
    assert np.array_equal(state.rng.random(16), back.rng.random(16))


def test_resume_reproduces_uninterrupted_metrics(tmp_path):
    ds = fixture_dataset()
    full_cfg = fixture_config(epochs=3)
    full_csv = tmp_path / "full.csv"
    train(full_cfg, ds, metrics_path=full_csv)

    # simulate an interruption: run the first 4 steps of the same schedule
    # by hand, checkpoint, then let train() finish from the restored state
    state = init_train_state(full_cfg, ds)
    gate = EntropyGate.for_classes(ds.num_classes, full_cfg.tau,
                                   full_cfg.tau_ent, full_cfg.w_min)
    policy = AugmentationPolicy(full_cfg.weak_sigma, full_cfg.strong_sigma,
                                full_cfg.strong_dropout)
    t_total = full_cfg.epochs * full_cfg.steps_per_epoch
    for gstep in range(4):
        m = train_step(state, full_cfg, gate, policy, ds.labeled_features(),
                       ds.labeled_labels(), ds.unlabeled_features(), t_total)
        if (gstep + 1) % full_cfg.eval_every == 0:
            m.test_acc = evaluate(state.encoder, state.bank,
                                  ds.test_features(), ds.test_labels(),
                                  full_cfg.t_prime)
        state.history.append(m)
    ckpt = tmp_path / "part.npz"
    save_checkpoint(ckpt, full_cfg, state)

    saved_cfg, saved_state = load_checkpoint(ckpt)
    assert saved_cfg == full_cfg
    assert saved_state.step == 4
    resumed_csv = tmp_path / "resumed.csv"
    train(full_cfg, ds, state=saved_state, metrics_path=resumed_csv)

    assert resumed_csv.read_bytes() == full_csv.read_bytes()


def test_save_is_atomic_and_overwrites(tmp_path):
    ds = fixture_dataset()
    cfg = fixture_config()
    state, _ = train(cfg, ds)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, cfg, state)
    assert not os.path.exists(f"{path}.tmp")
    first = path.read_bytes()
    save_checkpoint(path, cfg, state)
    assert path.read_bytes() == first


def test_unknown_format_version_rejected(tmp_path):
    ds = fixture_dataset()
    cfg = fixture_config()
    state, _ = train(cfg, ds)
    path = tmp_path / "ok.npz"
    save_checkpoint(path, cfg, state)

    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays["meta"].item())
    meta["format_version"] = 99
    arrays["meta"] = np.array(json.dumps(meta))
    bad = tmp_path / "bad.npz"
    with open(bad, "wb") as fh:
        np.savez(fh, **arrays)

    with pytest.raises(ValueError) as err:
        load_checkpoint(bad)
    assert "99" in str(err.value)


def test_architecture_mismatch_rejected(tmp_path):
    ds = fixture_dataset()
    cfg = fixture_config()
    state, _ = train(cfg, ds)
    path = tmp_path / "ok.npz"
    save_checkpoint(path, cfg, state)

    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays["meta"].item())
    meta["config"]["hidden_dims"] = [16]  # widths no longer match param_0
    arrays["meta"] = np.array(json.dumps(meta))
    bad = tmp_path / "mismatch.npz"
    with open(bad, "wb") as fh:
        np.savez(fh, **arrays)

    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_missing_checkpoint_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.npz")
