import struct

import numpy as np
import pytest

from lsrec import synthetic
from lsrec import tensor as tc
from lsrec import trainer
from lsrec.checkpoint import (
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
    VocabularyMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from lsrec.model import init_params, preset
from lsrec.packing import build_rows, first_fit, pack
from lsrec.promptgen import ALL_TASKS, TaskKind, TrainingExample, enumerate_training_set
from lsrec.trainer import EarlyStopping, TrainOptions, batch_loss, example_losses, train


def fake_example(n, uid=0, seed=0, vocab=40):
    rng = np.random.default_rng([seed, n])
    toks = tuple(int(t) for t in rng.integers(1, vocab, size=n))
    mask = (0,) * (n - 2) + (1, 1)
    return TrainingExample(toks, mask, TaskKind.MOVIE, uid)


@pytest.fixture(scope="module")
def tiny():
    c = synthetic.corpus(synthetic.SyntheticSpec(n_users=24, n_movies=30, mean_length=12, max_length=40,
                                                 seed=5))
    return c, preset("small", len(c.vocab), context_length=64)


def test_two_halves_fill_one_row():
    (b,) = pack([fake_example(100), fake_example(100, 1)], 200)
    assert b.num_rows == 1
    assert np.all(b.segment_ids[0] == np.repeat([0, 1], 100))
    assert b.positions[0, 100] == 0


def test_short_example_padded_and_masked():
    (b,) = pack([fake_example(150)], 200)
    assert b.num_rows == 1
    assert np.all(b.tokens[0, 150:] == 0)
    assert b.loss_mask[0, 150:].sum() == 0
    assert np.all(b.segment_ids[0, 150:] == 1)


def test_overlong_example_rejected():
    with pytest.raises(ValueError):
        pack([fake_example(201)], 200)


def test_first_fit_order():
    assert first_fit([120, 120, 80, 60, 10], 200) == [[0, 2], [1, 3, 4]]


def test_segment_mask_block_diagonal():
    (b,) = pack([fake_example(3), fake_example(2, 1)], 6)
    m = b.attention_mask[0].astype(int)
    want = np.array([
        [1, 0, 0, 0, 0, 0],
        [1, 1, 0, 0, 0, 0],
        [1, 1, 1, 0, 0, 0],
        [0, 0, 0, 1, 0, 0],
        [0, 0, 0, 1, 1, 0],
        [0, 0, 0, 0, 0, 1],
    ])
    assert np.array_equal(m, want)


def _cfg(vocab=40, t=48):
    return preset("small", vocab, context_length=t)


def test_packed_losses_match_unpacked():
    cfg = _cfg()
    p = init_params(cfg, 0, std=0.1)
    exs = [fake_example(n, i, seed=i) for i, n in enumerate([9, 20, 13, 5, 30, 17])]
    packed = {}
    for b in pack(exs, 48):
        packed.update(example_losses(b, p, cfg))
    for i, ex in enumerate(exs):
        (alone,) = pack([ex], len(ex))
        assert abs(packed[i] - example_losses(alone, p, cfg)[0]) <= 1e-5


def test_packed_gradients_match_sum_of_unpacked():
    cfg = _cfg()
    p = init_params(cfg, 1, std=0.1)
    exs = [fake_example(n, i, seed=10 + i) for i, n in enumerate([11, 25, 7, 19])]
    (b,) = pack(exs, 48, batch_rows=None)
    tc.backward(batch_loss(b, p, cfg, reduction="sum"))
    packed = {k: v.grad.copy() for k, v in p.items()}
    for v in p.values():
        v.grad = None
    for ex in exs:
        (alone,) = pack([ex], len(ex))
        tc.backward(batch_loss(alone, p, cfg, reduction="sum"))
    for k, v in p.items():
        scale = np.max(np.abs(v.grad)) + 1e-12
        assert np.max(np.abs(packed[k] - v.grad)) / scale <= 1e-4, k


def test_padding_row_leaves_loss_unchanged():
    cfg = _cfg()
    p = init_params(cfg, 2, std=0.1)
    exs = [fake_example(n, i, seed=i) for i, n in enumerate([20, 30])]
    seqs = [e.tokens for e in exs] + [(0,) * 10]
    masks = [e.loss_mask for e in exs] + [(0,) * 10]
    plain = build_rows(seqs, masks, [[0], [1]], 48)
    padded = build_rows(seqs, masks, [[0], [1], [2]], 48)
    with tc.no_grad():
        a = float(batch_loss(plain, p, cfg).data)
        b = float(batch_loss(padded, p, cfg).data)
    assert abs(a - b) <= 1e-6


def test_one_small_step_decreases_loss():
    cfg = _cfg()
    p = init_params(cfg, 3)
    (b,) = pack([fake_example(15)], 48)
    loss = batch_loss(b, p, cfg)
    before = float(loss.data)
    tc.backward(loss)
    grads = {k: v.grad for k, v in p.items()}
    tc.adamw_step(p, grads, tc.AdamWState(p), 1e-4)
    with tc.no_grad():
        assert float(batch_loss(b, p, cfg).data) < before


def test_early_stopping_counter():
    es = EarlyStopping(patience=1)
    assert es.update(1.0, 1)
    assert not es.update(1.5, 2) and not es.should_stop
    assert not es.update(1.2, 3) and es.should_stop
    assert es.best_epoch == 1


def test_patience_zero_stops_after_worsening(tiny, monkeypatch):
    corpus, cfg = tiny
    losses = iter([1.0, 2.0, 3.0, 4.0])
    snapshots = []
    real = trainer.validation_loss

    def worsening(batches, params, *a, **kw):
        real(batches, params, *a, **kw)
        snapshots.append({k: v.data.copy() for k, v in params.items()})
        return next(losses), 0.0

    monkeypatch.setattr(trainer, "validation_loss", worsening)
    res = train(corpus, cfg, TrainOptions(patience=0, max_epochs=10, batch_rows=4))
    assert len(res.history) == 2
    assert res.state.best_epoch == 1 and res.state.best_val_loss == 1.0
    assert all(np.array_equal(res.params[k].data, snapshots[0][k]) for k in snapshots[0])


def test_best_checkpoint_never_worse_than_best_seen(tiny):
    corpus, cfg = tiny
    res = train(corpus, cfg, TrainOptions(max_epochs=4, batch_rows=2, patience=1))
    assert res.state.best_val_loss == min(r.val_loss for r in res.history)


def test_deterministic_runs_bit_identical(tiny, tmp_path):
    corpus, cfg = tiny
    opts = TrainOptions(tasks=ALL_TASKS, seed=3, max_epochs=2, batch_rows=4)
    train(corpus, cfg, opts, checkpoint_path=tmp_path / "a.ckpt")
    train(corpus, cfg, opts, checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_multitask_epoch_has_five_examples_per_user(tiny):
    corpus, cfg = tiny
    res = train(corpus, cfg, TrainOptions(tasks=ALL_TASKS, max_epochs=1, batch_rows=4))
    assert res.history[0].examples == 5 * len(corpus.sequences)


def test_log_file_schema(tiny, tmp_path):
    corpus, cfg = tiny
    train(corpus, cfg, TrainOptions(max_epochs=2, batch_rows=8), log_path=tmp_path / "log.tsv")
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0] == trainer.LOG_HEADER
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["1", "2"]
    assert all(len(ln.split("\t")) == 7 for ln in lines)


def test_nonfinite_loss_aborts(tiny, monkeypatch):
    corpus, cfg = tiny
    real = trainer.batch_loss

    def poisoned(*a, **kw):
        out = real(*a, **kw)
        out.data = np.float32(np.nan)
        return out

    monkeypatch.setattr(trainer, "batch_loss", poisoned)
    with pytest.raises(trainer.TrainingDivergedError, match="epoch 1"):
        train(corpus, cfg, TrainOptions(max_epochs=1))


def test_vocab_size_must_match(tiny):
    corpus, _ = tiny
    with pytest.raises(ValueError):
        train(corpus, preset("small", len(corpus.vocab) + 1), TrainOptions(max_epochs=1))


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = preset("small", 50)
    p = init_params(cfg, 4)
    save_checkpoint(p, cfg, tmp_path / "m.ckpt", "abc", {"epoch": 3})
    q, cfg2, meta = load_checkpoint(tmp_path / "m.ckpt", vocab_hash="abc", config=cfg)
    assert cfg2 == cfg and meta["state"] == {"epoch": 3}
    assert list(q) == list(p)
    assert all(np.array_equal(p[k].data, q[k].data) for k in p)


def test_truncated_checkpoint_rejected(tmp_path):
    cfg = preset("small", 50)
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(cfg, 0), cfg, path, "abc")
    raw = path.read_bytes()
    for cut in (5, 40, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)


def test_checkpoint_guards(tmp_path):
    small = preset("small", 50)
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(small, 0), small, path, "abc")
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, config=preset("medium", 50))
    with pytest.raises(VocabularyMismatchError):
        load_checkpoint(path, vocab_hash="xyz")
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 8, 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_training_stream_uses_seeded_order(tiny):
    corpus, _ = tiny
    a = [e.user_id for e in enumerate_training_set(corpus, ALL_TASKS, 1, epoch=1)]
    b = [e.user_id for e in enumerate_training_set(corpus, ALL_TASKS, 1, epoch=2)]
    assert sorted(a) == sorted(b) and a != b
