"""Encoder model: shapes, partition bookkeeping, determinism, gradients."""

import numpy as np
import pytest

from rewirelm import tensor as T
from rewirelm.errors import ConfigError, LengthError, VocabError
from rewirelm.model import (
    CLS_ID,
    SEP_ID,
    ModelConfig,
    TransformerModel,
    init_params,
    pair_ids,
)

TINY = ModelConfig(
    vocab_size=16, d_model=8, n_layers=1, n_heads=2, d_ff=16,
    max_seq_len=16, dropout=0.0,
)


def rel_err(a, b):
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0).validate()
    ModelConfig().validate()


def test_init_deterministic():
    m1 = init_params(TINY, seed=9)
    m2 = init_params(TINY, seed=9)
    for k in m1.params:
        assert np.array_equal(m1.params[k].data, m2.params[k].data), k
    m3 = init_params(TINY, seed=10)
    assert not np.array_equal(m1.params["tok_emb"].data, m3.params["tok_emb"].data)


def test_init_statistics():
    cfg = ModelConfig(vocab_size=256, d_model=64, dropout=0.0)
    m = init_params(cfg, seed=0)
    emb = m.params["tok_emb"].data
    assert abs(emb.std() - 0.02) < 0.002
    assert abs(emb.mean()) < 0.002
    assert np.all(m.params["layer0.bq"].data == 0)
    assert np.all(m.params["ln_f.g"].data == 1)
    assert np.all(m.params["lm_bias"].data == 0)


def test_partition_counts_tied_and_untied():
    cfg = ModelConfig(vocab_size=64, d_model=16, n_layers=1, n_heads=2, d_ff=32,
                      max_seq_len=16, dropout=0.0, tie_lm_head=False)
    part = init_params(cfg, 0).partition()
    assert part.count("embedding") == 64 * 16 + (64 * 16 + 64)
    cfg_tied = ModelConfig(vocab_size=64, d_model=16, n_layers=1, n_heads=2, d_ff=32,
                           max_seq_len=16, dropout=0.0, tie_lm_head=True)
    part_tied = init_params(cfg_tied, 0).partition()
    assert part_tied.count("embedding") == 64 * 16 + 64


def test_partition_disjoint_exhaustive():
    m = init_params(TINY, 3)
    part = m.partition()
    emb, body = set(part.embedding), set(part.body)
    assert emb.isdisjoint(body)
    assert emb | body == set(m.params)
    total = part.count("embedding") + part.count("body")
    assert total == sum(t.data.size for t in m.params.values())
    # cls head belongs to the body group
    assert "cls_w" in part.body and "cls_b" in part.body
    assert "tok_emb" in part.embedding and "lm_bias" in part.embedding


def test_forward_mlm_shape_and_determinism():
    m = init_params(TINY, 1)
    ids = [4, 5, 6, 7, 4]
    out1 = m.forward_mlm(ids)
    out2 = m.forward_mlm(ids)
    assert out1.data.shape == (5, TINY.vocab_size)
    assert np.array_equal(out1.data, out2.data)  # eval is bit-deterministic
    assert np.all(np.isfinite(out1.data))


def test_forward_mlm_vocab_and_length_errors():
    m = init_params(TINY, 1)
    with pytest.raises(VocabError):
        m.forward_mlm([4, 99])
    with pytest.raises(VocabError):
        m.forward_mlm([-1])
    with pytest.raises(LengthError):
        m.forward_mlm([4] * (TINY.max_seq_len + 1))


def test_forward_cls_shape_and_length_guard():
    m = init_params(TINY, 2)
    out = m.forward_cls([4, 5, 6], [7, 8])
    assert out.data.shape == (TINY.n_classes,)
    # 2 specials + content must fit max_seq_len
    with pytest.raises(LengthError):
        m.forward_cls([4] * 8, [5] * 7)


def test_pair_ids_layout():
    ids = pair_ids([4, 5], [6])
    assert ids.tolist() == [CLS_ID, 4, 5, SEP_ID, 6]


def test_batch_matches_single_forward():
    m = init_params(TINY, 4)
    s1 = np.array([4, 5, 6, 7, 8, 9])
    s2 = np.array([10, 11, 4])
    ids = np.zeros((2, 6), dtype=np.int64)
    ids[0] = s1
    ids[1, :3] = s2
    flat = m.forward_mlm_batch(ids, [6, 3]).data.reshape(2, 6, -1)
    lone1 = m.forward_mlm(s1).data
    lone2 = m.forward_mlm(s2).data
    assert rel_err(flat[0], lone1) < 1e-5
    assert rel_err(flat[1, :3], lone2) < 1e-5


def test_cls_batch_matches_single():
    m = init_params(TINY, 5)
    pairs = [([4, 5, 6], [7, 8]), ([9, 10], [11, 12, 13, 4])]
    batch = m.forward_cls_batch(pairs).data
    for i, (a, b) in enumerate(pairs):
        single = m.forward_cls(a, b).data
        assert rel_err(batch[i], single) < 1e-5


def test_padding_does_not_leak():
    # same sequence, padded next to different neighbours -> same rows
    m = init_params(TINY, 6)
    s = np.array([4, 5, 6, 7])
    other_a = np.array([8, 9, 10, 11, 12, 13])
    other_b = np.array([13, 12, 11, 10, 9, 8])
    for other in (other_a, other_b):
        ids = np.zeros((2, 6), dtype=np.int64)
        ids[0, :4] = s
        ids[1] = other
        out = m.forward_mlm_batch(ids, [4, 6]).data.reshape(2, 6, -1)
        if other is other_a:
            ref = out[0, :4].copy()
        else:
            assert np.allclose(out[0, :4], ref, atol=1e-6)


def test_embedding_perturbation_moves_logits():
    m = init_params(TINY, 7)
    ids = [4, 5, 6]
    base = m.forward_mlm(ids).data.copy()
    m.params["tok_emb"].data[5] += 0.5
    moved = m.forward_mlm(ids).data
    assert not np.allclose(base, moved)


def test_body_perturbation_moves_logits():
    m = init_params(TINY, 7)
    ids = [4, 5, 6]
    base = m.forward_mlm(ids).data.copy()
    m.params["layer0.w1"].data[0, 0] += 0.5
    moved = m.forward_mlm(ids).data
    assert not np.allclose(base, moved)


def test_unused_embedding_row_only_affects_its_logit_column():
    # with a tied LM head, a row absent from the input still scores its own
    # vocabulary column, and nothing else
    m = init_params(TINY, 8)
    ids = [4, 5, 6]
    base = m.forward_mlm(ids).data.copy()
    # single-coordinate bump: a whole-row constant shift would be invisible
    # against the zero-mean layer-norm output
    m.params["tok_emb"].data[12, 3] += 0.25
    moved = m.forward_mlm(ids).data
    keep = np.ones(TINY.vocab_size, dtype=bool)
    keep[12] = False
    assert np.allclose(base[:, keep], moved[:, keep])
    assert not np.allclose(base[:, 12], moved[:, 12])


def test_untied_head_has_own_projection():
    cfg = ModelConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                      max_seq_len=16, dropout=0.0, tie_lm_head=False)
    m = init_params(cfg, 0)
    assert "lm_out" in m.params
    base = m.forward_mlm([4, 5]).data.copy()
    m.params["lm_out"].data[:] = 0.0
    flat = m.forward_mlm([4, 5]).data
    assert not np.allclose(base, flat)
    # with a zero output projection only the bias is left
    assert np.allclose(flat, np.zeros_like(flat))


def test_dropout_training_path_differs():
    cfg = ModelConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                      max_seq_len=16, dropout=0.3)
    m = init_params(cfg, 0)
    ev = m.forward_mlm([4, 5, 6]).data
    tr = m.forward_mlm([4, 5, 6], training=True, rng=np.random.default_rng(0)).data
    assert not np.allclose(ev, tr)


def _as_float64(m: TransformerModel):
    for t in m.params.values():
        t.data = t.data.astype(np.float64)
    return m


@pytest.mark.parametrize("seed", [0, 1])
def test_model_gradients_against_finite_differences(seed):
    """Sampled-coordinate FD check through the full MLM path."""
    m = _as_float64(init_params(TINY, 20 + seed))
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, TINY.vocab_size, size=7)
    tgt = rng.integers(4, TINY.vocab_size, size=7)
    mask = np.zeros(7, dtype=bool)
    mask[[1, 4]] = True

    def loss_value():
        return float(T.cross_entropy_masked(m.forward_mlm(ids), tgt, mask).data)

    m.zero_grads()
    with T.Tape():
        loss = T.cross_entropy_masked(m.forward_mlm(ids), tgt, mask)
    T.backward(loss)

    h = 1e-5
    checked = 0
    for name, p in m.params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = grad.ravel()
        idx = rng.choice(flat.size, size=min(4, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value()
            flat[i] = keep - h
            down = loss_value()
            flat[i] = keep
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(gflat[i]), 1e-8)
            assert abs(fd - gflat[i]) / scale < 1e-3, f"{name}[{i}] fd={fd} got={gflat[i]}"
            checked += 1
    assert checked > 40


def test_cls_gradients_against_finite_differences():
    m = _as_float64(init_params(TINY, 33))
    rng = np.random.default_rng(33)
    a = rng.integers(4, TINY.vocab_size, size=5)
    b = rng.integers(4, TINY.vocab_size, size=4)

    def loss_value():
        logits = m.forward_cls(a, b)
        return float(T.cross_entropy_masked(T.reshape(logits, (1, -1)), [2], [True]).data)

    m.zero_grads()
    with T.Tape():
        logits = m.forward_cls(a, b)
        loss = T.cross_entropy_masked(T.reshape(logits, (1, -1)), [2], [True])
    T.backward(loss)

    assert m.params["cls_w"].grad is not None
    h = 1e-5
    for name in ("cls_w", "tok_emb", "layer0.wv", "ln_f.g"):
        p = m.params[name]
        flat = p.data.ravel()
        gflat = p.grad.ravel()
        for i in rng.choice(flat.size, size=3, replace=False):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value()
            flat[i] = keep - h
            down = loss_value()
            flat[i] = keep
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(gflat[i]), 1e-8)
            assert abs(fd - gflat[i]) / scale < 1e-3, name


def test_clone_is_deep():
    m = init_params(TINY, 40)
    c = m.clone()
    c.params["tok_emb"].data[0, 0] += 1.0
    assert m.params["tok_emb"].data[0, 0] != c.params["tok_emb"].data[0, 0]
