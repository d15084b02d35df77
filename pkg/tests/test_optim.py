"""Schedules, Adam, clipping, and the two-group training step."""

import numpy as np
import pytest

from rewirelm import tensor as T
from rewirelm.errors import NumericError, PreconditionError
from rewirelm.model import ModelConfig, init_params
from rewirelm.optim import (
    AdamState,
    ForgettingConfig,
    ScheduleSpec,
    TrainState,
    adam_step,
    clip_global_norm,
    default_emb_schedule,
    lr_schedule,
    post_reset_statistics,
    training_step,
)
from rewirelm.tensor import Tensor

TINY = ModelConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                   max_seq_len=16, dropout=0.0)


# ---------------------------------------------------------------------------
# schedule


def test_schedule_reference_points():
    spec = ScheduleSpec(peak_lr=7e-4, warmup_updates=10_000, total_updates=125_000)
    assert lr_schedule(spec, 0) == 0.0
    assert lr_schedule(spec, 10_000) == pytest.approx(7e-4)
    assert lr_schedule(spec, 5_000) == pytest.approx(3.5e-4)
    assert lr_schedule(spec, 125_000) == 0.0
    assert lr_schedule(spec, 300_000) == 0.0


def test_schedule_piecewise_linear_and_monotone():
    spec = ScheduleSpec(peak_lr=1e-3, warmup_updates=100, total_updates=1000, end_lr=1e-4)
    ramp = [lr_schedule(spec, n) for n in range(0, 101)]
    assert all(b >= a for a, b in zip(ramp, ramp[1:]))
    decay = [lr_schedule(spec, n) for n in range(100, 1001)]
    assert all(b <= a for a, b in zip(decay, decay[1:]))
    # midpoint of decay
    assert lr_schedule(spec, 550) == pytest.approx((1e-3 + 1e-4) / 2)
    assert lr_schedule(spec, 5000) == 1e-4


def test_schedule_zero_warmup_starts_at_peak():
    spec = ScheduleSpec(peak_lr=1e-3, warmup_updates=0, total_updates=10)
    assert lr_schedule(spec, 0) == pytest.approx(1e-3)


def test_schedule_rejects_negative_step_and_bad_spec():
    spec = ScheduleSpec(peak_lr=1e-3, warmup_updates=10, total_updates=100)
    with pytest.raises(PreconditionError):
        lr_schedule(spec, -1)
    with pytest.raises(PreconditionError):
        ScheduleSpec(peak_lr=1e-3, warmup_updates=20, total_updates=10).validate()


# ---------------------------------------------------------------------------
# adam


def _one_param(value):
    p = Tensor(np.array([value], dtype=np.float32), requires_grad=True)
    return {"p": p}


def test_adam_single_step_worked_example():
    params = _one_param(1.0)
    state = AdamState(params, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step(params, {"p": np.array([0.5], dtype=np.float32)}, state, lr=0.1, step_index=1)
    # bias correction makes the first update exactly lr * sign-ish magnitude:
    # mhat = 0.5, vhat = 0.25 -> delta = 0.1 * 0.5 / (0.5 + 1e-8)
    assert params["p"].data[0] == pytest.approx(0.9, abs=1e-6)
    assert state.steps == 1


def test_adam_zero_gradient_is_noop():
    params = _one_param(2.5)
    state = AdamState(params)
    adam_step(params, {"p": np.zeros(1, dtype=np.float32)}, state, lr=0.1, step_index=1)
    assert params["p"].data[0] == 2.5
    assert np.all(state.m["p"] == 0) and np.all(state.v["p"] == 0)


def test_adam_rejects_step_zero():
    params = _one_param(1.0)
    state = AdamState(params)
    with pytest.raises(PreconditionError):
        adam_step(params, {"p": np.ones(1, dtype=np.float32)}, state, lr=0.1, step_index=0)


def test_adam_descends_quadratic():
    params = _one_param(0.0)
    state = AdamState(params, beta2=0.999, eps=1e-8)
    losses = []
    for t in range(1, 200):
        p = params["p"].data[0]
        losses.append((p - 3.0) ** 2)
        g = np.array([2 * (p - 3.0)], dtype=np.float32)
        adam_step(params, {"p": g}, state, lr=0.05, step_index=t)
    assert losses[-1] < 0.01 * losses[0]


def test_adam_state_zero_resets_counter_and_moments():
    params = _one_param(1.0)
    state = AdamState(params)
    adam_step(params, {"p": np.ones(1, dtype=np.float32)}, state, lr=0.1, step_index=1)
    assert state.steps == 1 and state.m["p"][0] != 0
    state.zero()
    assert state.steps == 0
    assert np.all(state.m["p"] == 0) and np.all(state.v["p"] == 0)


# ---------------------------------------------------------------------------
# clipping


def test_clip_scales_to_bound():
    g = [np.array([3.0, 4.0], dtype=np.float32)]
    norm = clip_global_norm(g, 0.5)
    assert norm == pytest.approx(5.0)
    assert np.allclose(g[0], [0.3, 0.4], atol=1e-6)


def test_clip_under_bound_untouched():
    g = [np.array([0.1, 0.2], dtype=np.float32)]
    before = g[0].copy()
    norm = clip_global_norm(g, 0.5)
    assert norm == pytest.approx(np.sqrt(0.05))
    assert np.array_equal(g[0], before)  # bitwise: no scaling applied


def test_clip_is_global_across_tensors():
    a = np.full(16, 1.0, dtype=np.float32)
    b = np.full(9, 1.0, dtype=np.float32)
    norm = clip_global_norm([a, b], 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt((a ** 2).sum() + (b ** 2).sum())
    assert total == pytest.approx(1.0, rel=1e-5)


def test_clip_rejects_nonfinite():
    with pytest.raises(NumericError):
        clip_global_norm([np.array([np.nan], dtype=np.float32)], 1.0)
    with pytest.raises(NumericError):
        clip_global_norm([np.array([np.inf], dtype=np.float32)], 1.0)


# ---------------------------------------------------------------------------
# training_step


def _mlm_batch(seed=0, B=4, S=8, V=16):
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, V, size=(B, S))
    lengths = np.full(B, S)
    targets = rng.integers(4, V, size=B * S)
    mask = rng.random(B * S) < 0.3
    mask[0] = True
    return ids, lengths, targets, mask


def _loss_fn(model, batch):
    ids, lengths, targets, mask = batch
    logits = model.forward_mlm_batch(ids, lengths)
    return T.cross_entropy_masked(logits, targets, mask)


def _fresh(seed=0, k=5, peak=1e-3, enabled=True):
    model = init_params(TINY, seed)
    state = TrainState(model, seed=seed)
    body = ScheduleSpec(peak_lr=peak, warmup_updates=3, total_updates=50)
    fc = ForgettingConfig(k=k, emb_schedule=default_emb_schedule(peak, k), enabled=enabled)
    return model, state, body, fc


def test_training_step_reset_timing():
    model, state, body, fc = _fresh(k=5)
    batch = _mlm_batch()
    flags = []
    for n in range(1, 13):
        m = training_step(model, state, batch, body, fc, n, loss_fn=_loss_fn)
        flags.append(m.reset)
    assert [n for n, f in zip(range(1, 13), flags) if f] == [5, 10]


def test_embedding_counter_follows_mod_k():
    model, state, body, fc = _fresh(k=4)
    batch = _mlm_batch()
    seen = []
    for n in range(1, 10):
        training_step(model, state, batch, body, fc, n, loss_fn=_loss_fn)
        seen.append(state.n_emb)
    assert seen == [1, 2, 3, 0, 1, 2, 3, 0, 1]


def test_reset_redraws_embeddings_and_zeroes_moments():
    model, state, body, fc = _fresh(k=3)
    batch = _mlm_batch()
    for n in range(1, 3):
        training_step(model, state, batch, body, fc, n, loss_fn=_loss_fn)
    before = model.params["tok_emb"].data.copy()
    m_before = state.adam_emb.m["tok_emb"].copy()
    assert np.any(m_before != 0)
    metrics = training_step(model, state, batch, body, fc, 3, loss_fn=_loss_fn)
    assert metrics.reset
    assert metrics.lr_emb == 0.0
    after = model.params["tok_emb"].data
    assert not np.array_equal(before, after)
    assert np.all(state.adam_emb.m["tok_emb"] == 0)
    assert np.all(state.adam_emb.v["tok_emb"] == 0)
    assert state.adam_emb.steps == 0
    # draw looks like N(0, 0.02)
    assert 0.015 < after.std() < 0.025
    assert abs(after.mean()) < 0.01


def test_consecutive_resets_draw_different_values():
    model, state, body, fc = _fresh(k=2)
    batch = _mlm_batch()
    draws = []
    for n in range(1, 7):
        m = training_step(model, state, batch, body, fc, n, loss_fn=_loss_fn)
        if m.reset:
            draws.append(model.params["tok_emb"].data.copy())
    assert len(draws) == 3
    assert not np.array_equal(draws[0], draws[1])
    assert not np.array_equal(draws[1], draws[2])


def test_body_updates_on_reset_step():
    model, state, body, fc = _fresh(k=3)
    batch = _mlm_batch()
    for n in range(1, 3):
        training_step(model, state, batch, body, fc, n, loss_fn=_loss_fn)
    body_before = model.params["layer0.w1"].data.copy()
    training_step(model, state, batch, body, fc, 3, loss_fn=_loss_fn)
    assert not np.array_equal(body_before, model.params["layer0.w1"].data)


def test_steps_must_arrive_in_order():
    model, state, body, fc = _fresh()
    batch = _mlm_batch()
    training_step(model, state, batch, body, fc, 1, loss_fn=_loss_fn)
    with pytest.raises(PreconditionError):
        training_step(model, state, batch, body, fc, 3, loss_fn=_loss_fn)


def test_disabled_forgetting_matches_single_group_loop():
    """With forgetting off and matching schedules, the two-group step must be
    bit-identical to a plain single-group Adam loop."""
    steps = 30
    body = ScheduleSpec(peak_lr=1e-3, warmup_updates=5, total_updates=100)
    fc = ForgettingConfig(k=7, emb_schedule=body, enabled=False)
    batches = [_mlm_batch(seed=s) for s in range(steps)]

    m_two = init_params(TINY, 11)
    st = TrainState(m_two, seed=11)
    for n in range(1, steps + 1):
        training_step(m_two, st, batches[n - 1], body, fc, n, loss_fn=_loss_fn)

    m_ref = init_params(TINY, 11)
    ref_state = AdamState(m_ref.parameters())
    for n in range(1, steps + 1):
        m_ref.zero_grads()
        with T.Tape():
            loss = _loss_fn(m_ref, batches[n - 1])
        T.backward(loss)
        grads = {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in m_ref.parameters().items()
        }
        clip_global_norm(list(grads.values()), 0.5)
        adam_step(m_ref.parameters(), grads, ref_state, lr_schedule(body, n), n)

    for k in m_two.params:
        assert np.array_equal(m_two.params[k].data, m_ref.params[k].data), k


def test_numeric_failure_leaves_state_untouched():
    model, state, body, fc = _fresh()
    batch = _mlm_batch()
    training_step(model, state, batch, body, fc, 1, loss_fn=_loss_fn)
    params_before = {k: p.data.copy() for k, p in model.params.items()}
    m_before = {k: a.copy() for k, a in state.adam_body.m.items()}

    def bad_loss(model, batch):
        return Tensor(np.float32(np.nan))

    with pytest.raises(NumericError):
        training_step(model, state, batch, body, fc, 2, loss_fn=bad_loss)
    for k, p in model.params.items():
        assert np.array_equal(p.data, params_before[k]), k
    for k, a in state.adam_body.m.items():
        assert np.array_equal(a, m_before[k]), k
    assert state.n_body == 1
    # and the next in-order step still works
    training_step(model, state, batch, body, fc, 2, loss_fn=_loss_fn)


def test_post_reset_statistics_window():
    cfg = ModelConfig(vocab_size=256, d_model=64, dropout=0.0)
    model = init_params(cfg, 0)
    state = TrainState(model, seed=0)
    from rewirelm.optim import reset_embedding_group

    reset_embedding_group(state.partition, state.reset_rng, 0.02)
    mean, std = post_reset_statistics(state.partition.embedding)
    assert abs(mean) < 0.001
    assert 0.018 <= std <= 0.022


def test_default_emb_schedule_shape():
    s = default_emb_schedule(7e-4, 250)
    assert s.warmup_updates == 25
    assert s.total_updates == 250
    assert s.end_lr == pytest.approx(7e-5)
    # restart: rate right after a reset is small but nonzero
    assert 0 < lr_schedule(s, 1) < 7e-4 / 10
