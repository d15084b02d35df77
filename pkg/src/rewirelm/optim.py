"""Two-group optimization: schedules, Adam, clipping, periodic resets.

The training step treats the model as two parameter groups.  The body
follows the global update counter n; the embedding group follows its own
counter n_emb, which restarts every k updates when forgetting is enabled.
At each restart the embedding parameters are redrawn from N(0, reset_std)
and their Adam moments are zeroed, so each episode relearns embeddings
against an ever-more-settled body.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericError, PreconditionError, ShapeError

RESET_STREAM = 0x5EED


@dataclass(frozen=True)
class ScheduleSpec:
    """Linear warmup to peak_lr, then linear decay to end_lr at total_updates."""

    peak_lr: float
    warmup_updates: int
    total_updates: int
    end_lr: float = 0.0

    def validate(self):
        if self.peak_lr < 0 or self.end_lr < 0:
            raise PreconditionError("learning rates must be nonnegative")
        if not 0 <= self.warmup_updates <= self.total_updates:
            raise PreconditionError(
                f"warmup {self.warmup_updates} must lie within total {self.total_updates}"
            )
        return self


def lr_schedule(spec: ScheduleSpec, n: int) -> float:
    """Learning rate at update n (n=0 is the pre-training point, rate 0)."""
    if n < 0:
        raise PreconditionError(f"update index must be >= 0, got {n}")
    spec.validate()
    if n < spec.warmup_updates:
        return spec.peak_lr * n / spec.warmup_updates
    if n >= spec.total_updates:
        return spec.end_lr
    span = spec.total_updates - spec.warmup_updates
    frac = (n - spec.warmup_updates) / span
    return spec.peak_lr + (spec.end_lr - spec.peak_lr) * frac


class AdamState:
    """First/second moment buffers plus a step counter for one param group."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.98, eps=1e-6):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.steps = 0

    def zero(self):
        for buf in self.m.values():
            buf[:] = 0.0
        for buf in self.v.values():
            buf[:] = 0.0
        self.steps = 0

    def snapshot(self):
        return (
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.steps,
        )

    def restore(self, snap):
        m, v, steps = snap
        for k in self.m:
            self.m[k][:] = m[k]
            self.v[k][:] = v[k]
        self.steps = steps


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, step_index: int):
    """One bias-corrected Adam update, in place.

    step_index is 1-based; bias correction divides by 1 - beta^t, which is
    undefined at t=0, hence the hard precondition.
    """
    if step_index < 1:
        raise PreconditionError(f"adam step_index must be >= 1, got {step_index}")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** step_index
    bc2 = 1.0 - b2 ** step_index
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
    state.steps = step_index


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale the whole gradient list so its joint L2 norm is <= max_norm.

    Returns the pre-clip norm.  Scaling happens in place and only when the
    norm strictly exceeds the bound.
    """
    if max_norm <= 0:
        raise PreconditionError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel(), g.ravel()))
    if not math.isfinite(total):
        raise NumericError("clip_global_norm: gradients contain non-finite values")
    norm = math.sqrt(total)
    if norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= g.dtype.type(s)
    return norm


@dataclass(frozen=True)
class ForgettingConfig:
    """Periodic embedding-reset policy.

    k: updates per episode; the embedding counter is n mod k and hitting 0
    triggers a reset.  emb_schedule drives the embedding learning rate off
    that episode-local counter.  With enabled=False both groups simply
    follow their schedules and nothing is ever reset.
    """

    k: int
    emb_schedule: ScheduleSpec
    reset_std: float = 0.02
    enabled: bool = True

    def validate(self):
        if self.k < 1:
            raise PreconditionError(f"forgetting interval k must be >= 1, got {self.k}")
        if self.reset_std <= 0:
            raise PreconditionError("reset_std must be positive")
        self.emb_schedule.validate()
        return self


def default_emb_schedule(peak_lr: float, k: int) -> ScheduleSpec:
    """Episode-local schedule: 10% warmup, decay to a tenth of peak."""
    return ScheduleSpec(
        peak_lr=peak_lr,
        warmup_updates=max(1, round(0.1 * k)),
        total_updates=k,
        end_lr=0.1 * peak_lr,
    )


@dataclass
class StepMetrics:
    n: int
    loss: float
    lr_body: float
    lr_emb: float
    grad_norm: float
    reset: bool


class TrainState:
    """Optimizer + counter state for two-group training."""

    def __init__(self, model, *, beta1=0.9, beta2=0.98, eps=1e-6, seed=0):
        self.partition = model.partition()
        self.adam_emb = AdamState(self.partition.embedding, beta1, beta2, eps)
        self.adam_body = AdamState(self.partition.body, beta1, beta2, eps)
        self.n_body = 0
        self.n_emb = 0
        self.reset_rng = np.random.default_rng(np.random.SeedSequence((seed, RESET_STREAM)))


def reset_embedding_group(partition, rng: np.random.Generator, std: float):
    """Redraw every embedding-group tensor from N(0, std), in place."""
    for t in partition.embedding.values():
        t.data[...] = rng.normal(0.0, std, t.data.shape).astype(t.data.dtype)


def post_reset_statistics(embedding_params) -> tuple:
    """(mean, std) over every entry of the embedding group."""
    flat = np.concatenate([np.asarray(t.data).ravel() for t in embedding_params.values()])
    return float(flat.mean()), float(flat.std())


def training_step(model, state: TrainState, batch, schedules: ScheduleSpec,
                  forgetting: ForgettingConfig, n: int, *, loss_fn,
                  clip_norm: float = 0.5) -> StepMetrics:
    """One full two-group update at global step n (1-based).

    `schedules` drives the body group off n; the embedding group runs off
    forgetting.emb_schedule indexed by the episode-local counter.  Order of
    operations: counters -> rates -> forward/backward -> clip -> body Adam
    -> embedding reset or embedding Adam.  On a reset step the embedding
    Adam update is skipped entirely: the freshly drawn parameters are the
    episode's starting point and their moments stay zero.

    A non-finite loss or gradient raises NumericError before any parameter
    or optimizer mutation, so a failed step leaves everything untouched.
    """
    if n != state.n_body + 1:
        raise PreconditionError(f"expected step {state.n_body + 1}, got {n}")
    forgetting.validate()

    n_emb = n % forgetting.k if forgetting.enabled else n
    lr_body = lr_schedule(schedules, n)
    lr_emb = lr_schedule(forgetting.emb_schedule, n_emb)

    model.zero_grads()
    with T.Tape():
        loss = loss_fn(model, batch)
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        raise NumericError(f"training_step: loss is {loss_val} at step {n}")
    T.backward(loss)

    params = model.parameters()
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    grad_norm = clip_global_norm(list(grads.values()), clip_norm)

    part = state.partition
    adam_step(part.body, {k: grads[k] for k in part.body}, state.adam_body, lr_body, n)

    reset = bool(forgetting.enabled and n_emb == 0)
    if reset:
        reset_embedding_group(part, state.reset_rng, forgetting.reset_std)
        state.adam_emb.zero()
    else:
        adam_step(part.embedding, {k: grads[k] for k in part.embedding},
                  state.adam_emb, lr_emb, n_emb)

    state.n_body = n
    state.n_emb = n_emb
    return StepMetrics(n=n, loss=loss_val, lr_body=lr_body, lr_emb=lr_emb,
                       grad_norm=grad_norm, reset=reset)
