"""Training stages and checkpoint plumbing.

The cross-lingual rewiring pipeline runs in four stages:

1. pretrain         — masked-LM training on the base language, optionally
                      with periodic embedding resets,
2. adapt_language   — relearn embeddings only, on a token budget of target-
                      language text, body frozen,
3. adapt_task       — train body + classification head on base-language
                      pair data, embeddings frozen,
4. assemble         — splice stage-2 embeddings onto the stage-3 body and
                      evaluate zero-shot on the target language.

Checkpoints live in a directory: a JSON manifest plus params.bin (raw
little-endian float32 in partition-declared order), every array integrity-
hashed with 64-bit FNV-1a.  Provenance records the stage, parent hashes,
and the root pretraining checkpoint, which assemble() uses to refuse
splicing checkpoints from different pretraining runs.
"""

from __future__ import annotations

import json
import math
import os
import time
import shutil
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    AssemblyError,
    CheckpointError,
    ConfigError,
    EvaluationError,
    NumericError,
    PreconditionError,
)
from .hashing import fnv1a_hex
from .metrics import MetricsRecord
from .model import EMBEDDING_PARAM_NAMES, ModelConfig, TransformerModel, init_params
from .optim import (
    AdamState,
    ForgettingConfig,
    ScheduleSpec,
    TrainState,
    adam_step,
    clip_global_norm,
    lr_schedule,
    training_step,
)
from .synthdata import CONTENT_BAND, Corpus, mlm_mask, subsample_budget

FORMAT_VERSION = 1

# seed streams (second element of the SeedSequence entropy tuple)
_S_SPLIT = 31
_S_VALMASK = 32
_S_BATCH = 33
_S_DROP = 34
_S_TRAINMASK = 35
_S_ADAPT_RESET = 36
_S_CLSINIT = 37
_S_EPOCH = 38


@dataclass(frozen=True)
class FreezeMask:
    embedding_frozen: bool = False
    body_frozen: bool = False

    def validate(self):
        if self.embedding_frozen and self.body_frozen:
            raise ConfigError("freeze mask leaves nothing trainable")
        return self


@dataclass
class Provenance:
    stage: str
    language: str
    updates: int
    seed: int
    parents: tuple = ()
    root: str = ""
    forgetting: dict | None = None
    budget_tokens: int | None = None
    diverged_at: int | None = None
    val_accuracy: float | None = None

    def to_dict(self):
        d = asdict(self)
        d["parents"] = list(self.parents)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["parents"] = tuple(d.get("parents", ()))
        return cls(**d)


@dataclass
class Checkpoint:
    """Immutable trained-parameter container (mutating params invalidates
    the cached hashes)."""

    config: ModelConfig
    provenance: Provenance
    params: dict  # name -> float32 ndarray, partition-declared order
    optim: dict | None = None  # name -> (m, v)
    _hash_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def _bytes_for(self, names) -> bytes:
        return b"".join(
            np.ascontiguousarray(self.params[n], dtype="<f4").tobytes() for n in names
        )

    def params_hash(self) -> str:
        h = self._hash_cache.get("all")
        if h is None:
            h = fnv1a_hex(self._bytes_for(self.params))
            self._hash_cache["all"] = h
        return h

    def group_hash(self, group: str) -> str:
        h = self._hash_cache.get(group)
        if h is None:
            if group == "embedding":
                names = [n for n in self.params if n in EMBEDDING_PARAM_NAMES]
            elif group == "body":
                names = [n for n in self.params if n not in EMBEDDING_PARAM_NAMES]
            else:
                raise ValueError(f"unknown group {group!r}")
            h = fnv1a_hex(self._bytes_for(names))
            self._hash_cache[group] = h
        return h


def snapshot_model(model: TransformerModel, provenance: Provenance,
                   optim: dict | None = None) -> Checkpoint:
    params = {name: t.data.copy() for name, t in model.parameters().items()}
    return Checkpoint(config=model.config, provenance=provenance, params=params, optim=optim)


def build_model(ckpt: Checkpoint) -> TransformerModel:
    params = {
        name: T.Tensor(arr.copy(), requires_grad=True) for name, arr in ckpt.params.items()
    }
    return TransformerModel(ckpt.config, params)


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write a checkpoint directory atomically; returns the params hash."""
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)

    blobs = []
    table = []
    offset = 0
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "hash": fnv1a_hex(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    params_blob = b"".join(blobs)

    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "provenance": ckpt.provenance.to_dict(),
        "params": table,
        "params_bytes": offset,
        "params_hash": fnv1a_hex(params_blob),
        "optim": None,
    }

    if ckpt.optim is not None:
        opt_blobs = []
        opt_table = []
        opt_offset = 0
        for name in ckpt.params:
            m, v = ckpt.optim[name]
            for label, buf in (("m", m), ("v", v)):
                raw = np.ascontiguousarray(buf, dtype="<f4").tobytes()
                opt_table.append({
                    "name": name,
                    "moment": label,
                    "offset": opt_offset,
                    "hash": fnv1a_hex(raw),
                })
                opt_blobs.append(raw)
                opt_offset += len(raw)
        manifest["optim"] = {"table": opt_table, "bytes": opt_offset}
        with open(os.path.join(tmp, "optim.bin"), "wb") as f:
            f.write(b"".join(opt_blobs))

    with open(os.path.join(tmp, "params.bin"), "wb") as f:
        f.write(params_blob)
    with open(os.path.join(tmp, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    if os.path.exists(path):
        shutil.rmtree(path)
    os.replace(tmp, path)
    return manifest["params_hash"]


def load_checkpoint(path) -> Checkpoint:
    """Read and fully validate a checkpoint directory."""
    path = os.fspath(path)
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"missing manifest: {manifest_path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest {manifest_path}: {e}")

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"format_version {manifest.get('format_version')!r} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"bad config in manifest: {e}")
    try:
        provenance = Provenance.from_dict(manifest["provenance"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"bad provenance in manifest: {e}")

    from .model import _param_names, _param_shape  # canonical layout

    expected = _param_names(config)
    declared = [row["name"] for row in manifest.get("params", [])]
    if declared != expected:
        raise CheckpointError(
            f"parameter list mismatch: manifest has {len(declared)} entries, "
            f"config implies {len(expected)}"
        )

    bin_path = os.path.join(path, "params.bin")
    try:
        with open(bin_path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"missing params.bin in {path}")
    if len(blob) != manifest["params_bytes"]:
        raise CheckpointError(
            f"params.bin truncated: {len(blob)} bytes, manifest declares "
            f"{manifest['params_bytes']}"
        )
    if fnv1a_hex(blob) != manifest["params_hash"]:
        raise CheckpointError("params.bin content hash does not match manifest")

    params = {}
    for row in manifest["params"]:
        name = row["name"]
        shape = tuple(row["shape"])
        if shape != _param_shape(name, config):
            raise CheckpointError(f"shape mismatch for {name}: {shape}")
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        raw = blob[row["offset"]: row["offset"] + n_bytes]
        if len(raw) != n_bytes:
            raise CheckpointError(f"params.bin truncated inside {name}")
        if fnv1a_hex(raw) != row["hash"]:
            raise CheckpointError(f"content hash mismatch for parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(
            np.float32, copy=True
        )

    optim = None
    if manifest.get("optim"):
        opt_path = os.path.join(path, "optim.bin")
        try:
            with open(opt_path, "rb") as f:
                opt_blob = f.read()
        except FileNotFoundError:
            raise CheckpointError(f"manifest declares optim.bin but {opt_path} is missing")
        if len(opt_blob) != manifest["optim"]["bytes"]:
            raise CheckpointError("optim.bin truncated")
        moments = {}
        for row in manifest["optim"]["table"]:
            shape = params[row["name"]].shape
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            raw = opt_blob[row["offset"]: row["offset"] + n_bytes]
            if fnv1a_hex(raw) != row["hash"]:
                raise CheckpointError(
                    f"content hash mismatch for optim {row['moment']}[{row['name']}]"
                )
            moments[(row["name"], row["moment"])] = (
                np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32, copy=True)
            )
        optim = {
            name: (moments[(name, "m")], moments[(name, "v")]) for name in params
        }

    return Checkpoint(config=config, provenance=provenance, params=params, optim=optim)


# ---------------------------------------------------------------------------
# batching helpers


def build_mlm_batch(sequences, mask_seeds, vocab_size, pad_id=0):
    """Pad masked sequences into (ids[B,S], lengths, targets[B*S], mask[B*S])."""
    B = len(sequences)
    S = max(len(s) for s in sequences)
    ids = np.full((B, S), pad_id, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    targets = np.zeros(B * S, dtype=np.int64)
    mask = np.zeros(B * S, dtype=bool)
    for i, (seq, ms) in enumerate(zip(sequences, mask_seeds)):
        inp, tgt, pos = mlm_mask(seq, ms, vocab_size=vocab_size)
        ids[i, : len(seq)] = inp
        lengths[i] = len(seq)
        targets[i * S + pos] = tgt
        mask[i * S + pos] = True
    return ids, lengths, targets, mask


def eval_mlm_loss(model: TransformerModel, batch) -> float:
    ids, lengths, targets, mask = batch
    logits = model.forward_mlm_batch(ids, lengths)
    return float(T.cross_entropy_masked(logits, targets, mask).data)


def predict_cls(model: TransformerModel, examples, batch_size=64) -> np.ndarray:
    """Deterministic argmax predictions for a list of ClsExamples."""
    preds = np.empty(len(examples), dtype=np.int64)
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo: lo + batch_size]
        logits = model.forward_cls_batch([(e.a, e.b) for e in chunk]).data
        preds[lo: lo + len(chunk)] = logits.argmax(axis=1)
    return preds


def cls_accuracy(model: TransformerModel, examples, batch_size=64) -> float:
    preds = predict_cls(model, examples, batch_size)
    labels = np.array([e.label for e in examples])
    return float((preds == labels).mean())


def _mask_seeds(seed, stream, step, count):
    return [np.random.SeedSequence((seed, stream, step, i)) for i in range(count)]


def _elapsed(t0):
    return round(time.monotonic() - t0, 6)


# ---------------------------------------------------------------------------
# stage 1: pretraining


def pretrain(config: ModelConfig, corpus: Corpus, schedules: ScheduleSpec,
             forgetting: ForgettingConfig, total_updates: int, seed: int, *,
             batch_size: int = 16, checkpoint_interval: int = 100,
             val_fraction: float = 0.05, metrics=None,
             run_id: str = "pretrain") -> Checkpoint:
    """Masked-LM pretraining; returns the selected checkpoint.

    A validation split (fixed sequences, fixed masks) is scored every
    checkpoint_interval updates.  Selection differs by variant: without
    forgetting the final snapshot wins; with forgetting the best-validation
    snapshot wins, since the run may end mid-episode with freshly reset
    embeddings.  A non-finite loss aborts the run and returns the last
    valid snapshot with diverged_at set.
    """
    config.validate()
    forgetting.validate()
    if total_updates < 1:
        raise PreconditionError("total_updates must be >= 1")
    if len(corpus.sequences) < 2:
        raise PreconditionError("corpus too small to split train/val")

    model = init_params(config, seed)
    state = TrainState(model, seed=seed)

    split_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_SPLIT)))
    perm = split_rng.permutation(len(corpus.sequences))
    n_val = max(1, round(val_fraction * len(corpus.sequences)))
    val_seqs = [corpus.sequences[i] for i in perm[:n_val]]
    train_seqs = [corpus.sequences[i] for i in perm[n_val:]]

    val_batch = build_mlm_batch(
        val_seqs,
        [np.random.SeedSequence((seed, _S_VALMASK, i)) for i in range(len(val_seqs))],
        config.vocab_size,
    )

    batch_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_BATCH)))
    drop_rng = np.random.Generator(np.random.SFC64(np.random.SeedSequence((seed, _S_DROP))))

    def loss_fn(m, batch):
        ids, lengths, targets, mask = batch
        logits = m.forward_mlm_batch(ids, lengths, training=True, rng=drop_rng)
        return T.cross_entropy_masked(logits, targets, mask)

    def make_provenance(n_updates, diverged_at=None):
        return Provenance(
            stage="pretrain",
            language=corpus.spec.name,
            updates=n_updates,
            seed=seed,
            forgetting=asdict(forgetting) if forgetting.enabled else None,
            diverged_at=diverged_at,
        )

    best = None  # (val_loss, n, params)
    last = None
    diverged_at = None
    t0 = time.monotonic()

    for n in range(1, total_updates + 1):
        idx = batch_rng.integers(0, len(train_seqs), size=batch_size)
        batch = build_mlm_batch(
            [train_seqs[i] for i in idx],
            _mask_seeds(seed, _S_TRAINMASK, n, batch_size),
            config.vocab_size,
        )
        try:
            sm = training_step(model, state, batch, schedules, forgetting, n,
                               loss_fn=loss_fn)
        except NumericError:
            diverged_at = n
            if metrics is not None:
                metrics.append(MetricsRecord(run_id=run_id, stage="pretrain", step=n,
                                             event="divergence", wall_time=_elapsed(t0)))
            break

        rec = MetricsRecord(run_id=run_id, stage="pretrain", step=n, loss=sm.loss,
                            lr_body=sm.lr_body, lr_emb=sm.lr_emb,
                            grad_norm=sm.grad_norm,
                            event="reset" if sm.reset else None,
                            wall_time=_elapsed(t0))
        if n % checkpoint_interval == 0 or n == total_updates:
            val_loss = eval_mlm_loss(model, val_batch)
            rec.eval_loss = val_loss
            if rec.event is None:
                rec.event = "checkpoint"
            snap = {k: t.data.copy() for k, t in model.parameters().items()}
            last = (val_loss, n, snap)
            if best is None or val_loss < best[0]:
                best = (val_loss, n, snap)
        if metrics is not None:
            metrics.append(rec)

    if last is None:  # diverged before the first snapshot: keep the last valid params
        last = (math.inf, max(0, (diverged_at or 1) - 1),
                {k: t.data.copy() for k, t in model.parameters().items()})
        best = last

    chosen = best if forgetting.enabled else last
    val_loss, n_sel, snap = chosen
    ckpt = Checkpoint(config=config, provenance=make_provenance(n_sel, diverged_at),
                      params=snap)
    ckpt.provenance.root = ckpt.params_hash()
    return ckpt


# ---------------------------------------------------------------------------
# stage 2: language adaptation (embeddings only)


def adapt_language(parent: Checkpoint, corpus: Corpus, budget_tokens: int,
                   updates: int, seed: int, *, schedule: ScheduleSpec | None = None,
                   peak_lr: float = 1e-3, batch_size: int = 16,
                   eval_loss_every: int = 1, eval_hook=None, eval_hook_every: int = 50,
                   metrics=None, run_id: str = "adapt_lang") -> Checkpoint:
    """Relearn the target language's vocabulary band on a token budget.

    The body is frozen (bitwise unchanged in the result), and so is every
    embedding row outside the target band: reserved ids and foreign bands
    keep the parent's values so the body meets the exact special-token
    vectors it was trained around.  Only the band's rows (token embeddings,
    output rows when untied, and output bias entries) are re-initialized
    from N(0, 0.02) and trained — with a tied softmax every row receives a
    normalizer gradient, so out-of-band gradients are explicitly discarded
    to keep those rows bit-frozen.  Per-step eval loss is recorded on a
    held-out slice; eval_hook (if given) is called every eval_hook_every
    steps for accuracy-style probes.
    """
    if updates < 1:
        raise PreconditionError("updates must be >= 1")
    config = parent.config
    model = build_model(parent)
    part = model.partition()
    for t in part.body.values():
        t.requires_grad = False

    band_lo = corpus.spec.band_start
    band_hi = band_lo + CONTENT_BAND
    reset_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_ADAPT_RESET)))
    for p in part.embedding.values():
        rows = p.data[band_lo:band_hi]
        p.data[band_lo:band_hi] = reset_rng.normal(
            0.0, 0.02, rows.shape).astype(p.data.dtype)

    sample = subsample_budget(corpus, budget_tokens, seed)
    taken = {id(s) for s in sample.sequences}
    held_out = [s for s in corpus.sequences if id(s) not in taken][:16]
    if not held_out:  # full-budget runs have no leftovers
        held_out = sample.sequences[:16]
    eval_batch = build_mlm_batch(
        held_out,
        [np.random.SeedSequence((seed, _S_VALMASK, i)) for i in range(len(held_out))],
        config.vocab_size,
    )

    if schedule is None:
        schedule = ScheduleSpec(peak_lr=peak_lr,
                                warmup_updates=max(1, round(0.08 * updates)),
                                total_updates=updates)
    adam = AdamState(part.embedding)
    batch_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_BATCH)))
    drop_rng = np.random.Generator(np.random.SFC64(np.random.SeedSequence((seed, _S_DROP))))
    train_seqs = sample.sequences
    diverged_at = None
    t0 = time.monotonic()

    for n in range(1, updates + 1):
        idx = batch_rng.integers(0, len(train_seqs), size=batch_size)
        ids, lengths, targets, mask = build_mlm_batch(
            [train_seqs[i] for i in idx],
            _mask_seeds(seed, _S_TRAINMASK, n, batch_size),
            config.vocab_size,
        )
        model.zero_grads()
        try:
            with T.Tape():
                logits = model.forward_mlm_batch(ids, lengths, training=True, rng=drop_rng)
                loss = T.cross_entropy_masked(logits, targets, mask)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NumericError(f"adapt_language: loss is {loss_val} at step {n}")
            T.backward(loss)
            grads = {
                k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in part.embedding.items()
            }
            for g in grads.values():  # out-of-band rows stay bit-frozen
                g[:band_lo] = 0
                g[band_hi:] = 0
            grad_norm = clip_global_norm(list(grads.values()), 0.5)
        except NumericError:
            diverged_at = n
            if metrics is not None:
                metrics.append(MetricsRecord(run_id=run_id, stage="adapt_language",
                                             step=n, event="divergence",
                                             wall_time=_elapsed(t0)))
            break
        adam_step(part.embedding, grads, adam, lr_schedule(schedule, n), n)

        rec = MetricsRecord(run_id=run_id, stage="adapt_language", step=n,
                            loss=loss_val, lr_emb=lr_schedule(schedule, n),
                            grad_norm=grad_norm, wall_time=_elapsed(t0))
        if eval_loss_every and n % eval_loss_every == 0:
            rec.eval_loss = eval_mlm_loss(model, eval_batch)
        if eval_hook is not None and n % eval_hook_every == 0:
            rec.accuracy = float(eval_hook(model, n))
        if metrics is not None:
            metrics.append(rec)

    prov = Provenance(
        stage="adapt_language",
        language=corpus.spec.name,
        updates=updates if diverged_at is None else diverged_at - 1,
        seed=seed,
        parents=(parent.params_hash(),),
        root=parent.provenance.root or parent.params_hash(),
        budget_tokens=budget_tokens,
        diverged_at=diverged_at,
    )
    return snapshot_model(model, prov)


# ---------------------------------------------------------------------------
# stage 3: task adaptation (body + classifier head, embeddings frozen)


def adapt_task(parent: Checkpoint, dataset, epochs: int, seed: int, *,
               freeze: FreezeMask = FreezeMask(embedding_frozen=True),
               schedule: ScheduleSpec | None = None, peak_lr: float = 3e-4,
               batch_size: int = 16, val_fraction: float = 0.1,
               metrics=None, run_id: str = "adapt_task") -> Checkpoint:
    """Supervised pair-classification training on the parent's language.

    The classifier head is freshly initialized regardless of the parent.
    By default embeddings are frozen and the body (including the head)
    trains; a FreezeMask can invert that for full-model variants.
    epochs=0 returns the parent parameters with only the new head.
    """
    freeze.validate()
    if epochs < 0:
        raise PreconditionError("epochs must be >= 0")
    if dataset.language != parent.provenance.language:
        raise PreconditionError(
            f"task data is {dataset.language!r} but the checkpoint was pretrained "
            f"on {parent.provenance.language!r}"
        )
    config = parent.config
    model = build_model(parent)

    head_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_CLSINIT)))
    model.params["cls_w"].data[...] = head_rng.normal(
        0.0, 0.02, model.params["cls_w"].data.shape
    ).astype(np.float32)
    model.params["cls_b"].data[...] = 0.0

    part = model.partition()
    trainable = {}
    if not freeze.embedding_frozen:
        trainable.update(part.embedding)
    if not freeze.body_frozen:
        trainable.update(part.body)
    for name, t in model.parameters().items():
        t.requires_grad = name in trainable

    split_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_SPLIT)))
    perm = split_rng.permutation(len(dataset.examples))
    n_val = max(1, round(val_fraction * len(dataset.examples)))
    val_examples = [dataset.examples[i] for i in perm[:n_val]]
    train_examples = [dataset.examples[i] for i in perm[n_val:]]

    steps_per_epoch = math.ceil(len(train_examples) / batch_size)
    total_steps = max(1, epochs * steps_per_epoch)
    if schedule is None:
        schedule = ScheduleSpec(peak_lr=peak_lr,
                                warmup_updates=max(1, round(0.1 * total_steps)),
                                total_updates=total_steps)
    adam = AdamState(trainable)
    epoch_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_EPOCH)))
    drop_rng = np.random.Generator(np.random.SFC64(np.random.SeedSequence((seed, _S_DROP))))

    step = 0
    diverged_at = None
    val_acc = None
    t0 = time.monotonic()
    for epoch in range(epochs):
        order = epoch_rng.permutation(len(train_examples))
        for lo in range(0, len(order), batch_size):
            chunk = [train_examples[i] for i in order[lo: lo + batch_size]]
            labels = np.array([e.label for e in chunk])
            step += 1
            model.zero_grads()
            try:
                with T.Tape():
                    logits = model.forward_cls_batch(
                        [(e.a, e.b) for e in chunk], training=True, rng=drop_rng
                    )
                    loss = T.cross_entropy_masked(logits, labels, np.ones(len(chunk), bool))
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise NumericError(f"adapt_task: loss is {loss_val} at step {step}")
                T.backward(loss)
                grads = {
                    k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for k, p in trainable.items()
                }
                grad_norm = clip_global_norm(list(grads.values()), 0.5)
            except NumericError:
                diverged_at = step
                if metrics is not None:
                    metrics.append(MetricsRecord(run_id=run_id, stage="adapt_task",
                                                 step=step, event="divergence",
                                                 wall_time=_elapsed(t0)))
                break
            adam_step(trainable, grads, adam, lr_schedule(schedule, step), step)

            rec = MetricsRecord(run_id=run_id, stage="adapt_task", step=step,
                                loss=loss_val, lr_body=lr_schedule(schedule, step),
                                grad_norm=grad_norm, wall_time=_elapsed(t0))
            if lo + batch_size >= len(order):  # epoch boundary: score validation
                val_acc = cls_accuracy(model, val_examples)
                rec.accuracy = val_acc
            if metrics is not None:
                metrics.append(rec)
        if diverged_at is not None:
            break

    if epochs > 0 and val_acc is None and diverged_at is None:
        val_acc = cls_accuracy(model, val_examples)

    prov = Provenance(
        stage="adapt_task",
        language=parent.provenance.language,
        updates=step if diverged_at is None else diverged_at - 1,
        seed=seed,
        parents=(parent.params_hash(),),
        root=parent.provenance.root or parent.params_hash(),
        diverged_at=diverged_at,
        val_accuracy=val_acc,
    )
    return snapshot_model(model, prov)


# ---------------------------------------------------------------------------
# stage 4: assembly + zero-shot evaluation


def assemble(lang_ckpt: Checkpoint, task_ckpt: Checkpoint) -> Checkpoint:
    """Splice stage-2 embeddings onto a stage-3 body.

    Both checkpoints must share the model config and descend from the same
    root pretraining run; nothing else is assumed, so assembling a
    checkpoint with itself is the identity.
    """
    if lang_ckpt.config != task_ckpt.config:
        raise AssemblyError("checkpoints disagree on model config")
    root_a = lang_ckpt.provenance.root or lang_ckpt.params_hash()
    root_b = task_ckpt.provenance.root or task_ckpt.params_hash()
    if root_a != root_b:
        raise AssemblyError(
            f"provenance mismatch: embedding side descends from {root_a}, "
            f"body side from {root_b}"
        )
    params = {}
    for name in lang_ckpt.params:
        src = lang_ckpt if name in EMBEDDING_PARAM_NAMES else task_ckpt
        params[name] = src.params[name].copy()
    prov = Provenance(
        stage="assemble",
        language=lang_ckpt.provenance.language,
        updates=lang_ckpt.provenance.updates + task_ckpt.provenance.updates,
        seed=lang_ckpt.provenance.seed,
        parents=(lang_ckpt.params_hash(), task_ckpt.params_hash()),
        root=root_a,
        budget_tokens=lang_ckpt.provenance.budget_tokens,
    )
    return Checkpoint(config=lang_ckpt.config, provenance=prov, params=params)


def evaluate_zero_shot(ckpt: Checkpoint, dataset, *, batch_size: int = 64) -> float:
    """Accuracy of the checkpoint's classifier on a pair dataset.

    Refuses evaluation when the dataset language does not match the
    checkpoint's provenance — scoring a model on text it was never wired
    for is almost always an experiment bug.
    """
    if dataset.language != ckpt.provenance.language:
        raise EvaluationError(
            f"dataset is {dataset.language!r} but checkpoint provenance says "
            f"{ckpt.provenance.language!r}"
        )
    model = build_model(ckpt)
    preds = predict_cls(model, dataset.examples, batch_size)
    labels = np.array([e.label for e in dataset.examples])
    return float((preds == labels).mean())
