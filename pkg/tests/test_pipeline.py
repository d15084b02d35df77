"""Stage functions, checkpoint files, and the splice-and-evaluate path.

Everything runs on a deliberately tiny model (d_model=16, one layer) so the
whole file stays under half a minute; the invariants tested here do not
depend on scale.
"""

import json
import os

import numpy as np
import pytest

from rewirelm import pipeline as P
from rewirelm.errors import (
    AssemblyError,
    CheckpointError,
    ConfigError,
    EvaluationError,
    PreconditionError,
)
from rewirelm.metrics import MetricsLog
from rewirelm.model import EMBEDDING_PARAM_NAMES, ModelConfig, init_params
from rewirelm.optim import ForgettingConfig, ScheduleSpec, default_emb_schedule
from rewirelm.synthdata import (
    LanguageSpec,
    generate_corpus,
    make_cls_dataset,
    make_language,
)

CFG = ModelConfig(vocab_size=256, d_model=16, n_layers=1, n_heads=2, d_ff=32,
                  max_seq_len=64, dropout=0.1, n_classes=3)
BASE = LanguageSpec(name="base", grammar_seed=7)


def small_schedule(total, peak=3e-3):
    return ScheduleSpec(peak_lr=peak, warmup_updates=max(1, total // 10),
                        total_updates=total)


def standard(total, peak=3e-3):
    """Schedule pair for the no-reset variant (both groups share one curve)."""
    s = small_schedule(total, peak)
    return s, ForgettingConfig(k=10 ** 9, emb_schedule=s, enabled=False)


def forgetting(total, k, peak=3e-3):
    s = small_schedule(total, peak)
    return s, ForgettingConfig(k=k, emb_schedule=default_emb_schedule(peak, k))


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(BASE, 4000, seed=11)


@pytest.fixture(scope="module")
def pretrained(corpus):
    sched, fc = standard(30)
    return P.pretrain(CFG, corpus, sched, fc, 30, seed=3, batch_size=8,
                      checkpoint_interval=10)


@pytest.fixture(scope="module")
def target_corpus():
    return generate_corpus(make_language(BASE, "distant"), 2000, seed=11)


# ---------------------------------------------------------------------------
# checkpoint container


def test_save_load_roundtrip(pretrained, tmp_path):
    path = tmp_path / "ck"
    h = P.save_checkpoint(pretrained, path)
    assert h == pretrained.params_hash()
    back = P.load_checkpoint(path)
    assert back.config == pretrained.config
    assert back.provenance.to_dict() == pretrained.provenance.to_dict()
    for name in pretrained.params:
        assert np.array_equal(back.params[name], pretrained.params[name])
    assert back.optim is None
    assert back.params_hash() == pretrained.params_hash()


def test_save_load_with_optimizer_moments(pretrained, tmp_path):
    rng = np.random.default_rng(0)
    optim = {
        name: (rng.normal(size=arr.shape).astype(np.float32),
               np.abs(rng.normal(size=arr.shape)).astype(np.float32))
        for name, arr in pretrained.params.items()
    }
    ck = P.Checkpoint(config=pretrained.config, provenance=pretrained.provenance,
                      params=pretrained.params, optim=optim)
    path = tmp_path / "ck_opt"
    P.save_checkpoint(ck, path)
    back = P.load_checkpoint(path)
    for name in optim:
        assert np.array_equal(back.optim[name][0], optim[name][0])
        assert np.array_equal(back.optim[name][1], optim[name][1])


def test_save_is_atomic_overwrite(pretrained, tmp_path):
    # Saving over an existing checkpoint replaces it wholesale.
    path = tmp_path / "ck"
    P.save_checkpoint(pretrained, path)
    (path / "stray.txt").write_text("junk")
    P.save_checkpoint(pretrained, path)
    assert not (path / "stray.txt").exists()
    P.load_checkpoint(path)


def test_load_missing_manifest(tmp_path):
    d = tmp_path / "empty"
    d.mkdir()
    with pytest.raises(CheckpointError, match="manifest"):
        P.load_checkpoint(d)


def test_load_corrupt_manifest(pretrained, tmp_path):
    path = tmp_path / "ck"
    P.save_checkpoint(pretrained, path)
    (path / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError, match="corrupt"):
        P.load_checkpoint(path)


def test_load_rejects_unknown_format_version(pretrained, tmp_path):
    path = tmp_path / "ck"
    P.save_checkpoint(pretrained, path)
    m = json.loads((path / "manifest.json").read_text())
    m["format_version"] = 999
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="format_version"):
        P.load_checkpoint(path)


def test_load_truncated_params(pretrained, tmp_path):
    path = tmp_path / "ck"
    P.save_checkpoint(pretrained, path)
    blob = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        P.load_checkpoint(path)


def test_load_detects_flipped_byte(pretrained, tmp_path):
    path = tmp_path / "ck"
    P.save_checkpoint(pretrained, path)
    blob = bytearray((path / "params.bin").read_bytes())
    blob[100] ^= 0xFF
    (path / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="hash"):
        P.load_checkpoint(path)


def test_load_detects_per_param_hash_mismatch(pretrained, tmp_path):
    # Tamper with one table entry only; the whole-file hash still matches,
    # so the per-parameter check has to catch it and name the culprit.
    path = tmp_path / "ck"
    P.save_checkpoint(pretrained, path)
    m = json.loads((path / "manifest.json").read_text())
    victim = m["params"][2]
    victim["hash"] = "0" * 16
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match=victim["name"]):
        P.load_checkpoint(path)


def test_load_detects_param_list_mismatch(pretrained, tmp_path):
    path = tmp_path / "ck"
    P.save_checkpoint(pretrained, path)
    m = json.loads((path / "manifest.json").read_text())
    del m["params"][3]
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="parameter list"):
        P.load_checkpoint(path)


def test_group_hashes_partition_params(pretrained):
    emb = pretrained.group_hash("embedding")
    body = pretrained.group_hash("body")
    assert emb != body
    with pytest.raises(ValueError):
        pretrained.group_hash("everything")


def test_provenance_roundtrip():
    prov = P.Provenance(stage="adapt_language", language="x-distant", updates=7,
                        seed=4, parents=("ab" * 8,), root="cd" * 8,
                        budget_tokens=1000)
    back = P.Provenance.from_dict(json.loads(json.dumps(prov.to_dict())))
    assert back == prov
    assert isinstance(back.parents, tuple)


# ---------------------------------------------------------------------------
# stage 1: pretraining


def test_pretrain_is_reproducible(corpus):
    sched, fc = standard(12)
    a = P.pretrain(CFG, corpus, sched, fc, 12, seed=5, batch_size=8)
    b = P.pretrain(CFG, corpus, sched, fc, 12, seed=5, batch_size=8)
    c = P.pretrain(CFG, corpus, sched, fc, 12, seed=6, batch_size=8)
    assert a.params_hash() == b.params_hash()
    assert a.params_hash() != c.params_hash()


def test_pretrain_metrics_and_reset_events(corpus):
    sched, fc = forgetting(24, k=8)
    log = MetricsLog()
    P.pretrain(CFG, corpus, sched, fc, 24, seed=3, batch_size=8,
               checkpoint_interval=6, metrics=log, run_id="r")
    recs = log.for_run("r")
    assert [r.step for r in recs] == list(range(1, 25))
    resets = [r.step for r in recs if r.event == "reset"]
    assert resets == [8, 16, 24]
    evald = [r.step for r in recs if r.eval_loss is not None]
    assert evald == [6, 12, 18, 24]
    for r in recs:
        assert r.loss is not None and np.isfinite(r.loss)
        assert r.lr_body is not None and r.lr_emb is not None


def test_pretrain_standard_keeps_final_snapshot(corpus):
    sched, fc = standard(20)
    ck = P.pretrain(CFG, corpus, sched, fc, 20, seed=3, batch_size=8,
                    checkpoint_interval=7)
    assert ck.provenance.updates == 20
    assert ck.provenance.stage == "pretrain"
    assert ck.provenance.language == "base"
    assert ck.provenance.forgetting is None
    assert ck.provenance.root == ck.params_hash()


def test_pretrain_forgetting_keeps_best_validation_snapshot(corpus):
    # With resets enabled the run can end mid-episode, so selection goes by
    # validation loss over the snapshot grid rather than recency.
    sched, fc = forgetting(40, k=8)
    log = MetricsLog()
    ck = P.pretrain(CFG, corpus, sched, fc, 40, seed=3, batch_size=8,
                    checkpoint_interval=10, metrics=log, run_id="f")
    scored = [(r.eval_loss, r.step) for r in log.for_run("f") if r.eval_loss is not None]
    best_step = min(scored)[1]
    assert ck.provenance.updates == best_step
    assert ck.provenance.forgetting is not None
    assert ck.provenance.forgetting["k"] == 8


def test_pretrain_divergence_aborts_with_flag(corpus):
    bad = ScheduleSpec(peak_lr=1e18, warmup_updates=1, total_updates=30)
    log = MetricsLog()
    with np.errstate(all="ignore"):
        ck = P.pretrain(CFG, corpus, bad,
                        ForgettingConfig(k=10 ** 9, emb_schedule=bad, enabled=False),
                        30, seed=3, batch_size=8, checkpoint_interval=5,
                        metrics=log, run_id="d")
    assert ck.provenance.diverged_at is not None
    assert ck.provenance.updates == ck.provenance.diverged_at - 1
    events = [r.event for r in log.for_run("d") if r.event]
    assert events[-1] == "divergence"


def test_pretrain_rejects_bad_args(corpus):
    sched, fc = standard(10)
    with pytest.raises(PreconditionError):
        P.pretrain(CFG, corpus, sched, fc, 0, seed=1)


# ---------------------------------------------------------------------------
# stage 2: language adaptation


def test_adapt_language_freezes_body(pretrained, target_corpus):
    lang = P.adapt_language(pretrained, target_corpus, 1000, 15, seed=5)
    assert lang.group_hash("body") == pretrained.group_hash("body")
    assert lang.group_hash("embedding") != pretrained.group_hash("embedding")
    assert lang.provenance.stage == "adapt_language"
    assert lang.provenance.language == "base-distant"
    assert lang.provenance.parents == (pretrained.params_hash(),)
    assert lang.provenance.root == pretrained.provenance.root
    assert lang.provenance.budget_tokens == 1000


def test_adapt_language_rewires_only_the_target_band(pretrained, target_corpus):
    # The target band is redrawn and trained; reserved ids and the base
    # band must survive bit-for-bit so the body still sees the special
    # tokens it was trained around.
    lo = target_corpus.spec.band_start
    hi = lo + 64
    lang = P.adapt_language(pretrained, target_corpus, 1000, 5, seed=5)
    for name in ("tok_emb", "lm_bias"):
        new, old = lang.params[name], pretrained.params[name]
        assert np.array_equal(new[:lo], old[:lo]), name
        assert np.array_equal(new[hi:], old[hi:]), name
    band_same = np.mean(lang.params["tok_emb"][lo:hi]
                        == pretrained.params["tok_emb"][lo:hi])
    assert band_same < 0.01
    assert 0.01 < lang.params["tok_emb"][lo:hi].std() < 0.05


def test_adapt_language_is_reproducible(pretrained, target_corpus):
    a = P.adapt_language(pretrained, target_corpus, 800, 10, seed=9)
    b = P.adapt_language(pretrained, target_corpus, 800, 10, seed=9)
    c = P.adapt_language(pretrained, target_corpus, 800, 10, seed=10)
    assert a.params_hash() == b.params_hash()
    assert a.params_hash() != c.params_hash()


def test_adapt_language_records_metrics(pretrained, target_corpus):
    log = MetricsLog()
    P.adapt_language(pretrained, target_corpus, 800, 8, seed=5,
                     eval_loss_every=2, metrics=log, run_id="al")
    recs = log.for_run("al", stage="adapt_language")
    assert len(recs) == 8
    assert all(r.eval_loss is not None for r in recs if r.step % 2 == 0)
    assert all(r.eval_loss is None for r in recs if r.step % 2 == 1)


def test_adapt_language_divergence_flag(pretrained, target_corpus):
    broken = {k: v.copy() for k, v in pretrained.params.items()}
    broken["layer0.w1"][:] = np.inf
    parent = P.Checkpoint(config=pretrained.config,
                          provenance=pretrained.provenance, params=broken)
    with np.errstate(all="ignore"):
        lang = P.adapt_language(parent, target_corpus, 800, 10, seed=5)
    assert lang.provenance.diverged_at == 1
    assert lang.provenance.updates == 0


def test_adapt_language_rejects_zero_updates(pretrained, target_corpus):
    with pytest.raises(PreconditionError):
        P.adapt_language(pretrained, target_corpus, 800, 0, seed=5)


# ---------------------------------------------------------------------------
# stage 3: task adaptation


@pytest.fixture(scope="module")
def task_data():
    return make_cls_dataset(BASE, 36, seed=9)


def test_adapt_task_freezes_embeddings(pretrained, task_data):
    task = P.adapt_task(pretrained, task_data, 2, seed=5)
    assert task.group_hash("embedding") == pretrained.group_hash("embedding")
    assert task.group_hash("body") != pretrained.group_hash("body")
    assert task.provenance.stage == "adapt_task"
    assert task.provenance.parents == (pretrained.params_hash(),)
    assert 0.0 <= task.provenance.val_accuracy <= 1.0


def test_adapt_task_zero_epochs_only_swaps_head(pretrained, task_data):
    task = P.adapt_task(pretrained, task_data, 0, seed=5)
    assert task.provenance.updates == 0
    assert task.provenance.val_accuracy is None
    for name in pretrained.params:
        if name in ("cls_w", "cls_b"):
            continue
        assert np.array_equal(task.params[name], pretrained.params[name]), name
    assert not np.array_equal(task.params["cls_w"], pretrained.params["cls_w"])


def test_adapt_task_head_reinit_depends_on_seed(pretrained, task_data):
    a = P.adapt_task(pretrained, task_data, 0, seed=5)
    b = P.adapt_task(pretrained, task_data, 0, seed=6)
    assert not np.array_equal(a.params["cls_w"], b.params["cls_w"])


def test_adapt_task_language_guard(pretrained):
    wrong = make_cls_dataset(make_language(BASE, "close"), 9, seed=1)
    with pytest.raises(PreconditionError, match="base-close"):
        P.adapt_task(pretrained, wrong, 1, seed=5)


def test_adapt_task_rejects_all_frozen(pretrained, task_data):
    with pytest.raises(ConfigError):
        P.adapt_task(pretrained, task_data, 1, seed=5,
                     freeze=P.FreezeMask(embedding_frozen=True, body_frozen=True))


def test_adapt_task_unfrozen_embeddings_move(pretrained, task_data):
    task = P.adapt_task(pretrained, task_data, 1, seed=5,
                        freeze=P.FreezeMask())
    assert task.group_hash("embedding") != pretrained.group_hash("embedding")


# ---------------------------------------------------------------------------
# stage 4: assembly and zero-shot evaluation


@pytest.fixture(scope="module")
def adapted(pretrained, target_corpus, task_data):
    lang = P.adapt_language(pretrained, target_corpus, 1000, 15, seed=5)
    task = P.adapt_task(pretrained, task_data, 2, seed=5)
    return lang, task


def test_assemble_splices_groups(adapted):
    lang, task = adapted
    asm = P.assemble(lang, task)
    for name, arr in asm.params.items():
        src = lang if name in EMBEDDING_PARAM_NAMES else task
        assert np.array_equal(arr, src.params[name]), name
    assert asm.provenance.stage == "assemble"
    assert asm.provenance.language == lang.provenance.language
    assert asm.provenance.parents == (lang.params_hash(), task.params_hash())
    assert asm.provenance.budget_tokens == lang.provenance.budget_tokens


def test_assemble_with_itself_is_identity(adapted):
    lang, _ = adapted
    asm = P.assemble(lang, lang)
    assert asm.params_hash() == lang.params_hash()


def test_assemble_rejects_config_mismatch(adapted):
    lang, task = adapted
    other_cfg = ModelConfig(vocab_size=256, d_model=16, n_layers=1, n_heads=2,
                            d_ff=48, max_seq_len=64, n_classes=3)
    impostor = P.Checkpoint(config=other_cfg, provenance=task.provenance,
                            params=task.params)
    with pytest.raises(AssemblyError, match="config"):
        P.assemble(lang, impostor)


def test_assemble_rejects_different_pretrain_roots(corpus, target_corpus, task_data):
    sched, fc = standard(6)
    pre_a = P.pretrain(CFG, corpus, sched, fc, 6, seed=21, batch_size=8)
    pre_b = P.pretrain(CFG, corpus, sched, fc, 6, seed=22, batch_size=8)
    lang = P.adapt_language(pre_a, target_corpus, 800, 3, seed=5)
    task = P.adapt_task(pre_b, task_data, 1, seed=5)
    with pytest.raises(AssemblyError, match="provenance"):
        P.assemble(lang, task)


def test_assembled_model_forward_matches_manual_splice(adapted):
    from rewirelm.model import TransformerModel
    from rewirelm.tensor import Tensor

    lang, task = adapted
    asm = P.assemble(lang, task)
    manual = TransformerModel(asm.config, {
        name: Tensor((lang if name in EMBEDDING_PARAM_NAMES else task).params[name].copy())
        for name in asm.params
    })
    model = P.build_model(asm)
    a = np.array([70, 71, 72, 73], dtype=np.int64)
    b = np.array([70, 71, 72, 73], dtype=np.int64)
    got = model.forward_cls(a, b).data
    want = manual.forward_cls(a, b).data
    assert np.array_equal(got, want)


def test_evaluate_zero_shot_language_guard(adapted):
    lang, task = adapted
    asm = P.assemble(lang, task)
    base_data = make_cls_dataset(BASE, 9, seed=2)
    with pytest.raises(EvaluationError, match="base-distant"):
        P.evaluate_zero_shot(asm, base_data)


def test_evaluate_zero_shot_deterministic(adapted):
    lang, task = adapted
    asm = P.assemble(lang, task)
    data = make_cls_dataset(make_language(BASE, "distant"), 30, seed=2)
    assert P.evaluate_zero_shot(asm, data) == P.evaluate_zero_shot(asm, data)


def test_untrained_model_scores_near_chance():
    # A freshly initialized classifier should sit in the vicinity of 1/3 on
    # the balanced three-way task; anything near 1.0 would mean leakage.
    model = init_params(CFG, seed=0)
    prov = P.Provenance(stage="pretrain", language="base", updates=0, seed=0)
    ck = P.snapshot_model(model, prov)
    data = make_cls_dataset(BASE, 60, seed=4)
    acc = P.evaluate_zero_shot(ck, data)
    assert 0.05 <= acc <= 0.70


def test_freeze_mask_validation():
    P.FreezeMask().validate()
    P.FreezeMask(embedding_frozen=True).validate()
    with pytest.raises(ConfigError):
        P.FreezeMask(embedding_frozen=True, body_frozen=True).validate()


def test_build_mlm_batch_shapes():
    seqs = [np.arange(4, 10, dtype=np.int64), np.arange(4, 24, dtype=np.int64)]
    seeds = [np.random.SeedSequence((0, i)) for i in range(2)]
    ids, lengths, targets, mask = P.build_mlm_batch(seqs, seeds, 256)
    assert ids.shape == (2, 20)
    assert lengths.tolist() == [6, 20]
    assert mask.shape == (40,)
    assert mask.sum() >= 2           # at least one masked slot per sequence
    assert (ids[0, 6:] == 0).all()   # padding
