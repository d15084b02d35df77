"""Tiny pre-norm transformer encoder with a masked-LM head and a pair-
classification head.

The parameter set is split into two named groups:

* embedding group — token embedding matrix, LM output bias, and (when the
  LM head is untied) the separate output projection,
* body group — positions, attention/FFN blocks, layer norms, and the
  classification head.

The split is load-bearing: training schedules, resets, freezing, and
checkpoint assembly all operate on whole groups.  Group membership and
ordering are fixed here and serve as the serialization order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, LengthError, VocabError
from .tensor import Tensor

# reserved token ids, shared by every vocabulary layout
PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
N_RESERVED = 4

INIT_STD = 0.02
_NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    dropout: float = 0.1
    tie_lm_head: bool = True
    n_classes: int = 3

    def validate(self):
        if self.vocab_size <= N_RESERVED:
            raise ConfigError(f"vocab_size must exceed {N_RESERVED}, got {self.vocab_size}")
        if self.d_model < 2:
            raise ConfigError(f"d_model must be >= 2, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_ff < 1:
            raise ConfigError("d_ff must be >= 1")
        if self.max_seq_len < 4:
            raise ConfigError("max_seq_len must be >= 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


EMBEDDING_PARAM_NAMES = ("tok_emb", "lm_out", "lm_bias")


@dataclass
class ParamPartition:
    """Ordered name->Tensor maps for the two parameter groups."""

    embedding: dict = field(default_factory=dict)
    body: dict = field(default_factory=dict)

    @property
    def names(self):
        """Serialization order: embedding group first, then body."""
        return list(self.embedding) + list(self.body)

    def all_params(self):
        out = dict(self.embedding)
        out.update(self.body)
        return out

    def count(self, group):
        params = self.embedding if group == "embedding" else self.body
        return sum(t.data.size for t in params.values())


def pair_ids(a, b) -> np.ndarray:
    """[CLS] a [SEP] b token layout for pair classification."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return np.concatenate(([CLS_ID], a, [SEP_ID], b))


def _param_names(config: ModelConfig):
    names = ["tok_emb"]
    if not config.tie_lm_head:
        names.append("lm_out")
    names.append("lm_bias")
    names.append("pos_emb")
    for i in range(config.n_layers):
        p = f"layer{i}."
        names += [
            p + "ln1.g", p + "ln1.b",
            p + "wq", p + "bq", p + "wk", p + "bk", p + "wv", p + "bv",
            p + "wo", p + "bo",
            p + "ln2.g", p + "ln2.b",
            p + "w1", p + "b1", p + "w2", p + "b2",
        ]
    names += ["ln_f.g", "ln_f.b", "cls_w", "cls_b"]
    return names


def _param_shape(name: str, c: ModelConfig):
    base = name.split(".")[-1] if name.startswith("layer") else name
    d, V = c.d_model, c.vocab_size
    shapes = {
        "tok_emb": (V, d), "lm_out": (V, d), "lm_bias": (V,),
        "pos_emb": (c.max_seq_len, d),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "bq": (d,), "bk": (d,), "bv": (d,), "bo": (d,),
        "w1": (d, c.d_ff), "b1": (c.d_ff,), "w2": (c.d_ff, d), "b2": (d,),
        "g": (d,), "b": (d,),
        "cls_w": (d, c.n_classes), "cls_b": (c.n_classes,),
    }
    if name in ("ln_f.g", "ln_f.b"):
        base = name.split(".")[-1]
    return shapes[base]


def _is_gain(name):
    return name.endswith(".g")


def _is_bias(name):
    if name in ("lm_bias", "cls_b"):
        return True
    base = name.split(".")[-1]
    return base in ("b", "bq", "bk", "bv", "bo", "b1", "b2")


def init_params(config: ModelConfig, seed: int) -> "TransformerModel":
    """Fresh model: weight matrices ~ N(0, 0.02), biases zero, LN gains one.

    Draws happen in canonical parameter order from a single generator, so
    the full init is a function of (config, seed) alone.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name in _param_names(config):
        shape = _param_shape(name, config)
        if _is_gain(name):
            data = np.ones(shape, dtype=np.float32)
        elif _is_bias(name):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = rng.normal(0.0, INIT_STD, shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return TransformerModel(config, params)


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict):
        config.validate()
        expected = _param_names(config)
        if list(params) != expected:
            raise ConfigError("parameter names/order do not match the config")
        for name, t in params.items():
            want = _param_shape(name, config)
            if tuple(t.data.shape) != want:
                raise ConfigError(f"parameter {name} has shape {t.data.shape}, expected {want}")
        self.config = config
        self.params = params

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        return self.params

    def partition(self) -> ParamPartition:
        part = ParamPartition()
        for name, t in self.params.items():
            if name in EMBEDDING_PARAM_NAMES:
                part.embedding[name] = t
            else:
                part.body[name] = t
        return part

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "TransformerModel":
        params = {
            k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()
        }
        return TransformerModel(self.config, params)

    # -- forward passes --------------------------------------------------------

    def _check_ids(self, ids: np.ndarray):
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.config.vocab_size)][0]
            raise VocabError(
                f"token id {int(bad)} outside vocabulary of size {self.config.vocab_size}"
            )

    def _encode(self, ids: np.ndarray, lengths: np.ndarray, *, training=False, rng=None) -> Tensor:
        """Run the encoder stack over a padded [B, T] batch.

        Returns hidden states flattened to [B*T, d_model].  Padded key
        positions are excluded from attention with an additive -1e9 mask;
        the mask contributes exactly zero probability, so padded rows can
        never leak into real ones.
        """
        c = self.config
        B, S = ids.shape
        d, H = c.d_model, c.n_heads
        dh = d // H
        p = self.params
        drop = c.dropout if training else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")

        flat_ids = ids.reshape(-1)
        pos_ids = np.tile(np.arange(S, dtype=np.int64), B)
        h = T.add(T.gather_rows(p["tok_emb"], flat_ids), T.gather_rows(p["pos_emb"], pos_ids))
        if drop:
            h = T.dropout(h, drop, rng)

        key_ok = np.arange(S)[None, :] < np.asarray(lengths)[:, None]
        attn_mask = np.where(key_ok, 0.0, _NEG_INF).astype(np.float32).reshape(B, 1, 1, S)
        inv_sqrt_dh = 1.0 / np.sqrt(dh)

        for i in range(c.n_layers):
            pre = f"layer{i}."
            x = T.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = T.add_bias(T.matmul(x, p[pre + "wq"]), p[pre + "bq"])
            k = T.add_bias(T.matmul(x, p[pre + "wk"]), p[pre + "bk"])
            v = T.add_bias(T.matmul(x, p[pre + "wv"]), p[pre + "bv"])
            # [B*T, d] -> [B, H, T, dh]
            q = T.permute(T.reshape(q, (B, S, H, dh)), (0, 2, 1, 3))
            k = T.permute(T.reshape(k, (B, S, H, dh)), (0, 2, 3, 1))
            v = T.permute(T.reshape(v, (B, S, H, dh)), (0, 2, 1, 3))
            scores = T.scale(T.bmm(q, k), inv_sqrt_dh)
            scores = T.add_const(scores, attn_mask)
            attn = T.softmax_rows(scores)
            if drop:
                attn = T.dropout(attn, drop, rng)
            ctx = T.bmm(attn, v)  # [B, H, T, dh]
            ctx = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (B * S, d))
            out = T.add_bias(T.matmul(ctx, p[pre + "wo"]), p[pre + "bo"])
            if drop:
                out = T.dropout(out, drop, rng)
            h = T.add(h, out)

            x = T.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = T.gelu(T.add_bias(T.matmul(x, p[pre + "w1"]), p[pre + "b1"]))
            x = T.add_bias(T.matmul(x, p[pre + "w2"]), p[pre + "b2"])
            if drop:
                x = T.dropout(x, drop, rng)
            h = T.add(h, x)

        return T.layer_norm(h, p["ln_f.g"], p["ln_f.b"])

    def _lm_logits(self, h: Tensor) -> Tensor:
        p = self.params
        if self.config.tie_lm_head:
            w = T.transpose(p["tok_emb"])
        else:
            w = T.transpose(p["lm_out"])
        return T.add_bias(T.matmul(h, w), p["lm_bias"])

    def forward_mlm(self, token_ids, *, training=False, rng=None) -> Tensor:
        """Per-position vocabulary logits [t, vocab_size] for one sequence."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise LengthError(f"forward_mlm: need a non-empty 1-D sequence, got shape {ids.shape}")
        t = ids.size
        if t > self.config.max_seq_len:
            raise LengthError(f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}")
        self._check_ids(ids)
        h = self._encode(ids[None, :], np.array([t]), training=training, rng=rng)
        return self._lm_logits(h)

    def forward_mlm_batch(self, ids: np.ndarray, lengths, *, training=False, rng=None) -> Tensor:
        """Logits [B*T, vocab_size] over a padded [B, T] batch."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise LengthError(f"forward_mlm_batch: need [B, T] ids, got {ids.shape}")
        if ids.shape[1] > self.config.max_seq_len:
            raise LengthError(
                f"batch width {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        self._check_ids(ids)
        h = self._encode(ids, np.asarray(lengths), training=training, rng=rng)
        return self._lm_logits(h)

    def forward_cls(self, a, b, *, training=False, rng=None) -> Tensor:
        """Class logits [n_classes] for the pair ([CLS] a [SEP] b)."""
        ids = pair_ids(a, b)
        if ids.size > self.config.max_seq_len:
            raise LengthError(
                f"pair length {ids.size} (with specials) exceeds max_seq_len {self.config.max_seq_len}"
            )
        self._check_ids(ids)
        h = self._encode(ids[None, :], np.array([ids.size]), training=training, rng=rng)
        pooled = T.slice_rows(h, 0, 1)  # hidden state over [CLS]
        logits = T.add_bias(T.matmul(pooled, self.params["cls_w"]), self.params["cls_b"])
        return T.reshape(logits, (self.config.n_classes,))

    def forward_cls_batch(self, pairs, *, training=False, rng=None) -> Tensor:
        """Class logits [B, n_classes] for a list of (a, b) pairs."""
        if not pairs:
            raise LengthError("forward_cls_batch: empty batch")
        seqs = [pair_ids(a, b) for a, b in pairs]
        lengths = np.array([s.size for s in seqs])
        S = int(lengths.max())
        if S > self.config.max_seq_len:
            raise LengthError(
                f"pair length {S} (with specials) exceeds max_seq_len {self.config.max_seq_len}"
            )
        B = len(seqs)
        ids = np.full((B, S), PAD_ID, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : s.size] = s
        self._check_ids(ids)
        h = self._encode(ids, lengths, training=training, rng=rng)
        pooled = T.gather_rows(h, np.arange(B, dtype=np.int64) * S)
        return T.add_bias(T.matmul(pooled, self.params["cls_w"]), self.params["cls_b"])
