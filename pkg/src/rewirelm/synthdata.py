"""Synthetic languages: order-2 Markov grammars with distance knobs.

A language is a 64-token content band laid over the shared 256-token
vocabulary (ids 0-3 are reserved).  Target languages are derived from a
base grammar with three knobs:

* script_offset  — shifts the content band, so surface forms never overlap,
* swap_fraction  — permutes a fraction of the trigram transition rows,
* reverse_word_order — reverses every generated sequence.

CLOSE keeps the grammar and only moves the script; MEDIUM also swaps half
the transition rows; DISTANT swaps all of them and reverses word order.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, PreconditionError, SizeError
from .model import MASK_ID, N_RESERVED

CONTENT_BAND = 64
VOCAB_TOTAL = 256
MIN_SEQ_LEN = 16
MAX_SEQ_LEN = 64
PAIR_LEN = 28  # length of each side of a classification pair

DISTANCES = ("close", "medium", "distant")

# independent seed streams
_S_GRAMMAR = 17
_S_SWAP = 23
_S_CORPUS = 1
_S_MASK = 2
_S_CLS = 3
_S_SUBSAMPLE = 4


@dataclass(frozen=True)
class LanguageSpec:
    name: str
    grammar_seed: int
    script_offset: int = 0
    swap_fraction: float = 0.0
    reverse_word_order: bool = False

    def validate(self):
        if self.script_offset < 0 or self.script_offset % CONTENT_BAND != 0:
            raise ConfigError(
                f"script_offset must be a nonnegative multiple of {CONTENT_BAND}, "
                f"got {self.script_offset}"
            )
        if N_RESERVED + self.script_offset + CONTENT_BAND > VOCAB_TOTAL:
            raise ConfigError(
                f"content band at offset {self.script_offset} exceeds vocabulary {VOCAB_TOTAL}"
            )
        if not 0.0 <= self.swap_fraction <= 1.0:
            raise ConfigError(f"swap_fraction must be in [0, 1], got {self.swap_fraction}")
        return self

    @property
    def band_start(self):
        return N_RESERVED + self.script_offset


def make_language(base: LanguageSpec, distance: str) -> LanguageSpec:
    """Derive a target language from a base at one of three distances.

    All targets share the same shifted band: they never co-occur inside a
    single model, so reusing the band keeps the shared 256-token vocabulary
    small while still guaranteeing zero surface overlap with the base.
    """
    base.validate()
    if base.script_offset != 0 or base.swap_fraction != 0 or base.reverse_word_order:
        raise PreconditionError("make_language expects an unmodified base language")
    d = distance.lower()
    if d not in DISTANCES:
        raise ConfigError(f"distance must be one of {DISTANCES}, got {distance!r}")
    knobs = {
        "close": dict(swap_fraction=0.0, reverse_word_order=False),
        "medium": dict(swap_fraction=0.5, reverse_word_order=False),
        "distant": dict(swap_fraction=1.0, reverse_word_order=True),
    }[d]
    return replace(base, name=f"{base.name}-{d}", script_offset=CONTENT_BAND, **knobs)


# ---------------------------------------------------------------------------
# grammar tables

_STAT_ITERS = 60

# Undirected community backbone.  Successors are drawn almost exclusively
# from the current token's community (plus a weak ring hop to the adjacent
# community), so a pair of sequences that open in the same community stays
# coarsely indistinguishable: telling them apart requires the fine trigram
# law, not token-group membership.
_COMMUNITIES = 8
_RING_EPS = 0.001

# The trigram conditionals are softmax rows of a Gaussian field split into
# a reversal-symmetric part and an antisymmetric remainder.  _TRI_SHARP
# scales the whole field (sharper rows -> lower conditional entropy, easier
# for a small model to master); _REV_MIX sets how much of the field is
# antisymmetric, i.e. how statistically visible reversing a sequence is.
# Keeping the two on separate axes matters: symmetrizing an already-drawn
# law by averaging it with its reverse flattens the rows it is supposed to
# preserve.
_TRI_SHARP = 3.0
_REV_MIX = 0.15


def _token_affinity():
    comm = np.arange(CONTENT_BAND) * _COMMUNITIES // CONTENT_BAND
    same = comm[:, None] == comm[None, :]
    step = (comm[:, None] - comm[None, :]) % _COMMUNITIES
    ring = (step == 1) | (step == _COMMUNITIES - 1)
    return np.where(same, 1.0, np.where(ring, _RING_EPS, 0.0))


def _raw_law(rng):
    """Community-shaped trigram conditionals p(c | a, b)."""
    w = _token_affinity()
    z = rng.normal(size=(CONTENT_BAND,) * 3)
    zr = z.transpose(2, 1, 0)
    sym = (z + zr) / np.sqrt(2.0)
    anti = (z - zr) / np.sqrt(2.0)
    field = _TRI_SHARP * (np.sqrt(1.0 - _REV_MIX**2) * sym + _REV_MIX * anti)
    raw = w[None, :, :] * np.exp(field)
    raw /= raw.sum(axis=2, keepdims=True)
    # calibrate per-token log-offsets until the stationary token marginal is
    # near-uniform: frequency alone must not fingerprint a token, or counting
    # occurrences would shortcut every relabeling
    u = np.zeros(CONTENT_BAND)
    for _ in range(40):
        pi1 = _pair_stationary(raw).sum(axis=1)
        u -= 0.7 * np.log(pi1 * CONTENT_BAND + 1e-30)
        raw = w[None, :, :] * np.exp(field + u[None, None, :])
        raw /= raw.sum(axis=2, keepdims=True)
    return raw


def _pair_stationary(tri):
    """Stationary distribution over adjacent token pairs of the order-2 chain."""
    b = CONTENT_BAND
    pi = np.full((b, b), 1.0 / (b * b))
    for _ in range(_STAT_ITERS):
        pi = np.einsum("ab,abc->bc", pi, tri)
        s = pi.sum()
        if s <= 0:
            raise PreconditionError("degenerate grammar: stationary mass vanished")
        pi /= s
    return pi


def _conjugation(rng, fraction):
    """Token bijection whose induced row permutation moves ~fraction of rows.

    Relabeling tokens by g permutes transition rows (a,b) -> (g(a), g(b)),
    so text drawn from the permuted tables is exactly base-lawful after
    applying the inverse relabeling.  A language at swap_fraction f is
    therefore *re-learnable* through a frozen body — the adaptation stage
    has to rediscover the hidden assignment — rather than statistically
    lawless.  Moving a token subset of size m touches 1-(1-m/64)^2 of rows.
    """
    g = np.arange(CONTENT_BAND)
    if fraction <= 0:
        return g
    if fraction >= 1:
        m = CONTENT_BAND
    else:
        m = int(round(CONTENT_BAND * (1.0 - np.sqrt(1.0 - fraction))))
        m = max(2, m)
    moved = np.sort(rng.choice(CONTENT_BAND, size=m, replace=False))
    order = rng.permutation(m)
    g[moved[order]] = moved[np.roll(order, -1)]  # one cycle: no fixed points
    return g


_grammar_cache = {}


def _grammar(spec: LanguageSpec):
    """(start_cum, bi_cum, tri_cum, comm) tables for a language, cached.

    comm[t] is the community the band-local token t behaves as under THIS
    language's law (the base partition pushed through any relabeling).
    """
    key = (spec.grammar_seed, spec.swap_fraction)
    hit = _grammar_cache.get(key)
    if hit is not None:
        return hit
    b = CONTENT_BAND
    rng = np.random.default_rng(np.random.SeedSequence((spec.grammar_seed, _S_GRAMMAR)))
    tri = _raw_law(rng)
    comm = np.arange(b) * _COMMUNITIES // b
    if spec.swap_fraction > 0:
        rng_swap = np.random.default_rng(np.random.SeedSequence((spec.grammar_seed, _S_SWAP)))
        g = _conjugation(rng_swap, spec.swap_fraction)
        tri = tri[np.ix_(g, g, g)]
        comm = comm[g]  # relabeled token t follows the law of base token g[t]
    # start every sequence in the stationary law so position carries no
    # grammar signal and reversed surfaces stay comparable at the edges
    pi = _pair_stationary(tri)
    start = pi.sum(axis=1)
    bi = pi / (start[:, None] + 1e-30)
    tri = tri + 1e-12  # keep every row sample-able even if unreachable
    tables = (start.cumsum(), bi.cumsum(axis=1),
              tri.reshape(b * b, b).cumsum(axis=1), comm)
    _grammar_cache[key] = tables
    return tables


def _sample_raw(tables, length: int, rng, start_comm=None) -> np.ndarray:
    """One sequence of band-local ids (0..63) from the Markov tables.

    start_comm pins the first token's community (rejection on the start
    draw only; the chain itself is untouched).
    """
    start_cum, bi_cum, tri_cum, comm = tables
    u = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    t = int(np.searchsorted(start_cum, u[0] * start_cum[-1]))
    if start_comm is not None:
        for _ in range(1000):
            if comm[t] == start_comm:
                break
            t = int(np.searchsorted(start_cum, rng.random() * start_cum[-1]))
        else:
            raise PreconditionError(f"no start token found in community {start_comm}")
    out[0] = t
    if length > 1:
        row = bi_cum[t]
        t2 = int(np.searchsorted(row, u[1] * row[-1]))
        out[1] = t2
        prev2, prev1 = t, t2
        for i in range(2, length):
            row = tri_cum[prev2 * CONTENT_BAND + prev1]
            nxt = int(np.searchsorted(row, u[i] * row[-1]))
            out[i] = nxt
            prev2, prev1 = prev1, nxt
    return out


def _finish(spec: LanguageSpec, raw: np.ndarray) -> np.ndarray:
    ids = raw + spec.band_start
    if spec.reverse_word_order:
        ids = ids[::-1].copy()
    return ids


@dataclass
class Corpus:
    spec: LanguageSpec
    sequences: list
    n_tokens: int
    seed: int

    def token_bytes(self) -> bytes:
        """Canonical byte view of the token stream (for content hashing)."""
        if not self.sequences:
            return b""
        return np.concatenate(self.sequences).astype("<i8").tobytes()


def generate_corpus(spec: LanguageSpec, n_tokens: int, seed: int) -> Corpus:
    """Sample whole sequences until at least n_tokens are accumulated.

    Stops at the first sequence that crosses the target, so the total lands
    in [n_tokens, n_tokens + MAX_SEQ_LEN).  Fully determined by
    (spec, n_tokens, seed).
    """
    spec.validate()
    if n_tokens < MAX_SEQ_LEN:
        raise PreconditionError(f"n_tokens must be >= {MAX_SEQ_LEN}, got {n_tokens}")
    tables = _grammar(spec)
    rng = np.random.default_rng(np.random.SeedSequence((seed, _S_CORPUS)))
    seqs = []
    total = 0
    while total < n_tokens:
        length = int(rng.integers(MIN_SEQ_LEN, MAX_SEQ_LEN + 1))
        seqs.append(_finish(spec, _sample_raw(tables, length, rng)))
        total += length
    return Corpus(spec=spec, sequences=seqs, n_tokens=total, seed=seed)


def subsample_budget(corpus: Corpus, budget: int, seed: int) -> Corpus:
    """Seeded random subsample with at least `budget` tokens.

    Sequences are taken in a seeded shuffled order until the budget is
    crossed, never splitting a sequence.  The same seed yields nested
    subsets across budgets: a smaller budget is a prefix of a larger one.
    """
    if budget < 1:
        raise PreconditionError(f"budget must be >= 1, got {budget}")
    if budget > corpus.n_tokens:
        raise SizeError(f"budget {budget} exceeds corpus size {corpus.n_tokens}")
    order = np.random.default_rng(
        np.random.SeedSequence((seed, _S_SUBSAMPLE))
    ).permutation(len(corpus.sequences))
    seqs = []
    total = 0
    for i in order:
        seqs.append(corpus.sequences[i])
        total += len(corpus.sequences[i])
        if total >= budget:
            break
    return Corpus(spec=corpus.spec, sequences=seqs, n_tokens=total, seed=corpus.seed)


# ---------------------------------------------------------------------------
# masking


def mlm_mask(sequence, seed, vocab_size=VOCAB_TOTAL):
    """Select ~15% of positions (at least one) and corrupt them 80/10/10.

    Returns (input_ids, target_ids, positions): inputs with the selected
    positions replaced by [MASK] (80%), a random content token (10%), or
    left unchanged (10%); targets are the original ids at those positions.
    """
    seq = np.asarray(sequence, dtype=np.int64)
    if seq.ndim != 1 or seq.size == 0:
        raise PreconditionError("mlm_mask needs a non-empty 1-D sequence")
    if isinstance(seed, (np.random.SeedSequence, np.random.Generator)):
        rng = np.random.default_rng(seed)
    else:
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), _S_MASK)))
    n_sel = max(1, int(0.15 * seq.size + 0.5))
    positions = np.sort(rng.choice(seq.size, size=n_sel, replace=False))
    u = rng.random(n_sel)
    random_ids = rng.integers(N_RESERVED, vocab_size, size=n_sel)
    inputs = seq.copy()
    inputs[positions[u < 0.8]] = MASK_ID
    swap = (u >= 0.8) & (u < 0.9)
    inputs[positions[swap]] = random_ids[swap]
    # final 10%: left as-is
    return inputs, seq[positions].copy(), positions


# ---------------------------------------------------------------------------
# classification task


@dataclass(frozen=True)
class ClsExample:
    a: np.ndarray
    b: np.ndarray
    label: int


@dataclass
class ClsDataset:
    language: str
    examples: list


def classify_pair(a, b) -> int:
    """Label rule: near-copy -> 0, shuffled multiset-equal -> 1, else 2.

    Near-copy means same length with at most floor(len/10) differing
    positions.  The rule only compares token ids, so any bijective remap of
    the vocabulary leaves labels unchanged.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size == b.size:
        if int((a != b).sum()) <= a.size // 10:
            return 0
        if np.array_equal(np.sort(a), np.sort(b)):
            return 1
    return 2


def make_cls_dataset(spec: LanguageSpec, n_examples: int, seed: int) -> ClsDataset:
    """Balanced three-way pair classification data in the given language.

    Generation guarantees each example satisfies classify_pair's rule for
    its label (ambiguous draws are rejected and resampled).
    """
    spec.validate()
    if n_examples < 3:
        raise PreconditionError(f"need at least 3 examples, got {n_examples}")
    tables = _grammar(spec)
    comm = tables[3]
    rng = np.random.default_rng(np.random.SeedSequence((seed, _S_CLS)))
    lo = spec.band_start
    examples = []

    def sample_local(length, start_comm=None):
        # degenerate near-loops make shuffled/independent labels unstable;
        # insist on a little token diversity
        s = _sample_raw(tables, length, rng, start_comm=start_comm)
        while np.unique(s).size < 4:
            s = _sample_raw(tables, length, rng, start_comm=start_comm)
        return s

    for i in range(n_examples):
        label = i % 3
        # fixed pair length: b always starts at the same absolute position,
        # and sequence length carries no information about the label
        la = PAIR_LEN
        ra = sample_local(la)
        a = _finish(spec, ra)
        if label == 0:
            b = a.copy()
            n_noise = int(rng.integers(0, la // 10 + 1))
            if n_noise:
                pos = rng.choice(la, size=n_noise, replace=False)
                for p in pos:
                    # plausible typo: swap in a community-mate, so noise
                    # carries no out-of-place token the pair rule ignores
                    mates = np.flatnonzero(comm == comm[b[p] - lo])
                    t = lo + int(rng.choice(mates))
                    while t == a[p]:
                        t = lo + int(rng.choice(mates))
                    b[p] = t
        elif label == 1:
            b = rng.permutation(a)
            # a transposition can masquerade as a near-copy; reject those
            while int((a != b).sum()) <= la // 10:
                b = rng.permutation(a)
        else:
            # matched negative: an independent lawful sample opening in a's
            # community, so coarse token-group identity alone cannot expose it
            rb = sample_local(la, start_comm=int(comm[ra[0]]))
            b = _finish(spec, rb)
            while classify_pair(a, b) != 2:
                rb = sample_local(la, start_comm=int(comm[ra[0]]))
                b = _finish(spec, rb)
        examples.append(ClsExample(a=a, b=b, label=label))
    return ClsDataset(language=spec.name, examples=examples)


# ---------------------------------------------------------------------------
# corpus files

_HEADER_RE = re.compile(r"^#lang=(\S+) seed=(\d+) tokens=(\d+)$")


def save_corpus(corpus: Corpus, path):
    """One header line, then one space-separated sequence per line."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        f.write(f"#lang={corpus.spec.name} seed={corpus.seed} tokens={corpus.n_tokens}\n")
        for seq in corpus.sequences:
            f.write(" ".join(map(str, seq)))
            f.write("\n")
    os.replace(tmp, path)


def load_corpus(path) -> Corpus:
    """Parse a corpus file; the spec carries only what the header records."""
    with open(path) as f:
        header = f.readline().rstrip("\n")
        m = _HEADER_RE.match(header)
        if not m:
            raise ValueError(f"bad corpus header: {header!r}")
        name, seed, declared = m.group(1), int(m.group(2)), int(m.group(3))
        seqs = []
        for line in f:
            line = line.strip()
            if line:
                seqs.append(np.array(line.split(), dtype=np.int64))
    total = int(sum(len(s) for s in seqs))
    if total != declared:
        raise ValueError(f"corpus declares {declared} tokens but contains {total}")
    # grammar parameters are not serialized; the loaded spec is name-only
    spec = LanguageSpec(name=name, grammar_seed=0)
    return Corpus(spec=spec, sequences=seqs, n_tokens=total, seed=seed)
