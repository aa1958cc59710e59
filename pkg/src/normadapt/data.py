"""Synthetic attribute-retrieval tasks, text-only and visual-prefix variants.

Every sample hides a latent attribute vector z (n_attrs values, each in
[0, n_values)).  Text pretraining declares the attributes in-context as
(marker, value-token) pairs; the multimodal variant drops the declarations
and supplies one visual feature per attribute instead, so answering requires
reading the connector-projected prefix.  Three body categories:

  conversation  repeated (Q, ATTR_k -> VAL token) rounds
  description   enumerate all attribute values in order
  reasoning     compare two attributes, answer GT / LT / EQ

Targets are next-token ids with -1 everywhere loss is masked: text
pretraining scores every non-pad transition, adaptation scores answers only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import VisionStub

PAD, BOS, SEP, Q, DESC, CMP, GT, LT, EQ = range(9)
_N_SPECIALS = 9
N_ROUNDS = 3  # conversation rounds per sample

CATEGORIES = ("conversation", "description", "reasoning")
TASK_KINDS = ("text-pretrain", "mm-adapt")

IGNORE = -1

# default stub shared by train/eval splits: same slot->feature table
_DEFAULT_STUB_SEED = 7


def attr_token(k):
    return _N_SPECIALS + k


def value_token(k, v, n_attrs, n_values):
    return _N_SPECIALS + n_attrs + k * n_values + v


def vocab_required(n_attrs, n_values):
    return _N_SPECIALS + n_attrs + n_attrs * n_values


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n_samples: int
    seq_len: int = 24
    mixture: tuple = (1 / 3, 1 / 3, 1 / 3)
    n_attrs: int = 4
    n_values: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.n_samples <= 0:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")
        mix = tuple(float(w) for w in self.mixture)
        if len(mix) != len(CATEGORIES) or any(w < 0 for w in mix):
            raise ValueError(f"mixture needs {len(CATEGORIES)} non-negative weights")
        if abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {sum(mix)}")
        object.__setattr__(self, "mixture", mix)
        if self.seq_len < self.max_body_len():
            raise ValueError(
                f"seq_len {self.seq_len} below worst-case sample length "
                f"{self.max_body_len()} for kind {self.kind}")

    def max_body_len(self) -> int:
        head = 2  # BOS, SEP
        if self.kind == "text-pretrain":
            head += 2 * self.n_attrs
        body = max(3 * N_ROUNDS, 1 + self.n_attrs, 3)
        return head + body


@dataclass
class Dataset:
    spec: TaskSpec
    tokens: np.ndarray        # (n, seq_len) int64, PAD-filled
    targets: np.ndarray       # (n, L) int64; L = seq_len (+ n_attrs when visual)
    answer_mask: np.ndarray   # (n, seq_len) bool over text positions
    categories: np.ndarray    # (n,) int index into CATEGORIES
    values: np.ndarray        # (n, n_attrs) latent attribute values
    features: np.ndarray = None  # (n, n_attrs, d_visual) for mm-adapt

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def vocab_required(self):
        return vocab_required(self.spec.n_attrs, self.spec.n_values)


def _body(category, z, rng, spec):
    """Returns (body tokens, body answer mask)."""
    K, M = spec.n_attrs, spec.n_values
    toks, mask = [], []
    if category == 0:  # conversation
        for k in rng.permutation(K)[:N_ROUNDS]:
            toks += [Q, attr_token(k), value_token(k, z[k], K, M)]
            mask += [False, False, True]
    elif category == 1:  # description
        toks.append(DESC)
        mask.append(False)
        for k in range(K):
            toks.append(value_token(k, z[k], K, M))
            mask.append(True)
    else:  # reasoning
        i, j = rng.permutation(K)[:2]
        rel = GT if z[i] > z[j] else (LT if z[i] < z[j] else EQ)
        toks += [CMP, attr_token(i), attr_token(j), rel]
        mask += [False, False, False, True]
    return toks, mask


def generate(spec: TaskSpec, stub: VisionStub = None) -> Dataset:
    """Deterministic per spec.seed; visual features keyed by (stub seed, sample)."""
    K, M = spec.n_attrs, spec.n_values
    n, T = spec.n_samples, spec.seq_len
    visual = spec.kind == "mm-adapt"
    if visual and stub is None:
        stub = VisionStub(d_visual=64, n_slots=K * M, mode="aligned",
                          seed=_DEFAULT_STUB_SEED)

    tokens = np.full((n, T), PAD, dtype=np.int64)
    answer_mask = np.zeros((n, T), dtype=bool)
    categories = np.zeros(n, dtype=np.int64)
    values = np.zeros((n, K), dtype=np.int64)
    features = np.zeros((n, K, stub.d_visual)) if visual else None

    prefix = K if visual else 0
    targets = np.full((n, prefix + T), IGNORE, dtype=np.int64)

    for i in range(n):
        rng = np.random.default_rng((spec.seed, i))
        cat = int(rng.choice(len(CATEGORIES), p=spec.mixture))
        z = rng.integers(0, M, size=K)
        toks, mask = [BOS], [False]
        if not visual:
            for k in range(K):
                toks += [attr_token(k), value_token(k, z[k], K, M)]
                mask += [False, False]
        toks.append(SEP)
        mask.append(False)
        body, body_mask = _body(cat, z, rng, spec)
        toks += body
        mask += body_mask

        tokens[i, :len(toks)] = toks
        answer_mask[i, :len(mask)] = mask
        categories[i] = cat
        values[i] = z
        if visual:
            slots = np.arange(K) * M + z
            features[i] = stub.features(slots, sample_id=spec.seed * 1_000_003 + i)

        # next-token targets over the combined (prefix + text) sequence
        for j in range(len(toks) - 1):
            score = mask[j + 1] if visual else toks[j + 1] != PAD
            if score:
                targets[i, prefix + j] = toks[j + 1]

    return Dataset(spec=spec, tokens=tokens, targets=targets,
                   answer_mask=answer_mask, categories=categories,
                   values=values, features=features)


def expected_answers(sample_tokens, z, spec: TaskSpec):
    """Oracle: recompute every masked answer token from the latent alone.

    Returns (position, token) pairs over the text sequence.
    """
    K, M = spec.n_attrs, spec.n_values
    toks = list(sample_tokens)
    out = []
    i = toks.index(SEP) + 1
    while i < len(toks) and toks[i] != PAD:
        if toks[i] == Q:
            k = toks[i + 1] - _N_SPECIALS
            out.append((i + 2, value_token(k, z[k], K, M)))
            i += 3
        elif toks[i] == DESC:
            for k in range(K):
                out.append((i + 1 + k, value_token(k, z[k], K, M)))
            i += 1 + K
        elif toks[i] == CMP:
            a = toks[i + 1] - _N_SPECIALS
            b = toks[i + 2] - _N_SPECIALS
            rel = GT if z[a] > z[b] else (LT if z[a] < z[b] else EQ)
            out.append((i + 3, rel))
            i += 4
        else:
            raise ValueError(f"unparseable body token {toks[i]} at {i}")
    return out
