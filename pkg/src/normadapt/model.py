"""Decoder-only transformer with a visual-prefix connector on the tape autograd.

Parameters live in a flat ParamTree keyed by dot-separated paths; that grammar
is shared verbatim with the strategy-selection and budget modules.  Projection
weights are stored (out, in) and applied as x @ W.T.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag

CHECKPOINT_MAGIC = b"NORMADAPT1"
NORM_KINDS = ("standard", "rms")
VISION_MODES = ("aligned", "unaligned")
_MASK_VALUE = -1e9  # drives masked softmax weights to exactly 0.0 via underflow


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 256
    max_seq: int = 96
    norm_kind: str = "standard"
    n_visual_tokens: int = 4
    d_visual: int = 64
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size",
                     "max_seq", "n_visual_tokens", "d_visual"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            setattr(self, name, int(value))
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.n_visual_tokens > self.max_seq:
            raise ValueError(
                f"n_visual_tokens {self.n_visual_tokens} exceeds max_seq {self.max_seq}")
        self.tie_embeddings = bool(self.tie_embeddings)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form scalar count for a built tree (no vision stub, no adapters)."""
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    norm = d if cfg.norm_kind == "rms" else 2 * d
    block = 2 * norm + 4 * d * d + 2 * d * ff
    total = v * d                                # embed
    total += cfg.max_seq * d                     # pos
    total += d * cfg.d_visual + d                # connector weight + bias
    total += cfg.n_layers * block + norm         # blocks + final norm
    if not cfg.tie_embeddings:
        total += v * d                           # head
    return total


class ParamTree:
    """Ordered path -> Tensor map; trainability is the tensor's requires_grad."""

    def __init__(self):
        self._params = {}

    def add(self, path: str, t: ag.Tensor):
        if path in self._params:
            raise ValueError(f"duplicate param path {path!r}")
        self._params[path] = t

    def remove(self, path: str):
        del self._params[path]

    def __contains__(self, path):
        return path in self._params

    def __getitem__(self, path) -> ag.Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise KeyError(f"no parameter at path {path!r}") from None

    def __len__(self):
        return len(self._params)

    def paths(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def total_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def trainable_paths(self):
        return [p for p, t in self._params.items() if t.requires_grad]

    def trainable_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values() if t.requires_grad)

    def freeze_all(self):
        for t in self._params.values():
            t.requires_grad = False
            t.grad = None

    def set_trainable(self, paths):
        self.freeze_all()
        for p in paths:
            self[p].requires_grad = True


class Model:
    def __init__(self, config: ModelConfig, tree: ParamTree, dtype):
        self.config = config
        self.tree = tree
        self.dtype = np.dtype(dtype)
        self.adapters = {}  # target path -> LoraAdapter, managed by the strategies module
        self._mask_cache = {}

    def param(self, path: str) -> ag.Tensor:
        return self.tree[path]

    def _const(self, x):
        return ag.tensor(np.asarray(x, dtype=self.dtype))

    def _proj(self, x, path):
        out = ag.matmul(x, self.tree[path], transpose_b=True)
        adapter = self.adapters.get(path)
        if adapter is not None:
            low = ag.matmul(x, adapter.A, transpose_b=True)      # (..., rank)
            up = ag.matmul(low, adapter.B, transpose_b=True)     # (..., out)
            out = ag.add(out, ag.mul(up, self._const(adapter.scaling)))
        return out

    def _norm(self, x, prefix):
        gain = self.tree[prefix + ".weight"]
        if self.config.norm_kind == "rms":
            return ag.rms_norm(x, gain)
        return ag.layer_norm(x, gain, self.tree[prefix + ".bias"])

    def _causal_mask(self, length):
        mask = self._mask_cache.get(length)
        if mask is None:
            m = np.triu(np.full((length, length), _MASK_VALUE, dtype=self.dtype), k=1)
            mask = ag.tensor(m[None, None])  # (1, 1, L, L)
            self._mask_cache[length] = mask
        return mask

    def _block(self, i, h, mask):
        cfg = self.config
        p = f"blocks.{i}."
        x = self._norm(h, p + "input_norm")
        bsz, length, d = x.data.shape
        hd = d // cfg.n_heads

        def heads(t):  # (B, L, d) -> (B, H, L, hd)
            return ag.transpose(ag.reshape(t, (bsz, length, cfg.n_heads, hd)),
                                (0, 2, 1, 3))

        q = heads(self._proj(x, p + "attn.q_proj.weight"))
        k = heads(self._proj(x, p + "attn.k_proj.weight"))
        v = heads(self._proj(x, p + "attn.v_proj.weight"))
        scores = ag.mul(ag.matmul(q, k, transpose_b=True), self._const(hd ** -0.5))
        att = ag.softmax(ag.add(scores, mask))
        ctx = ag.transpose(ag.matmul(att, v), (0, 2, 1, 3))
        ctx = ag.reshape(ctx, (bsz, length, d))
        h = ag.add(h, self._proj(ctx, p + "attn.o_proj.weight"))
        y = self._norm(h, p + "post_norm")
        y = self._proj(ag.silu(self._proj(y, p + "mlp.fc1.weight")),
                       p + "mlp.fc2.weight")
        return ag.add(h, y)

    def forward(self, tokens, visual=None, capture=None) -> ag.Tensor:
        """tokens (B, T) int ids, visual optional (B, n_visual_tokens, d_visual).

        Returns logits (B, n_vis + T, vocab).  capture, if given, is a list that
        collects each block's post-residual output as a detached array.
        """
        cfg = self.config
        ids = np.asarray(tokens)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ValueError(f"tokens must be 1-d or 2-d, got shape {ids.shape}")
        if ids.size == 0:
            raise ValueError("empty token sequence")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(
                f"token id out of range [0, {cfg.vocab_size}): "
                f"min {ids.min()}, max {ids.max()}")

        h = ag.embed_lookup(self.tree["embed.weight"], ids)
        n_vis = 0
        if visual is not None:
            feats = np.asarray(visual, dtype=self.dtype)
            if feats.ndim == 2:
                feats = feats[None]
            if feats.shape != (ids.shape[0], cfg.n_visual_tokens, cfg.d_visual):
                raise ValueError(
                    f"visual features must be (batch, {cfg.n_visual_tokens}, "
                    f"{cfg.d_visual}), got {feats.shape}")
            prefix = ag.add(
                ag.matmul(ag.tensor(feats), self.tree["connector.weight"],
                          transpose_b=True),
                self.tree["connector.bias"])
            h = ag.concat([prefix, h], axis=1)
            n_vis = cfg.n_visual_tokens

        length = ids.shape[1] + n_vis
        if length > cfg.max_seq:
            raise ValueError(f"sequence length {length} exceeds max_seq {cfg.max_seq}")
        h = ag.add(h, ag.embed_lookup(self.tree["pos.weight"], np.arange(length)))

        mask = self._causal_mask(length)
        for i in range(cfg.n_layers):
            h = self._block(i, h, mask)
            if capture is not None:
                capture.append(h.data.copy())
        h = self._norm(h, "final_norm")
        head = self.tree["embed.weight" if cfg.tie_embeddings else "head.weight"]
        return ag.matmul(h, head, transpose_b=True)

    def capture_layer_outputs(self, tokens, visual=None):
        """Per-block post-residual hidden states, one (B, L, d) array per layer."""
        grabbed = []
        with ag.no_grad():
            self.forward(tokens, visual, capture=grabbed)
        return grabbed


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Init: normal(0, 0.02) projections, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    tree = ParamTree()

    def proj(path, shape):
        tree.add(path, ag.tensor(rng.normal(0.0, 0.02, shape).astype(dt),
                                 requires_grad=True))

    def zeros(path, shape):
        tree.add(path, ag.tensor(np.zeros(shape, dtype=dt), requires_grad=True))

    def norm(prefix):
        tree.add(prefix + ".weight",
                 ag.tensor(np.ones(config.d_model, dtype=dt), requires_grad=True))
        if config.norm_kind == "standard":
            zeros(prefix + ".bias", config.d_model)

    proj("embed.weight", (config.vocab_size, config.d_model))
    proj("pos.weight", (config.max_seq, config.d_model))
    proj("connector.weight", (config.d_model, config.d_visual))
    zeros("connector.bias", config.d_model)
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        norm(p + "input_norm")
        for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
            proj(p + f"attn.{name}.weight", (config.d_model, config.d_model))
        norm(p + "post_norm")
        proj(p + "mlp.fc1.weight", (config.d_ff, config.d_model))
        proj(p + "mlp.fc2.weight", (config.d_model, config.d_ff))
    norm("final_norm")
    if not config.tie_embeddings:
        proj("head.weight", (config.vocab_size, config.d_model))

    got, want = tree.total_scalars(), expected_param_count(config)
    if got != want:
        raise AssertionError(f"built {got} scalars, closed form says {want}")
    return Model(config, tree, dt)


class VisionStub:
    """Deterministic stand-in for a frozen vision encoder.

    A fixed table of per-slot feature vectors (drawn once from `seed`) plus
    per-sample noise keyed by (seed, sample_id).  `unaligned` warps the table
    through a fixed random tanh layer so no linear connector can match the
    aligned geometry.  Never trainable.
    """

    def __init__(self, d_visual, n_slots, mode="aligned", seed=0, noise_std=0.05):
        if mode not in VISION_MODES:
            raise ValueError(f"mode must be one of {VISION_MODES}, got {mode!r}")
        self.d_visual = int(d_visual)
        self.n_slots = int(n_slots)
        self.mode = mode
        self.seed = int(seed)
        self.noise_std = float(noise_std)
        rng = np.random.default_rng(self.seed)
        table = rng.normal(0.0, 1.0, (self.n_slots, self.d_visual))
        if mode == "unaligned":
            warp = rng.normal(0.0, 1.0, (self.d_visual, self.d_visual))
            table = np.tanh(table @ (warp / np.sqrt(self.d_visual))) * 1.5
        self._table = table

    def features(self, slot_ids, sample_id) -> np.ndarray:
        """slot_ids (n_tokens,) -> (n_tokens, d_visual) float64."""
        slots = np.asarray(slot_ids)
        if slots.min() < 0 or slots.max() >= self.n_slots:
            raise ValueError(f"slot id out of range [0, {self.n_slots})")
        rng = np.random.default_rng((self.seed, int(sample_id)))
        noise = rng.standard_normal((slots.size, self.d_visual))
        return self._table[slots] + self.noise_std * noise


def save_checkpoint(model: Model, path):
    """Flat (path, dtype, shape, raw LE buffer) records behind a config header."""
    if model.adapters:
        raise ValueError("model has unmerged adapters; merge before saving")
    header = json.dumps({"config": asdict(model.config),
                         "dtype": model.dtype.name}).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(model.tree)))
        for p, t in model.tree.items():
            arr = np.ascontiguousarray(t.data)
            dstr = arr.dtype.newbyteorder("<").str.encode()
            name = p.encode()
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<H", len(dstr)))
            f.write(dstr)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        if _read_exact(f, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, hlen))
        model = build(ModelConfig(**header["config"]), seed=0,
                      dtype=np.dtype(header["dtype"]))
        (n_records,) = struct.unpack("<I", _read_exact(f, 4))
        seen = set()
        for _ in range(n_records):
            (plen,) = struct.unpack("<H", _read_exact(f, 2))
            p = _read_exact(f, plen).decode()
            (dlen,) = struct.unpack("<H", _read_exact(f, 2))
            dt = np.dtype(_read_exact(f, dlen).decode())
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}q", _read_exact(f, 8 * ndim))
            raw = _read_exact(f, dt.itemsize * int(np.prod(shape, dtype=np.int64)))
            if p not in model.tree:
                raise ValueError(f"checkpoint record {p!r} not in model tree")
            t = model.tree[p]
            arr = np.frombuffer(raw, dtype=dt).reshape(shape)
            if arr.shape != t.data.shape:
                raise ValueError(f"{p}: shape {arr.shape} != expected {t.data.shape}")
            t.data = np.array(arr, dtype=model.dtype)
            seen.add(p)
        if len(seen) != len(model.tree):
            missing = sorted(set(model.tree.paths()) - seen)
            raise ValueError(f"checkpoint missing {len(missing)} params, e.g. {missing[:3]}")
    return model
