"""Miniature bidirectional transformer encoder with a weight-tied MLM head.

All parameters are float64 and live in a flat name -> Parameter map. The
MLM head decoder is never materialized: vocabulary logits always multiply
by the transpose of the current token embedding matrix, so weight tying
holds by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .corpus import Example, Vocabulary, encode_plain, pad_batch, MASK_ID

FREEZE_POLICIES = ("none", "mlm_head", "encoder")
LAYERNORM_EPS = 1e-5


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Deterministic name -> shape map for every model parameter."""
    v, d, f = config.vocab_size, config.d_model, config.d_ff
    shapes = {
        "emb.tok": (v, d),
        "emb.pos": (config.max_len, d),
        "mlm_head.dense.w": (d, d),
        "mlm_head.dense.b": (d,),
        "mlm_head.ln.g": (d,),
        "mlm_head.ln.b": (d,),
        "mlm_head.dec_bias": (v,),
    }
    for i in range(config.n_layers):
        p = f"block{i}"
        for mat in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{mat}"] = (d, d)
        for vec in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{vec}"] = (d,)
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    return shapes


def glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape)
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class ModelParams:
    """Named parameter store plus the active freeze policy."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        self.freeze_policy = "none"

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def named(self) -> dict[str, Parameter]:
        return self.params

    @property
    def detach_tied_decoder(self) -> bool:
        # under a frozen MLM head the tied decoder contributes no gradient
        # to the embedding matrix; the encoder path still trains it
        return self.freeze_policy == "mlm_head"

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for n, p in self.params.items():
            p.data = np.array(state[n], dtype=np.float64)

    def checksums(self, prefix: str = "") -> dict[str, str]:
        return {
            n: hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
            for n, p in self.params.items()
            if n.startswith(prefix)
        }

    def clone(self) -> "ModelParams":
        out = init_params(self.config, seed=0)
        out.load_state(self.state_dict())
        set_freeze(out, self.freeze_policy)
        return out


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform matrices, zero biases, unit layernorm gains."""
    rng = np.random.default_rng([seed, 0x11])
    params = {}
    for name, shape in param_shapes(config).items():
        data = glorot(rng, shape)
        if name.endswith((".g", "ln.g")) or name.endswith("ln1.g") or name.endswith("ln2.g"):
            data = np.ones(shape)
        params[name] = Parameter(data, name)
    return ModelParams(config, params)


def set_freeze(params: ModelParams, policy: str):
    """Apply a freeze policy: "none" trains everything, "mlm_head" pins the
    head-exclusive parameters (dense, layernorm, decoder bias), "encoder"
    pins the embeddings and every encoder block."""
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}; expected one of {FREEZE_POLICIES}")
    for name, p in params.named().items():
        if policy == "none":
            p.set_frozen(False)
        elif policy == "mlm_head":
            p.set_frozen(name.startswith("mlm_head."))
        else:
            p.set_frozen(name.startswith(("emb.", "block")))
    params.freeze_policy = policy


# -- forward passes ---------------------------------------------------------


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps) * gain + bias


def encoder_forward(
    params: ModelParams,
    ids: np.ndarray,
    attn_len: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the encoder on a padded id batch; returns hidden states [B, L, D].

    Padding positions are excluded from attention. Dropout fires only in
    train mode (rng required when dropout_p > 0).
    """
    cfg = params.config
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    attn_len = np.atleast_1d(np.asarray(attn_len, dtype=np.int64))
    batch, length = ids.shape
    if length > cfg.max_len:
        raise ValueError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    drop_p = cfg.dropout_p if train_mode else 0.0
    if drop_p > 0.0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")

    pad = np.arange(length)[None, :] >= attn_len[:, None]
    attn_bias = Tensor(np.where(pad, -1e9, 0.0)[:, None, None, :])

    x = ad.embedding(params["emb.tok"], ids) + params["emb.pos"][:length]
    x = dropout(x, drop_p, rng)

    n_heads = cfg.n_heads
    d_head = cfg.d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)
    for i in range(cfg.n_layers):
        p = f"block{i}"

        def heads(t):
            return t.reshape((batch, length, n_heads, d_head)).swapaxes(1, 2)

        q = heads(x @ params[f"{p}.attn.wq"] + params[f"{p}.attn.bq"])
        k = heads(x @ params[f"{p}.attn.wk"] + params[f"{p}.attn.bk"])
        v = heads(x @ params[f"{p}.attn.wv"] + params[f"{p}.attn.bv"])
        scores = (q @ k.T) * scale + attn_bias
        ctx = ad.softmax(scores, axis=-1) @ v
        ctx = ctx.swapaxes(1, 2).reshape((batch, length, cfg.d_model))
        attn_out = dropout(ctx @ params[f"{p}.attn.wo"] + params[f"{p}.attn.bo"], drop_p, rng)
        x = layer_norm(x + attn_out, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])

        h = ad.gelu(x @ params[f"{p}.ffn.w1"] + params[f"{p}.ffn.b1"]) @ params[f"{p}.ffn.w2"]
        h = dropout(h + params[f"{p}.ffn.b2"], drop_p, rng)
        x = layer_norm(x + h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    return x


def mlm_logits_at(params: ModelParams, hidden: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Vocabulary logits of hidden[rows, cols]: dense -> gelu -> layernorm
    -> tied decoder (transpose of the embedding matrix) plus bias."""
    h = hidden[(np.asarray(rows), np.asarray(cols))]
    h = ad.gelu(h @ params["mlm_head.dense.w"] + params["mlm_head.dense.b"])
    h = layer_norm(h, params["mlm_head.ln.g"], params["mlm_head.ln.b"])
    emb = params["emb.tok"]
    decoder = Tensor(emb.data) if params.detach_tied_decoder else emb
    return h @ decoder.T + params["mlm_head.dec_bias"]


def mlm_forward(hidden: Tensor, pos: int, params: ModelParams) -> Tensor:
    """Vocabulary logit vector for one position of a single sequence."""
    if hidden.ndim != 2:
        raise ValueError("mlm_forward expects [length, d_model] hidden states")
    length = hidden.shape[0]
    if not 0 <= pos < length:
        raise ValueError(f"position {pos} out of range for length {length}")
    batched = hidden.reshape((1, length, hidden.shape[1]))
    return mlm_logits_at(params, batched, np.array([0]), np.array([pos])).reshape((-1,))


# -- gradients and updates ----------------------------------------------------


def compute_gradients(loss: Tensor, named_params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    """Backward pass; returns a gradient per unfrozen parameter (zeros for
    unfrozen parameters the loss never touched)."""
    if not np.isfinite(loss.data).all():
        raise ValueError("refusing to differentiate a non-finite loss")
    for p in named_params.values():
        p.zero_grad()
    loss.backward()
    grads = {}
    for name, p in named_params.items():
        if p.frozen:
            continue
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


class Adam:
    """Adam with bias correction; frozen parameters are never touched."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state: dict[str, list[np.ndarray]] = {}

    def step(self, named_params: dict[str, Parameter], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = named_params[name]
            if p.frozen:
                continue
            m, v = self.state.setdefault(name, [np.zeros_like(p.data), np.zeros_like(p.data)])
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- MLM pre-training ---------------------------------------------------------


def corrupt_for_mlm(
    ids: np.ndarray,
    attn_len: np.ndarray,
    vocab_size: int,
    rng: np.random.Generator,
    mask_rate: float,
    lo_offsets: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """BERT-style corruption: select positions at mask_rate, replace 80%
    with [MASK], 10% with a random non-special token, 10% unchanged.

    Returns (corrupted ids, rows, cols, is_masked) where rows/cols index
    every selected position and is_masked flags the [MASK]-replaced ones.
    """
    batch, length = ids.shape
    position = np.arange(length)[None, :]
    eligible = (position >= lo_offsets[:, None]) & (position < (attn_len - 1)[:, None])
    selected = eligible & (rng.random(ids.shape) < mask_rate)
    rows, cols = np.nonzero(selected)
    corrupted = ids.copy()
    roll = rng.random(rows.shape)
    is_masked = roll < 0.8
    random_swap = (roll >= 0.8) & (roll < 0.9)
    corrupted[rows[is_masked], cols[is_masked]] = MASK_ID
    n_specials = 5
    corrupted[rows[random_swap], cols[random_swap]] = rng.integers(
        n_specials, vocab_size, size=int(random_swap.sum())
    )
    return corrupted, rows, cols, is_masked


def pretrain_mlm(
    corpus: list[Example],
    vocab: Vocabulary,
    config: ModelConfig,
    mask_rate: float = 0.15,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    progress=None,
) -> ModelParams:
    """Train a fresh model with the masked-token objective on plain
    (untemplated) sequences."""
    if not corpus:
        raise ValueError("empty pretraining corpus")
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie strictly between 0 and 1")
    encoded = [encode_plain(ex, vocab, config.max_len) for ex in corpus]
    params = init_params(config, seed)
    opt = Adam(lr=lr)
    order_rng = np.random.default_rng([seed, 0x21])
    corrupt_rng = np.random.default_rng([seed, 0x22])
    drop_rng = np.random.default_rng([seed, 0x23])
    step = 0
    for epoch in range(epochs):
        perm = order_rng.permutation(len(encoded))
        for start in range(0, len(encoded), batch_size):
            batch = [encoded[i] for i in perm[start : start + batch_size]]
            ids, attn, _ = pad_batch(batch)
            lo = np.ones(len(batch), dtype=np.int64)  # plain body starts after [CLS]
            corrupted, rows, cols, _ = corrupt_for_mlm(
                ids, attn, vocab.size, corrupt_rng, mask_rate, lo
            )
            if rows.size == 0:
                continue
            hidden = encoder_forward(params, corrupted, attn, train_mode=True, rng=drop_rng)
            logits = mlm_logits_at(params, hidden, rows, cols)
            logp = ad.log_softmax(logits, axis=-1)
            loss = -logp[(np.arange(rows.size), ids[rows, cols])].mean()
            if not np.isfinite(loss.data):
                raise TrainingDivergence("pretraining loss diverged", step)
            grads = compute_gradients(loss, params.named())
            opt.step(params.named(), grads)
            step += 1
        if progress is not None:
            progress(epoch, float(loss.data))
    return params


def masked_recovery(
    params: ModelParams,
    corpus: list[Example],
    vocab: Vocabulary,
    seed: int = 0,
    mask_rate: float = 0.15,
    batch_size: int = 64,
) -> float:
    """Top-1 accuracy at [MASK]-replaced positions of held-out text."""
    cfg = params.config
    encoded = [encode_plain(ex, vocab, cfg.max_len) for ex in corpus]
    rng = np.random.default_rng([seed, 0x31])
    hits = 0
    total = 0
    with ad.no_grad():
        for start in range(0, len(encoded), batch_size):
            batch = encoded[start : start + batch_size]
            ids, attn, _ = pad_batch(batch)
            lo = np.ones(len(batch), dtype=np.int64)
            corrupted, rows, cols, is_masked = corrupt_for_mlm(
                ids, attn, vocab.size, rng, mask_rate, lo
            )
            rows, cols = rows[is_masked], cols[is_masked]
            if rows.size == 0:
                continue
            hidden = encoder_forward(params, corrupted, attn)
            logits = mlm_logits_at(params, hidden, rows, cols)
            preds = logits.data.argmax(axis=-1)
            hits += int((preds == ids[rows, cols]).sum())
            total += rows.size
    return hits / max(total, 1)


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_MAGIC = b"PSTBIN01"
CHECKPOINT_VERSION = 1


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]):
    """Deterministic binary container: magic, length-prefixed JSON header,
    then raw little-endian float64 payloads in sorted-name order."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    base = 16 + header_len
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        arr = np.frombuffer(blob[start : start + entry["nbytes"]], dtype="<f8")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header["meta"], arrays


def save_checkpoint(
    path,
    params: ModelParams,
    vocab_hash: str,
    step: int = 0,
    optimizer: Adam | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
):
    arrays = {f"param/{n}": p.data for n, p in params.named().items()}
    if extra_arrays:
        arrays.update({f"param/{n}": a for n, a in extra_arrays.items()})
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"t": optimizer.t, "lr": optimizer.lr}
        for n, (m, v) in optimizer.state.items():
            arrays[f"opt.m/{n}"] = m
            arrays[f"opt.v/{n}"] = v
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": params.config.to_dict(),
        "vocab_hash": vocab_hash,
        "freeze_policy": params.freeze_policy,
        "step": step,
        "optimizer": opt_meta,
        "extra": extra_meta or {},
    }
    save_arrays(path, meta, arrays)


@dataclass
class CheckpointBundle:
    params: ModelParams
    meta: dict
    extra_arrays: dict[str, np.ndarray]
    optimizer: Adam | None


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> CheckpointBundle:
    meta, arrays = load_arrays(path)
    if expected_vocab_hash is not None and meta["vocab_hash"] != expected_vocab_hash:
        raise ValueError(
            "vocabulary hash mismatch: checkpoint was built with a different vocabulary"
        )
    config = ModelConfig.from_dict(meta["model_config"])
    params = init_params(config, seed=0)
    model_names = set(param_shapes(config))
    extra = {}
    state = {}
    for key, arr in arrays.items():
        if key.startswith("param/"):
            name = key[len("param/") :]
            if name in model_names:
                state[name] = arr
            else:
                extra[name] = arr
    missing = model_names - set(state)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    params.load_state(state)
    set_freeze(params, meta.get("freeze_policy", "none"))
    optimizer = None
    if meta.get("optimizer"):
        optimizer = Adam(lr=meta["optimizer"]["lr"])
        optimizer.t = meta["optimizer"]["t"]
        for key, arr in arrays.items():
            if key.startswith("opt.m/"):
                name = key[len("opt.m/") :]
                optimizer.state.setdefault(name, [None, None])[0] = arr.copy()
            elif key.startswith("opt.v/"):
                name = key[len("opt.v/") :]
                optimizer.state.setdefault(name, [None, None])[1] = arr.copy()
    return CheckpointBundle(params=params, meta=meta, extra_arrays=extra, optimizer=optimizer)
