"""BERT-style encoder cut at the embedding/encoder boundary.

The client owns token + position embeddings and their layer norm.  The
server owns the post-norm encoder blocks and the MLM projection.  Fine-tuning
adds a two-way classifier on the [CLS] position.

Weights are stored ``(in, out)`` so a dense layer is ``x @ w + b``.
"""
from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, InputError

ATTENTION_MASK_BIAS = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 1000
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ff_size: int = 128
    max_len: int = 64
    attention_dropout: float = 0.1
    hidden_dropout: float = 0.2
    layer_norm_eps: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "num_layers", "num_heads", "ff_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        for name in ("attention_dropout", "hidden_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        try:
            base = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
        return dataclasses.replace(base, **overrides)


PRESETS = {
    "tiny": ModelConfig(hidden_size=64, num_layers=2, num_heads=2, ff_size=128),
    # Stock BERT-base depth; only vocab/hidden are pinned by the deployment we mirror.
    "paper-shape": ModelConfig(hidden_size=768, num_layers=12, num_heads=12, ff_size=3072),
}


# ------------------------------------------------------------------ shapes


def client_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = cfg.hidden_size
    return {
        "client.tok_emb": (cfg.vocab_size, h),
        "client.pos_emb": (cfg.max_len, h),
        "client.ln.g": (h,),
        "client.ln.b": (h,),
    }


def encoder_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = cfg.hidden_size, cfg.ff_size
    out: dict[str, tuple[int, ...]] = {}
    for i in range(cfg.num_layers):
        p = f"server.layer{i}"
        for proj in ("q", "k", "v", "o"):
            out[f"{p}.{proj}.w"] = (h, h)
            out[f"{p}.{proj}.b"] = (h,)
        out[f"{p}.ff1.w"] = (h, f)
        out[f"{p}.ff1.b"] = (f,)
        out[f"{p}.ff2.w"] = (f, h)
        out[f"{p}.ff2.b"] = (h,)
        for ln in ("ln1", "ln2"):
            out[f"{p}.{ln}.g"] = (h,)
            out[f"{p}.{ln}.b"] = (h,)
    return out


def server_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    out = encoder_shapes(cfg)
    out["server.mlm.w"] = (cfg.hidden_size, cfg.vocab_size)
    out["server.mlm.b"] = (cfg.vocab_size,)
    return out


def head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {"head.w": (cfg.hidden_size, 2), "head.b": (2,)}


def count(shapes: Mapping[str, tuple[int, ...]]) -> int:
    return sum(math.prod(s) for s in shapes.values())


# ------------------------------------------------------------------- parts


class Part:
    """A named, ordered parameter set belonging to one party."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params: dict[str, Tensor] = dict(params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        """Copy of the current weights."""
        return {n: p.data.copy() for n, p in self.params.items()}

    def load(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise InputError(f"state is missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
            p.grad = None

    def clone(self):
        return type(self)(self.config, {n: ag.parameter(p.data.copy(), n)
                                        for n, p in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class ClientPart(Part):
    pass


class ServerPart(Part):
    def encoder_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if not n.startswith("server.mlm.")}


class ClassifierHead(Part):
    pass


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def _init(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = _truncated_normal(rng, shape)
        params[name] = ag.parameter(arr, name)
    return params


def init_model(config: ModelConfig) -> tuple[ClientPart, ServerPart, ClassifierHead]:
    """Fresh parameters: N(0, 0.02) truncated at 2 sigma, zero biases, unit gains."""
    rng = np.random.default_rng(config.seed)
    client = ClientPart(config, _init(client_shapes(config), rng))
    server = ServerPart(config, _init(server_shapes(config), rng))
    head = ClassifierHead(config, _init(head_shapes(config), rng))
    return client, server, head


# ----------------------------------------------------------------- forward


def client_forward(part: ClientPart, ids: np.ndarray, attention_mask: np.ndarray | None = None,
                   train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Embed token ids; returns activations of shape (batch, seq, hidden).

    ``attention_mask`` is accepted for symmetry with the server call; padding
    is handled on the server side.
    """
    cfg = part.config
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"ids must be (batch, seq), got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
    seq = ids.shape[1]
    if seq > cfg.max_len:
        raise InputError(f"sequence length {seq} exceeds max_len {cfg.max_len}")
    p = part.params
    x = ag.embedding(p["client.tok_emb"], ids) + ag.embedding(p["client.pos_emb"], np.arange(seq))
    x = ag.layer_norm(x, p["client.ln.g"], p["client.ln.b"], cfg.layer_norm_eps)
    return ag.dropout(x, cfg.hidden_dropout, rng, train)


def _split_heads(x: Tensor, b: int, l: int, heads: int, d: int) -> Tensor:
    return x.reshape(b, l, heads, d).transpose(0, 2, 1, 3)


def encoder_forward(params: Mapping[str, Tensor], cfg: ModelConfig, z: Tensor,
                    attention_mask: np.ndarray, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    b, l, h = z.shape
    heads, d = cfg.num_heads, cfg.head_dim
    bias = Tensor(((1 - np.asarray(attention_mask)) * ATTENTION_MASK_BIAS)
                  .reshape(b, 1, 1, l).astype(z.data.dtype))
    scale = 1.0 / math.sqrt(d)
    x = z
    for i in range(cfg.num_layers):
        p = f"server.layer{i}"
        q = _split_heads(ag.linear(x, params[f"{p}.q.w"], params[f"{p}.q.b"]), b, l, heads, d)
        k = _split_heads(ag.linear(x, params[f"{p}.k.w"], params[f"{p}.k.b"]), b, l, heads, d)
        v = _split_heads(ag.linear(x, params[f"{p}.v.w"], params[f"{p}.v.b"]), b, l, heads, d)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
        probs = ag.dropout(ag.softmax(scores, -1), cfg.attention_dropout, rng, train)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, l, h)
        attn = ag.dropout(ag.linear(ctx, params[f"{p}.o.w"], params[f"{p}.o.b"]),
                          cfg.hidden_dropout, rng, train)
        x = ag.layer_norm(x + attn, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], cfg.layer_norm_eps)
        ff = ag.gelu(ag.linear(x, params[f"{p}.ff1.w"], params[f"{p}.ff1.b"]))
        ff = ag.dropout(ag.linear(ff, params[f"{p}.ff2.w"], params[f"{p}.ff2.b"]),
                        cfg.hidden_dropout, rng, train)
        x = ag.layer_norm(x + ff, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.layer_norm_eps)
    return x


def server_forward(part: ServerPart, z: Tensor, attention_mask: np.ndarray, train: bool = False,
                   rng: np.random.Generator | None = None,
                   with_mlm: bool = True) -> tuple[Tensor, Tensor | None]:
    """Run the encoder stack; returns (hidden states, MLM logits or None)."""
    cfg = part.config
    attention_mask = np.asarray(attention_mask)
    if z.ndim != 3 or z.shape[2] != cfg.hidden_size:
        raise DimensionError(f"activations must be (batch, seq, {cfg.hidden_size}), got {z.shape}")
    if attention_mask.shape != z.shape[:2]:
        raise DimensionError(
            f"attention mask {attention_mask.shape} does not match activations {z.shape[:2]}")
    hidden = encoder_forward(part.params, cfg, z, attention_mask, train, rng)
    if not with_mlm:
        return hidden, None
    logits = ag.linear(hidden, part["server.mlm.w"], part["server.mlm.b"])
    return hidden, logits


def mlm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    b, l, v = logits.shape
    return ag.cross_entropy(logits.reshape(b * l, v), np.asarray(labels).reshape(-1))


def classifier_forward(head: ClassifierHead, hidden: Tensor) -> Tensor:
    """Two-way logits from the position-0 ([CLS]) hidden vector."""
    cls = hidden[:, 0, :]
    return ag.linear(cls, head["head.w"], head["head.b"])


# ---------------------------------------------------- fine-tuning model view


def finetune_params(client: ClientPart, server: ServerPart,
                    head: ClassifierHead) -> dict[str, Tensor]:
    """Everything trained during fine-tuning: embeddings, encoder, head (not the MLM head)."""
    return {**client.params, **server.encoder_params(), **head.params}


def classify(params: Mapping[str, Tensor], cfg: ModelConfig, ids: np.ndarray,
             attention_mask: np.ndarray, train: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Full-model forward over a flat parameter mapping, returning (batch, 2) logits."""
    client = ClientPart(cfg, {n: params[n] for n in client_shapes(cfg)})
    z = client_forward(client, ids, attention_mask, train, rng)
    hidden = encoder_forward(params, cfg, z, attention_mask, train, rng)
    return ag.linear(hidden[:, 0, :], params["head.w"], params["head.b"])


# ---------------------------------------------------------------- freezing

_RANGE = re.compile(r"^(\d+)(?:-(\d+))?$")


@dataclass(frozen=True)
class FreezeMask:
    frozen: frozenset[str] = frozenset()

    @classmethod
    def none(cls) -> FreezeMask:
        return cls()

    @classmethod
    def layers(cls, config: ModelConfig, layers: Iterable[int]) -> FreezeMask:
        layers = list(layers)
        bad = [i for i in layers if not 0 <= i < config.num_layers]
        if bad:
            raise ConfigError(f"encoder layers {bad} out of range for {config.num_layers} layers")
        prefixes = tuple(f"server.layer{i}." for i in layers)
        return cls(frozenset(n for n in encoder_shapes(config) if n.startswith(prefixes)))

    @classmethod
    def parse(cls, spec: str, config: ModelConfig) -> FreezeMask:
        """``none``, ``all`` (every encoder layer), or ranges like ``0-2,4``."""
        spec = spec.strip().lower()
        if spec in ("", "none"):
            return cls()
        if spec in ("all", "all-encoder"):
            return cls.layers(config, range(config.num_layers))
        layers: list[int] = []
        for chunk in spec.split(","):
            m = _RANGE.match(chunk.strip())
            if not m:
                raise ConfigError(f"cannot parse freeze layer spec {chunk!r}")
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) else lo
            layers.extend(range(lo, hi + 1))
        return cls.layers(config, layers)


def apply_freeze(mask: FreezeMask, optimizer: ag.Adam) -> ag.Adam:
    unknown = mask.frozen - set(optimizer.params)
    if unknown:
        raise ConfigError(f"cannot freeze unknown parameters: {sorted(unknown)}")
    optimizer.frozen = set(mask.frozen)
    return optimizer
