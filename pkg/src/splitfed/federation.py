"""Split pre-training and FedAvg fine-tuning rounds.

Pre-training: each selected client embeds a masked batch and ships the
activations (with MLM labels) to its own copy of the server model at the
compute centre; the server returns the activation gradient and both sides
step.  At the round barrier the federation server averages the client parts
and the compute centre averages its per-client server copies.

Fine-tuning: classic FedAvg over the whole model, optionally preceded on each
client by adaptive local aggregation (ALA) of global and local weights.

Every random stream is derived from ``(seed, round, client, purpose)`` so a
round can be replayed exactly, whatever the transport or worker count.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import ClientShard, UrlRecord
from .errors import AggregationError, ConfigError, SessionError
from .metrics import evaluate_scores
from .model import (ClassifierHead, ClientPart, FreezeMask, ModelConfig, ServerPart, apply_freeze,
                    classify, client_forward, client_shapes, encoder_shapes, head_shapes,
                    mlm_loss, server_forward, server_shapes)
from .tokenizer import Vocab, apply_mlm_mask, encode_batch
from .wire import (ActivationBatch, ActivationGrad, Channel, Control, ControlKind, WeightsDown,
                   WeightsUp, channel_pair)

log = logging.getLogger(__name__)

# purposes for derived random streams
SAMPLING, SHUFFLE, MASKING, CLIENT_DROPOUT, SERVER_DROPOUT, ALA_SUBSET = range(6)

Weights = dict[str, np.ndarray]


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One shuffled pass over ``range(n)`` in chunks of ``batch_size``."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def trim(ids: np.ndarray, mask: np.ndarray, *rest: np.ndarray):
    """Drop trailing columns that are padding in every row."""
    width = max(int(mask.sum(axis=1).max()), 1) if mask.size else 1
    return (ids[:, :width], mask[:, :width], *(r[:, :width] for r in rest))


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class RoundPlan:
    round: int
    clients: tuple[int, ...]
    local_epochs: int = 1
    batch_size: int = 32


def sample_size(total: int, fraction: float) -> int:
    return max(1, int(np.floor(fraction * total + 0.5)))


def sample_clients(total: int, fraction: float, rng: np.random.Generator, round_index: int = 0,
                   local_epochs: int = 1, batch_size: int = 32) -> RoundPlan:
    """Uniform sample without replacement of ``round(fraction * total)`` clients (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"client fraction must lie in (0, 1], got {fraction}")
    if total <= 0:
        raise ConfigError(f"need at least one client, got {total}")
    chosen = rng.choice(total, size=sample_size(total, fraction), replace=False)
    return RoundPlan(round_index, tuple(sorted(int(c) for c in chosen)), local_epochs, batch_size)


# ------------------------------------------------------------------ FedAvg


def fedavg(weight_sets: Mapping[int, Mapping[str, np.ndarray]],
           sample_counts: Mapping[int, int]) -> Weights:
    """Sample-count weighted mean, accumulated in float64 in ascending client order."""
    if not weight_sets:
        raise AggregationError("no client weights to aggregate")
    ids = sorted(weight_sets)
    if set(ids) != set(sample_counts):
        raise AggregationError("weight sets and sample counts cover different clients")
    counts = {k: int(sample_counts[k]) for k in ids}
    if any(n <= 0 for n in counts.values()):
        raise AggregationError(f"sample counts must be positive, got {counts}")
    ref = weight_sets[ids[0]]
    names = list(ref)
    for k in ids[1:]:
        w = weight_sets[k]
        if list(w) != names:
            raise AggregationError(f"client {k} parameter names differ from client {ids[0]}")
        for n in names:
            if np.shape(w[n]) != np.shape(ref[n]):
                raise AggregationError(
                    f"client {k} {n} has shape {np.shape(w[n])}, expected {np.shape(ref[n])}")
    # n_k * w is exact in float64 for float32 w, so equal client weights come back unchanged
    total = float(sum(counts.values()))
    out: Weights = {}
    for n in names:
        acc = np.zeros(np.shape(ref[n]), dtype=np.float64)
        for k in ids:
            acc += counts[k] * np.asarray(weight_sets[k][n], dtype=np.float64)
        out[n] = (acc / total).astype(np.float32)
    return out


# --------------------------------------------------------------------- ALA


@dataclass(frozen=True)
class AlaConfig:
    lr: float = 0.1
    window: int = 5
    tau: float = 1e-4
    fraction: float = 0.2
    cap: int = 50
    refine: bool = True
    k_init: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"ALA data fraction must lie in (0, 1], got {self.fraction}")
        if self.window < 2 or self.cap < 1:
            raise ConfigError("ALA window must be >= 2 and cap >= 1")
        if not 0.0 <= self.k_init <= 1.0:
            raise ConfigError("ALA initial weight must lie in [0, 1]")


@dataclass
class AlaState:
    config: AlaConfig
    k: dict[str, np.ndarray] = field(default_factory=dict)
    initialized: bool = False
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    converged: bool = False
    cap_hit: bool = False

    def ensure(self, shapes: Mapping[str, tuple[int, ...]]) -> None:
        if not self.initialized:
            self.k = {n: np.full(s, self.config.k_init, dtype=np.float32) for n, s in shapes.items()}
            self.initialized = True


def ala_merge(local: Mapping[str, np.ndarray], global_: Mapping[str, np.ndarray],
              k: Mapping[str, np.ndarray]) -> Weights:
    """``local + (global - local) * k`` elementwise, in float64, rounded once to float32.

    Entries with k == 1 (or 0) copy the global (or local) value exactly.
    Names without an entry in ``k`` take the global value.
    """
    out: Weights = {}
    for n, g in global_.items():
        if n not in k:
            out[n] = np.array(g, dtype=np.float32)
            continue
        lo = np.asarray(local[n], dtype=np.float64)
        g64 = np.asarray(g, dtype=np.float64)
        kk = np.asarray(k[n])
        mixed = np.where(kk == 1, g64, np.where(kk == 0, lo, lo + (g64 - lo) * kk))
        out[n] = mixed.astype(np.float32)
    return out


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def ala_initialize(local: Mapping[str, np.ndarray], global_: Mapping[str, np.ndarray],
                   state: AlaState, loss_fn: LossFn,
                   trainable: Sequence[str] | None = None) -> tuple[Weights, AlaState]:
    """Blend global into local weights, learning the blend on local data.

    ``loss_fn`` evaluates a parameter mapping on the client's initialisation
    subset.  The blend weights move by plain gradient descent (the gradient
    is ``dLoss/dMerged * (global - local)``), are clipped to [0, 1], and stop
    once the variance of the last ``window`` losses drops below ``tau`` or
    ``cap`` steps have run.
    """
    cfg = state.config
    names = list(trainable) if trainable is not None else list(global_)
    state.ensure({n: np.shape(global_[n]) for n in names})
    state.losses, state.steps, state.converged, state.cap_hit = [], 0, False, False
    if not cfg.refine:
        return ala_merge(local, global_, state.k), state

    delta = {n: np.asarray(global_[n], dtype=np.float32) - np.asarray(local[n], dtype=np.float32)
             for n in state.k}
    for _ in range(cfg.cap):
        merged = ala_merge(local, global_, state.k)
        params = {n: ag.parameter(w, n) for n, w in merged.items()}
        loss = loss_fn(params)
        loss.backward()
        state.losses.append(loss.item())
        state.steps += 1
        for n, kk in state.k.items():
            g = params[n].grad
            if g is not None:
                kk -= np.float32(cfg.lr) * g * delta[n]
                np.clip(kk, 0.0, 1.0, out=kk)
        recent = state.losses[-cfg.window:]
        if len(recent) == cfg.window and float(np.var(recent)) < cfg.tau:
            state.converged = True
            break
    else:
        state.cap_hit = True
    return ala_merge(local, global_, state.k), state


# ---------------------------------------------------------------- state


@dataclass
class GlobalState:
    client: Weights
    server: Weights
    head: Weights
    round: int = 0

    @classmethod
    def from_parts(cls, client: ClientPart, server: ServerPart, head: ClassifierHead) -> GlobalState:
        return cls(client.state(), server.state(), head.state())

    def finetune_weights(self) -> Weights:
        """Embeddings, encoder blocks and classifier head, in canonical order."""
        enc = {n: w for n, w in self.server.items() if not n.startswith("server.mlm.")}
        return {**self.client, **enc, **self.head}

    def with_finetune_weights(self, w: Mapping[str, np.ndarray], round: int) -> GlobalState:
        client = {n: w[n] for n in self.client}
        server = {n: (w[n] if n in w else v) for n, v in self.server.items()}
        head = {n: w[n] for n in self.head}
        return GlobalState(client, server, head, round)

    def all_weights(self) -> Weights:
        return {**self.client, **self.server, **self.head}

    @classmethod
    def from_flat(cls, cfg: ModelConfig, flat: Mapping[str, np.ndarray], round: int = 0) -> GlobalState:
        try:
            return cls({n: flat[n] for n in client_shapes(cfg)},
                       {n: flat[n] for n in server_shapes(cfg)},
                       {n: flat[n] for n in head_shapes(cfg)}, round)
        except KeyError as exc:
            raise ConfigError(f"checkpoint lacks parameter {exc.args[0]}") from None


def _tensors(weights: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {n: ag.parameter(np.array(w, dtype=np.float32), n) for n, w in weights.items()}


# ------------------------------------------------------------ pre-training


@dataclass(frozen=True)
class PretrainSettings:
    lr: float = 5e-5
    batch_size: int = 64
    local_epochs: int = 1
    fraction: float = 1.0
    max_steps: int | None = None
    select_p: float = 0.15
    timeout: float = 300.0
    workers: int = 1


class PretrainClient:
    """Data owner holding the embedding part during split pre-training."""

    def __init__(self, client_id: int, records: Sequence[UrlRecord], vocab: Vocab,
                 config: ModelConfig, seed: int):
        self.client_id = client_id
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.ids, self.mask = encode_batch([r.url for r in records], vocab, config.max_len)
        self.n_k = len(records)
        self.part: ClientPart | None = None

    def load(self, weights: Mapping[str, np.ndarray]) -> None:
        self.part = ClientPart(self.config, _tensors(weights))

    def batches(self, round_index: int, settings: PretrainSettings) -> Iterator[tuple[np.ndarray, ...]]:
        """Masked, trimmed batches for one round, in training order."""
        shuffle = derive_rng(self.seed, round_index, self.client_id, SHUFFLE)
        masking = derive_rng(self.seed, round_index, self.client_id, MASKING)
        steps = 0
        for _ in range(settings.local_epochs):
            for idx in iter_batches(self.n_k, settings.batch_size, shuffle):
                if settings.max_steps is not None and steps >= settings.max_steps:
                    return
                ids, mask = trim(self.ids[idx], self.mask[idx])
                mb = apply_mlm_mask(ids, mask, masking, len(self.vocab), settings.select_p)
                steps += 1
                yield mb.ids, mb.attention_mask, mb.labels

    def run_round(self, round_index: int, channel: Channel, settings: PretrainSettings) -> int:
        """Train the client part against the compute server; returns the step count."""
        assert self.part is not None, "client weights not loaded"
        dropout = derive_rng(self.seed, round_index, self.client_id, CLIENT_DROPOUT)
        opt = ag.Adam(self.part.params, settings.lr)
        channel.send(Control(ControlKind.ROUND_START, round_index))
        steps = 0
        for ids, mask, labels in self.batches(round_index, settings):
            opt.zero_grad()
            z = client_forward(self.part, ids, mask, train=True, rng=dropout)
            channel.send(ActivationBatch(round_index, self.client_id, z.data, mask, labels))
            reply = channel.recv(settings.timeout)
            if not isinstance(reply, ActivationGrad) or reply.dz.shape != z.shape:
                raise SessionError(f"client {self.client_id}: expected activation gradient, got {reply!r:.80}")
            z.backward(reply.dz)
            opt.step()
            steps += 1
        channel.send(Control(ControlKind.ROUND_END, round_index))
        return steps


@dataclass
class ServerSession:
    client_id: int
    weights: Weights
    losses: list[float]


class ComputeServer:
    """Holds the global server part and one working copy per client session."""

    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray], seed: int):
        self.config = config
        self.weights: Weights = dict(weights)
        self.seed = seed

    def serve(self, client_id: int, round_index: int, channel: Channel,
              settings: PretrainSettings) -> ServerSession:
        part = ServerPart(self.config, _tensors(self.weights))
        opt = ag.Adam(part.params, settings.lr)
        dropout = derive_rng(self.seed, round_index, client_id, SERVER_DROPOUT)
        losses: list[float] = []
        first = channel.recv(settings.timeout)
        if not (isinstance(first, Control) and first.kind is ControlKind.ROUND_START):
            raise SessionError(f"session for client {client_id} did not open with ROUND_START")
        while True:
            msg = channel.recv(settings.timeout)
            if isinstance(msg, Control) and msg.kind is ControlKind.ROUND_END:
                break
            if not isinstance(msg, ActivationBatch) or msg.client_id != client_id:
                raise SessionError(f"unexpected message in session for client {client_id}: {msg!r:.80}")
            opt.zero_grad()
            z = ag.parameter(msg.z)
            _, logits = server_forward(part, z, msg.attention_mask, train=True, rng=dropout)
            loss = mlm_loss(logits, msg.labels)
            loss.backward()
            channel.send(ActivationGrad(round_index, client_id, z.grad))
            opt.step()
            losses.append(loss.item())
        return ServerSession(client_id, part.state(), losses)


class FedServer:
    """Keeps the global client part and aggregates client uploads."""

    def __init__(self, weights: Mapping[str, np.ndarray]):
        self.weights: Weights = dict(weights)
        self.last_uploads: dict[int, WeightsUp] = {}


@dataclass
class PretrainRoundResult:
    round: int
    clients: tuple[int, ...]
    losses: dict[int, list[float]]

    def log_lines(self) -> list[str]:
        out = []
        for cid in self.clients:
            ls = self.losses[cid]
            out.append(json.dumps({"round": self.round, "client_id": cid, "steps": len(ls),
                                   "mlm_loss": float(np.mean(ls)) if ls else None}, sort_keys=True))
        return out

    @property
    def mean_loss(self) -> float:
        vals = [np.mean(v) for v in self.losses.values() if v]
        return float(np.mean(vals)) if vals else float("nan")


def _close(*channels: Channel) -> None:
    for c in channels:
        try:
            c.close()
        except Exception:  # already torn down
            pass


def run_pretrain_round(plan: RoundPlan, clients: Mapping[int, PretrainClient],
                       compute: ComputeServer, fed: FedServer, settings: PretrainSettings,
                       transport: str = "inproc", listen: str = "127.0.0.1:0") -> PretrainRoundResult:
    """One split-learning round; global weights change only if every session succeeds."""
    t = plan.round

    def one_client(cid: int) -> tuple[WeightsUp, ServerSession]:
        client = clients[cid]
        fed_end, client_fed_end = channel_pair(transport, listen)
        client_end, server_end = channel_pair(transport, listen)
        try:
            fed_end.send(WeightsDown(t, fed.weights))
            down = client_fed_end.recv(settings.timeout)
            if not isinstance(down, WeightsDown):
                raise SessionError(f"client {cid} expected global weights, got {down!r:.80}")
            client.load(down.weights)
            with ThreadPoolExecutor(max_workers=1) as pool:
                session = pool.submit(compute.serve, cid, t, server_end, settings)
                try:
                    client.run_round(t, client_end, settings)
                except BaseException:
                    _close(client_end)
                    raise
                result = session.result()
            client_fed_end.send(WeightsUp(t, cid, client.part.state(), client.n_k))
            up = fed_end.recv(settings.timeout)
            if not isinstance(up, WeightsUp) or up.client_id != cid:
                raise SessionError(f"expected weights from client {cid}, got {up!r:.80}")
            return up, result
        finally:
            _close(fed_end, client_fed_end, client_end, server_end)

    if settings.workers > 1 and len(plan.clients) > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            outcomes = dict(zip(plan.clients, pool.map(one_client, plan.clients)))
    else:
        outcomes = {cid: one_client(cid) for cid in plan.clients}

    ups = {cid: outcomes[cid][0] for cid in plan.clients}
    counts = {cid: up.sample_count for cid, up in ups.items()}
    new_client = fedavg({cid: up.weights for cid, up in ups.items()}, counts)
    new_server = fedavg({cid: outcomes[cid][1].weights for cid in plan.clients}, counts)
    fed.weights = new_client
    fed.last_uploads = ups
    compute.weights = new_server
    return PretrainRoundResult(t, plan.clients, {cid: outcomes[cid][1].losses for cid in plan.clients})


# ------------------------------------------------------------- fine-tuning


@dataclass(frozen=True)
class FinetuneSettings:
    lr: float = 2e-6
    batch_size: int = 32
    local_epochs: int = 5
    fraction: float = 0.5
    ala: AlaConfig | None = None
    freeze: FreezeMask = FreezeMask()
    eval_batch: int = 256
    timeout: float = 300.0
    workers: int = 1


@dataclass(frozen=True)
class RoundReport:
    round: int
    client_id: int
    split: str
    acc: float
    tpr: float
    fpr: float
    f1: float
    auc: float
    loss: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class FinetuneClient:
    """Client holding a full local model during fine-tuning."""

    def __init__(self, shard: ClientShard, vocab: Vocab, config: ModelConfig, seed: int):
        self.client_id = shard.client_id
        self.config = config
        self.seed = seed
        self.n_k = shard.n_k
        self.train_ids, self.train_mask = encode_batch([r.url for r in shard.train], vocab, config.max_len)
        self.train_y = np.array([r.label for r in shard.train], dtype=np.int64)
        self.test_ids, self.test_mask = encode_batch([r.url for r in shard.test], vocab, config.max_len)
        self.test_y = np.array([r.label for r in shard.test], dtype=np.int64)
        self.local_weights: Weights | None = None
        self.ala_state: AlaState | None = None

    def loss_on(self, params: Mapping[str, Tensor], idx: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        ids, mask = trim(self.train_ids[idx], self.train_mask[idx])
        logits = classify(params, self.config, ids, mask, train=train, rng=rng)
        return ag.cross_entropy(logits, self.train_y[idx])

    def ala_subset(self, round_index: int, fraction: float) -> np.ndarray:
        rng = derive_rng(self.seed, round_index, self.client_id, ALA_SUBSET)
        size = max(1, int(np.floor(fraction * self.n_k + 0.5)))
        return np.sort(rng.permutation(self.n_k)[:size])

    def initialize(self, global_w: Weights, round_index: int, ala: AlaConfig | None,
                   freeze: FreezeMask) -> Weights:
        """Starting weights for local training: global, or ALA-merged with the last local model."""
        if ala is None:
            return {n: w.copy() for n, w in global_w.items()}
        if self.ala_state is None:
            self.ala_state = AlaState(ala)
        trainable = [n for n in global_w if n not in freeze.frozen]
        if self.local_weights is None:
            self.ala_state.ensure({n: global_w[n].shape for n in trainable})
            return {n: w.copy() for n, w in global_w.items()}
        subset = self.ala_subset(round_index, ala.fraction)
        if subset.size == 0:
            raise ConfigError(f"client {self.client_id}: empty ALA initialisation subset")
        merged, _ = ala_initialize(self.local_weights, global_w, self.ala_state,
                                   lambda p: self.loss_on(p, subset), trainable)
        return merged

    def local_train(self, start: Weights, round_index: int,
                    settings: FinetuneSettings) -> tuple[Weights, float]:
        params = _tensors(start)
        opt = apply_freeze(settings.freeze, ag.Adam(params, settings.lr))
        shuffle = derive_rng(self.seed, round_index, self.client_id, SHUFFLE)
        dropout = derive_rng(self.seed, round_index, self.client_id, CLIENT_DROPOUT)
        losses = []
        for _ in range(settings.local_epochs):
            for idx in iter_batches(self.n_k, settings.batch_size, shuffle):
                opt.zero_grad()
                loss = self.loss_on(params, idx, train=True, rng=dropout)
                loss.backward()
                opt.step()
                losses.append(loss.item())
        return {n: p.data.copy() for n, p in params.items()}, float(np.mean(losses)) if losses else 0.0

    def evaluate(self, weights: Mapping[str, np.ndarray], round_index: int,
                 batch: int = 256) -> RoundReport:
        params = {n: Tensor(w) for n, w in weights.items()}
        n = len(self.test_y)
        probs = np.zeros(n, dtype=np.float64)
        loss_sum = 0.0
        with ag.no_grad():
            for start in range(0, n, batch):
                sl = slice(start, start + batch)
                ids, mask = trim(self.test_ids[sl], self.test_mask[sl])
                logits = classify(params, self.config, ids, mask).data.astype(np.float64)
                shifted = logits - logits.max(axis=1, keepdims=True)
                logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
                probs[sl] = np.exp(logp[:, 1])
                loss_sum -= logp[np.arange(len(logits)), self.test_y[sl]].sum()
        if n == 0:
            nan = float("nan")
            return RoundReport(round_index, self.client_id, "test", nan, nan, nan, nan, nan, nan)
        m = evaluate_scores(probs, self.test_y)
        return RoundReport(round_index, self.client_id, "test", m["acc"], m["tpr"], m["fpr"],
                           m["f1"], m["auc"], loss_sum / n)


@dataclass
class FinetuneRoundResult:
    round: int
    clients: tuple[int, ...]
    train_loss: dict[int, float]
    reports: list[RoundReport]


def run_finetune_round(plan: RoundPlan, clients: Mapping[int, FinetuneClient], state: GlobalState,
                       settings: FinetuneSettings, transport: str = "inproc",
                       listen: str = "127.0.0.1:0",
                       evaluate: bool = True) -> tuple[GlobalState, FinetuneRoundResult]:
    """One FedAvg round; every client is then scored with the new global model."""
    t = plan.round
    global_w = state.finetune_weights()

    def one_client(cid: int) -> tuple[WeightsUp, float]:
        client = clients[cid]
        fed_end, client_end = channel_pair(transport, listen)
        try:
            fed_end.send(WeightsDown(t, global_w))
            down = client_end.recv(settings.timeout)
            if not isinstance(down, WeightsDown):
                raise SessionError(f"client {cid} expected global weights, got {down!r:.80}")
            start = client.initialize(down.weights, t, settings.ala, settings.freeze)
            trained, loss = client.local_train(start, t, settings)
            client.local_weights = trained
            client_end.send(WeightsUp(t, cid, trained, client.n_k))
            up = fed_end.recv(settings.timeout)
            if not isinstance(up, WeightsUp) or up.client_id != cid:
                raise SessionError(f"expected weights from client {cid}, got {up!r:.80}")
            return up, loss
        finally:
            _close(fed_end, client_end)

    if settings.workers > 1 and len(plan.clients) > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            outcomes = dict(zip(plan.clients, pool.map(one_client, plan.clients)))
    else:
        outcomes = {cid: one_client(cid) for cid in plan.clients}

    ups = {cid: outcomes[cid][0] for cid in plan.clients}
    new_w = fedavg({cid: up.weights for cid, up in ups.items()},
                   {cid: up.sample_count for cid, up in ups.items()})
    new_state = state.with_finetune_weights(new_w, t + 1)
    reports = []
    if evaluate:
        reports = [clients[cid].evaluate(new_w, t, settings.eval_batch) for cid in sorted(clients)]
    return new_state, FinetuneRoundResult(t, plan.clients,
                                          {cid: outcomes[cid][1] for cid in plan.clients}, reports)


# ------------------------------------------------------------ multi-round


def pretrain(state: GlobalState, clients: Mapping[int, PretrainClient], rounds: int,
             settings: PretrainSettings, seed: int, transport: str = "inproc",
             listen: str = "127.0.0.1:0",
             on_round: Callable[[PretrainRoundResult], None] | None = None) -> GlobalState:
    """Run ``rounds`` split pre-training rounds starting from ``state``."""
    cfg = next(iter(clients.values())).config
    compute = ComputeServer(cfg, state.server, seed)
    fed = FedServer(state.client)
    sampler = derive_rng(seed, SAMPLING, 0)
    ids = sorted(clients)
    for r in range(rounds):
        plan = sample_clients(len(ids), settings.fraction, sampler, r, settings.local_epochs,
                              settings.batch_size)
        plan = RoundPlan(r, tuple(ids[i] for i in plan.clients), plan.local_epochs, plan.batch_size)
        result = run_pretrain_round(plan, clients, compute, fed, settings, transport, listen)
        log.info("pretrain round %d: mean MLM loss %.4f", r, result.mean_loss)
        if on_round:
            on_round(result)
    return GlobalState(fed.weights, compute.weights, state.head, state.round + rounds)


def finetune(state: GlobalState, clients: Mapping[int, FinetuneClient], rounds: int,
             settings: FinetuneSettings, seed: int, transport: str = "inproc",
             listen: str = "127.0.0.1:0",
             on_round: Callable[[FinetuneRoundResult], None] | None = None) -> GlobalState:
    sampler = derive_rng(seed, SAMPLING, 1)
    ids = sorted(clients)
    for r in range(rounds):
        plan = sample_clients(len(ids), settings.fraction, sampler, r, settings.local_epochs,
                              settings.batch_size)
        plan = RoundPlan(r, tuple(ids[i] for i in plan.clients), plan.local_epochs, plan.batch_size)
        state, result = run_finetune_round(plan, clients, state, settings, transport, listen)
        if result.reports:
            acc = np.mean([rep.acc for rep in result.reports])
            log.info("finetune round %d: mean client accuracy %.4f", r, acc)
        if on_round:
            on_round(result)
    return state
