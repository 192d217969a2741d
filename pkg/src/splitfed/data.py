"""URL records, a synthetic corpus, and IID / Dirichlet client partitioners."""
from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError

BENIGN, MALICIOUS = 0, 1


@dataclass(frozen=True)
class UrlRecord:
    url: str
    label: int


def load_csv(path: str | os.PathLike) -> list[UrlRecord]:
    """Read a ``url,label`` CSV.  Rows with an empty url are dropped."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"dataset not found: {path}") from None
    records = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["url", "label"]:
            raise InputError(f"{path}: expected header 'url,label', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise InputError(f"{path}: row {lineno}: expected 2 fields, got {len(row)}")
            url, label = row
            if label not in ("0", "1"):
                raise InputError(f"{path}: row {lineno}: label must be 0 or 1, got {label!r}")
            if url:
                records.append(UrlRecord(url, int(label)))
    return records


def write_csv(path: str | os.PathLike, records: Sequence[UrlRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["url", "label"])
        for r in records:
            w.writerow([r.url, r.label])


def label_histogram(records: Sequence[UrlRecord]) -> list[int]:
    counts = [0, 0]
    for r in records:
        counts[r.label] += 1
    return counts


# --------------------------------------------------------- synthetic corpus

SCHEMES = ("http://", "https://")
SUBDOMAINS = ("", "www.", "m.", "mail.", "app.", "shop.", "blog.", "cdn.")
WORDS = (
    "google", "amazon", "news", "cloud", "photo", "travel", "market", "music", "video",
    "sport", "health", "school", "garden", "river", "mountain", "city", "design", "studio",
    "data", "bank", "paypal", "apple", "micro", "soft", "net", "web", "store", "media",
    "green", "blue", "red", "star", "sun", "moon", "fast", "smart", "home", "food", "cook",
    "book", "game", "play", "tech", "info", "world", "global", "local", "daily", "best",
)
TLDS = ("com", "com", "com", "net", "org", "io", "co.uk", "de", "ru", "info", "cn", "br", "xyz")
PATH_SEGMENTS = (
    "index.html", "login", "home", "products", "about", "contact", "images", "search",
    "account", "docs", "api", "v2", "cart", "news", "2021", "en", "static", "page.php",
)
QUERY_KEYS = ("id", "q", "ref", "page", "lang", "session")
# Every member is hyphenated; nothing else in the generator emits a hyphen.
PLANTED = (
    "-secure-verify", "-account-update", "-signin-alert", "-billing-confirm",
    "-webscr-auth", "-wallet-unlock", "-support-recover",
)


def has_planted(url: str) -> bool:
    return any(tok in url for tok in PLANTED)


def _random_url(rng: np.random.Generator, planted: bool) -> str:
    host = SUBDOMAINS[rng.integers(len(SUBDOMAINS))]
    host += "".join(WORDS[i] for i in rng.integers(len(WORDS), size=int(rng.integers(1, 3))))
    if planted:
        host += PLANTED[rng.integers(len(PLANTED))]
    host += "." + TLDS[rng.integers(len(TLDS))]
    path = "".join("/" + PATH_SEGMENTS[i]
                   for i in rng.integers(len(PATH_SEGMENTS), size=int(rng.integers(0, 4))))
    if rng.random() < 0.3:
        key = QUERY_KEYS[rng.integers(len(QUERY_KEYS))]
        path += f"?{key}={int(rng.integers(0, 10000))}"
    return SCHEMES[rng.integers(len(SCHEMES))] + host + path


def synthesize_corpus(n: int, signal_strength: float, seed: int) -> list[UrlRecord]:
    """Balanced synthetic URLs whose only label signal is a planted token family.

    Malicious URLs carry a planted token with probability ``signal_strength``,
    benign ones with ``1 - signal_strength``, so the Bayes accuracy is about
    ``signal_strength``.
    """
    if n <= 0 or n % 2:
        raise ConfigError(f"corpus size must be a positive even number, got {n}")
    if not 0.5 < signal_strength <= 1.0:
        raise ConfigError(f"signal strength must lie in (0.5, 1], got {signal_strength}")
    rng = np.random.default_rng(seed)
    labels = np.array([BENIGN] * (n // 2) + [MALICIOUS] * (n // 2))
    rng.shuffle(labels)
    out = []
    for label in labels:
        p_plant = signal_strength if label == MALICIOUS else 1.0 - signal_strength
        out.append(UrlRecord(_random_url(rng, bool(rng.random() < p_plant)), int(label)))
    return out


# ------------------------------------------------------------- partitioners


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train: tuple[UrlRecord, ...]
    test: tuple[UrlRecord, ...] = ()

    @property
    def n_k(self) -> int:
        return len(self.train)


def stratified_split(records: Sequence[UrlRecord], fraction: float,
                     rng: np.random.Generator) -> tuple[list[UrlRecord], list[UrlRecord]]:
    """Per label, send ``round(fraction * n_label)`` shuffled records to the first list."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"split fraction must lie in [0, 1], got {fraction}")
    first: list[int] = []
    second: list[int] = []
    labels = np.array([r.label for r in records])
    for c in sorted(set(labels.tolist())):
        idx = rng.permutation(np.nonzero(labels == c)[0])
        cut = int(np.floor(fraction * len(idx) + 0.5))
        first.extend(idx[:cut].tolist())
        second.extend(idx[cut:].tolist())
    first.sort()
    second.sort()
    return [records[i] for i in first], [records[i] for i in second]


def partition_iid(records: Sequence[UrlRecord], num_clients: int,
                  rng: np.random.Generator) -> list[list[UrlRecord]]:
    """Global shuffle, then deal round-robin; shard sizes differ by at most one."""
    if num_clients <= 0:
        raise ConfigError(f"number of clients must be positive, got {num_clients}")
    if len(records) < num_clients:
        raise ConfigError(f"{len(records)} records cannot fill {num_clients} client shards")
    perm = rng.permutation(len(records))
    return [[records[i] for i in perm[k::num_clients]] for k in range(num_clients)]


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, as close as possible to ``proportions * total``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_proportions(num_labels: int, num_clients: int, alpha: float,
                          rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet(alpha * 1_K) row per label, drawn in label order."""
    if alpha <= 0:
        raise ConfigError(f"Dirichlet alpha must be positive, got {alpha}")
    if num_clients <= 0:
        raise ConfigError(f"number of clients must be positive, got {num_clients}")
    return np.stack([rng.dirichlet(np.full(num_clients, float(alpha)))
                     for _ in range(num_labels)])


def partition_by_proportions(records: Sequence[UrlRecord], proportions: np.ndarray,
                             rng: np.random.Generator) -> list[list[UrlRecord]]:
    """Deal each label's shuffled records to clients by largest-remainder counts.

    Row ``c`` of ``proportions`` belongs to label ``c``.  A client left empty
    takes one record from the currently largest shard.
    """
    num_labels, num_clients = proportions.shape
    if len(records) < num_clients:
        raise ConfigError(f"{len(records)} records cannot fill {num_clients} client shards")
    labels = np.array([r.label for r in records])
    shards: list[list[UrlRecord]] = [[] for _ in range(num_clients)]
    for c in range(num_labels):
        idx = rng.permutation(np.nonzero(labels == c)[0])
        counts = largest_remainder(proportions[c], len(idx))
        start = 0
        for k, n in enumerate(counts):
            shards[k].extend(records[i] for i in idx[start:start + n])
            start += n
    for k in range(num_clients):
        if not shards[k]:
            donor = max(range(num_clients), key=lambda j: (len(shards[j]), -j))
            shards[k].append(shards[donor].pop())
    return shards


def partition_dirichlet(records: Sequence[UrlRecord], num_clients: int, alpha: float,
                        rng: np.random.Generator) -> list[list[UrlRecord]]:
    labels = {r.label for r in records}
    if labels - {BENIGN, MALICIOUS}:
        raise InputError(f"labels must be 0/1, found {sorted(labels)}")
    props = dirichlet_proportions(2, num_clients, alpha, rng)
    return partition_by_proportions(records, props, rng)


class ScenarioKind(str, enum.Enum):
    IID = "iid"
    NONIID2 = "noniid2"
    NONIID3 = "noniid3"


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind = ScenarioKind.IID
    alpha: float = 0.7
    clients: int = 10
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ScenarioKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown scenario {self.kind!r}; expected iid, noniid2 or noniid3") from None
        if self.alpha <= 0:
            raise ConfigError(f"Dirichlet alpha must be positive, got {self.alpha}")
        if self.clients <= 0:
            raise ConfigError(f"number of clients must be positive, got {self.clients}")


@dataclass
class Scenario:
    spec: ScenarioSpec
    shards: list[ClientShard]
    proportions: np.ndarray | None = field(default=None)


def make_scenario(spec: ScenarioSpec, train: Sequence[UrlRecord],
                  test: Sequence[UrlRecord]) -> Scenario:
    """Build per-client train/test shards for one of the three settings.

    iid: both splits IID.  noniid2: Dirichlet train, IID test.  noniid3: one
    Dirichlet draw shared by train and test so each client's mixes match.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.clients
    props = None
    if spec.kind is ScenarioKind.IID:
        tr = partition_iid(train, k, rng)
        te = partition_iid(test, k, rng)
    elif spec.kind is ScenarioKind.NONIID2:
        props = dirichlet_proportions(2, k, spec.alpha, rng)
        tr = partition_by_proportions(train, props, rng)
        te = partition_iid(test, k, rng)
    else:
        props = dirichlet_proportions(2, k, spec.alpha, rng)
        tr = partition_by_proportions(train, props, rng)
        te = partition_by_proportions(test, props, rng)
    shards = [ClientShard(i, tuple(tr[i]), tuple(te[i])) for i in range(k)]
    return Scenario(spec, shards, props)
