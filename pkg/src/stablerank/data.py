"""Synthetic preference data with a token-learnable relevance signal.

Each user has a hidden set of preferred attribute values. Items carry a
fixed number of attributes, so an item's affinity to a user is simply how
many of its attributes the user prefers. Histories are sampled in
proportion to affinity; positives are unseen items whose attributes all
match; fillers share no attributes with the preference set. A model that
learns "candidate attributes co-occurring with history attributes" ranks
positives on top, and a Bayes oracle reading the hidden preference set
bounds what any scorer can achieve.

Candidate lists are stored in canonical order (ascending item id). All
presentation orders are applied downstream by whoever builds the prompt;
order never leaks into files.
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DatasetParseError, VersionError, VocabularyError
from .layout import N_SPECIAL

DATASET_VERSION = 1

# Special token names, index-aligned with layout's id constants.
SPECIAL_NAMES = ("<pad>", "<span>", "</span>", "<item>", "</item>", "<sep>", "<instr>")
INSTR = N_SPECIAL  # 6: the single instruction token


@dataclass(frozen=True)
class Item:
    item_id: int
    attrs: tuple[int, ...]


@dataclass
class Vocabulary:
    """Token id space: specials, then item ids, then attribute values."""

    n_items: int
    n_attr_vocab: int

    @property
    def item_base(self) -> int:
        return len(SPECIAL_NAMES)

    @property
    def attr_base(self) -> int:
        return self.item_base + self.n_items

    @property
    def size(self) -> int:
        return self.attr_base + self.n_attr_vocab

    def item_token(self, item_id: int) -> int:
        if not 0 <= item_id < self.n_items:
            raise VocabularyError(f"item id {item_id} outside 0..{self.n_items - 1}")
        return self.item_base + item_id

    def attr_token(self, attr: int) -> int:
        if not 0 <= attr < self.n_attr_vocab:
            raise VocabularyError(f"attribute {attr} outside 0..{self.n_attr_vocab - 1}")
        return self.attr_base + attr

    def decode(self, token: int) -> tuple[str, int | str]:
        """('special', name) | ('item', id) | ('attr', value)."""
        if 0 <= token < self.item_base:
            return ("special", SPECIAL_NAMES[token])
        if token < self.attr_base:
            return ("item", token - self.item_base)
        if token < self.size:
            return ("attr", token - self.attr_base)
        raise VocabularyError(f"token {token} outside vocabulary of size {self.size}")

    def item_tokens(self, item: Item) -> list[int]:
        """Constant-length rendering: id token then attribute tokens."""
        return [self.item_token(item.item_id)] + [self.attr_token(a) for a in item.attrs]

    @property
    def hash(self) -> str:
        text = f"v{DATASET_VERSION}|{'|'.join(SPECIAL_NAMES)}|items={self.n_items}|attrs={self.n_attr_vocab}"
        return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass
class RankedQuery:
    query_id: int
    user_id: int
    instruction: list[int]  # token ids, vocabulary space
    history: list[int]  # item ids, chronological
    candidates: list[int]  # item ids, canonical ascending order
    labels: np.ndarray  # aligned with candidates
    prefs: tuple[int, ...]  # hidden preference attributes (oracle only)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.candidates),):
            raise ConfigError("labels must align index-wise with candidates")
        if (self.labels < 0).any():
            raise ConfigError("labels must be non-negative")


@dataclass
class TokenizedQuery:
    """What scoring and training actually consume: pure token lists."""

    query_id: int
    instruction: list[int]
    history: list[int]
    candidates: list[list[int]]
    labels: np.ndarray


@dataclass
class Dataset:
    split: str
    gen: "GenConfig"
    items: list[Item]
    queries: list[RankedQuery]

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.gen.n_items, self.gen.n_attr_vocab)


@dataclass
class GenConfig:
    n_users: int = 600
    n_items: int = 1000
    n_attr_vocab: int = 24
    attrs_per_item: int = 2
    pref_size: int = 6
    K: int = 25
    history_len: int = 20
    positives_per_list: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_items < self.K:
            raise ConfigError(f"n_items {self.n_items} < K {self.K}")
        if self.positives_per_list > self.K:
            raise ConfigError("positives_per_list exceeds K")
        if self.attrs_per_item > self.n_attr_vocab or self.pref_size > self.n_attr_vocab:
            raise ConfigError("attribute demands exceed attribute vocabulary")
        for f in ("n_users", "n_items", "n_attr_vocab", "attrs_per_item", "pref_size", "K", "history_len", "positives_per_list"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1")


def _sample_user(gen: GenConfig, items: list[Item], user: int):
    """One user's query, deterministically; re-draws preferences on the rare
    attempt where the item pools cannot fill the list."""
    for attempt in range(32):
        rng = np.random.default_rng((gen.seed, 1 + user, attempt))
        prefs = tuple(sorted(rng.choice(gen.n_attr_vocab, size=gen.pref_size, replace=False).tolist()))
        pref_set = set(prefs)
        overlap = np.array([len(pref_set.intersection(it.attrs)) for it in items])
        liked = np.flatnonzero(overlap > 0)
        if liked.size < gen.history_len:
            continue
        weights = overlap[liked].astype(np.float64)
        history = rng.choice(liked, size=gen.history_len, replace=False, p=weights / weights.sum())
        seen = set(history.tolist())
        full_match = gen.attrs_per_item  # all attributes preferred
        pos_pool = np.array(
            [i for i in np.flatnonzero(overlap == full_match) if i not in seen], dtype=np.int64
        )
        neg_pool = np.flatnonzero(overlap == 0)
        n_pos = gen.positives_per_list
        if pos_pool.size < n_pos or neg_pool.size < gen.K - n_pos:
            continue
        positives = rng.choice(pos_pool, size=n_pos, replace=False)
        fillers = rng.choice(neg_pool, size=gen.K - n_pos, replace=False)
        cand_ids = np.concatenate([positives, fillers])
        order = np.argsort(cand_ids)  # canonical: ascending item id
        labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(gen.K - n_pos, dtype=np.int64)])
        return RankedQuery(
            query_id=user,
            user_id=user,
            instruction=[INSTR],
            history=[int(i) for i in history],
            candidates=[int(i) for i in cand_ids[order]],
            labels=labels[order],
            prefs=prefs,
        )
    raise ConfigError(
        f"could not build a feasible candidate list for user {user}; "
        "item/attribute pools too small for K, history_len, positives_per_list"
    )


def generate_synthetic(gen: GenConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Three disjoint splits (70/10/20 over users), fully determined by gen."""
    item_rng = np.random.default_rng((gen.seed, 0))
    items = [
        Item(i, tuple(sorted(item_rng.choice(gen.n_attr_vocab, size=gen.attrs_per_item, replace=False).tolist())))
        for i in range(gen.n_items)
    ]
    queries = [_sample_user(gen, items, u) for u in range(gen.n_users)]
    n_train = int(round(gen.n_users * 0.7))
    n_val = int(round(gen.n_users * 0.1))
    return (
        Dataset("train", gen, items, queries[:n_train]),
        Dataset("val", gen, items, queries[n_train : n_train + n_val]),
        Dataset("test", gen, items, queries[n_train + n_val :]),
    )


def oracle_scores(query: RankedQuery, items: list[Item]) -> np.ndarray:
    """Bayes-oracle affinity: candidate's attribute overlap with the hidden
    preference set. Upper-bounds any scorer that only sees tokens."""
    pref_set = set(query.prefs)
    return np.array(
        [len(pref_set.intersection(items[c].attrs)) for c in query.candidates], dtype=np.float64
    )


def tokenize_query(query: RankedQuery, vocab: Vocabulary, items: list[Item]) -> TokenizedQuery:
    """Render item ids into token lists (constant length per item)."""
    for tok in query.instruction:
        vocab.decode(tok)  # raises on out-of-range
    history_tokens: list[int] = []
    for item_id in query.history:
        history_tokens.extend(vocab.item_tokens(items[_check_item(item_id, vocab)]))
    candidates = [vocab.item_tokens(items[_check_item(c, vocab)]) for c in query.candidates]
    return TokenizedQuery(
        query_id=query.query_id,
        instruction=list(query.instruction),
        history=history_tokens,
        candidates=candidates,
        labels=query.labels.copy(),
    )


def _check_item(item_id: int, vocab: Vocabulary) -> int:
    if not 0 <= item_id < vocab.n_items:
        raise VocabularyError(f"item id {item_id} outside vocabulary")
    return item_id


def tokenize_dataset(ds: Dataset) -> list[TokenizedQuery]:
    vocab = ds.vocab
    return [tokenize_query(q, vocab, ds.items) for q in ds.queries]


# ---------------------------------------------------------------------------
# file format: one JSON header line, then one JSON record per query
# ---------------------------------------------------------------------------


def write_dataset(path: str, ds: Dataset) -> None:
    header = {
        "format": "stablerank-dataset",
        "version": DATASET_VERSION,
        "split": ds.split,
        "gen": asdict(ds.gen),
        "count": len(ds.queries),
        "vocab_hash": ds.vocab.hash,
        "items": [[it.item_id, *it.attrs] for it in ds.items],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for q in ds.queries:
            rec = {
                "query_id": q.query_id,
                "user_id": q.user_id,
                "instruction": q.instruction,
                "history": q.history,
                "candidates": q.candidates,
                "labels": q.labels.tolist(),
                "prefs": list(q.prefs),
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_dataset(path: str) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}: line 1: bad header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != "stablerank-dataset":
        raise DatasetParseError(f"{path}: line 1: not a dataset file")
    if header.get("version") != DATASET_VERSION:
        raise VersionError(
            f"{path}: dataset version {header.get('version')} unsupported (expected {DATASET_VERSION})"
        )
    gen = GenConfig(**header["gen"])
    items = [Item(int(row[0]), tuple(int(a) for a in row[1:])) for row in header["items"]]
    vocab = Vocabulary(gen.n_items, gen.n_attr_vocab)
    if header.get("vocab_hash") != vocab.hash:
        raise VersionError(f"{path}: vocabulary hash mismatch")
    queries = []
    for lineno, raw in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(raw)
            queries.append(
                RankedQuery(
                    query_id=int(rec["query_id"]),
                    user_id=int(rec["user_id"]),
                    instruction=[int(t) for t in rec["instruction"]],
                    history=[int(t) for t in rec["history"]],
                    candidates=[int(t) for t in rec["candidates"]],
                    labels=np.array(rec["labels"], dtype=np.int64),
                    prefs=tuple(int(p) for p in rec["prefs"]),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"{path}: line {lineno}: {exc}") from None
    if len(queries) != header["count"]:
        raise DatasetParseError(
            f"{path}: line {len(lines)}: expected {header['count']} records, found {len(queries)}"
        )
    return Dataset(header["split"], gen, items, queries)
