"""Domain-tagged corpus loading, vocabulary building, and example packing.

Input format (dom-corpus v1): UTF-8 text, one record per line,
``domain_name<TAB>document_text``, no escaping, empty lines skipped.
Domain names must not contain TAB.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
MASK_ID = 4
RESERVED_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
NUM_RESERVED = len(RESERVED_TOKENS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

PACKED_MAGIC = "DOMPACK v1"
VOCAB_MAGIC = "DOMVOCAB v1"
TABLE_MAGIC = "DOMTABLE v1"


def word_tokens(text: str) -> list[str]:
    """Lowercased word-level split; punctuation marks become their own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Document:
    domain_id: int
    tokens: list[int]


@dataclass
class DomainTable:
    """All domain names in first-seen order, the target index, and per-domain
    packed-example counts (filled in after packing)."""

    names: list[str]
    target_index: int
    counts: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise CorpusError("duplicate domain names")
        if not 0 <= self.target_index < len(self.names):
            raise ConfigError(f"target index {self.target_index} out of range")
        if not self.counts:
            self.counts = [0] * len(self.names)

    @property
    def n_plus_1(self) -> int:
        return len(self.names)

    def domain_id(self, name: str) -> int:
        return self.names.index(name)


class Vocabulary:
    """Bijection between retained token strings and ids >= NUM_RESERVED.

    Ids 0..4 are fixed: [PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3, [MASK]=4.
    """

    def __init__(self, retained: list[str]):
        self.id_to_token = RESERVED_TOKENS + list(retained)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)


@dataclass(eq=False)
class PackedExample:
    """Fixed-capacity token-id row built from same-domain documents.

    ids[0] is [CLS]; document boundaries inside the row are [SEP]; positions
    at and beyond valid_len are [PAD].
    """

    ids: np.ndarray
    valid_len: int
    domain_id: int


@dataclass
class PackedCorpus:
    examples: list[PackedExample]
    table: DomainTable
    max_len: int
    vocab_size: int


def load_corpus(path: str | Path, target: str) -> tuple[DomainTable, list[tuple[str, str]]]:
    """Read a dom-corpus v1 file; returns the domain table and raw records.

    Domain names are enumerated in first-seen order. `target` selects the
    target domain by name and must be present.
    """
    records: list[tuple[str, str]] = []
    names: list[str] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise CorpusError(f"line {lineno}: missing TAB separator")
            name, text = line.split("\t", 1)
            if name not in seen:
                seen[name] = len(names)
                names.append(name)
            records.append((name, text))
    if not records:
        raise CorpusError("empty corpus")
    if target not in seen:
        raise ConfigError(f"target domain {target!r} not present in corpus")
    return DomainTable(names=names, target_index=seen[target]), records


def build_vocab(texts: list[str], min_count: int, max_size: int) -> Vocabulary:
    """Most frequent word tokens with count >= min_count, at most max_size of
    them; ties at equal count break lexicographically."""
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(word_tokens(text))
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept[:max_size])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids for a text; out-of-vocabulary words map to [UNK]."""
    get = vocab.token_to_id.get
    return [get(t, UNK_ID) for t in word_tokens(text)]


def pack_domain(docs: list[Document], max_len: int, vocab: Vocabulary) -> list[PackedExample]:
    """Greedy same-domain packing in input order.

    Each document contributes its tokens followed by one [SEP]; the resulting
    stream is cut into [CLS]-prefixed rows of capacity max_len - 1, so a
    document that does not fit is split and its remainder carries into the
    next row. The final row is padded to max_len.
    """
    if max_len < 3:
        raise ConfigError("max_len must be >= 3")
    if not docs:
        return []
    domain = docs[0].domain_id
    stream: list[int] = []
    for doc in docs:
        if doc.domain_id != domain:
            raise ConfigError("pack_domain requires documents of a single domain")
        if not doc.tokens:
            continue
        for tok in doc.tokens:
            if not 0 <= tok < vocab.size:
                raise CorpusError(f"token id {tok} out of vocabulary range")
        stream.extend(doc.tokens)
        stream.append(SEP_ID)

    capacity = max_len - 1
    out: list[PackedExample] = []
    for start in range(0, len(stream), capacity):
        chunk = stream[start : start + capacity]
        ids = np.full(max_len, PAD_ID, dtype=np.int64)
        ids[0] = CLS_ID
        ids[1 : 1 + len(chunk)] = chunk
        out.append(PackedExample(ids=ids, valid_len=1 + len(chunk), domain_id=domain))
    return out


def pack_corpus(
    table: DomainTable,
    records: list[tuple[str, str]],
    vocab: Vocabulary,
    max_len: int,
) -> PackedCorpus:
    """Tokenize and pack every domain; updates table.counts in place.

    Records whose text tokenizes to nothing are dropped. Output order is
    domain id ascending, then packing order within the domain.
    """
    by_domain: list[list[Document]] = [[] for _ in table.names]
    ids_by_name = {n: i for i, n in enumerate(table.names)}
    for name, text in records:
        toks = tokenize(text, vocab)
        if toks:
            did = ids_by_name[name]
            by_domain[did].append(Document(domain_id=did, tokens=toks))
    examples: list[PackedExample] = []
    for did, docs in enumerate(by_domain):
        packed = pack_domain(docs, max_len, vocab)
        table.counts[did] = len(packed)
        examples.extend(packed)
    return PackedCorpus(examples=examples, table=table, max_len=max_len, vocab_size=vocab.size)


def corpus_stats(table: DomainTable) -> list[tuple[str, int]]:
    """(domain name, packed-example count) sorted by count descending,
    ties by name ascending."""
    return sorted(
        zip(table.names, table.counts), key=lambda item: (-item[1], item[0])
    )


def validate_packed(corpus: PackedCorpus) -> None:
    """Check every packed-example invariant; raises CorpusError on violation."""
    counted = [0] * corpus.table.n_plus_1
    for i, ex in enumerate(corpus.examples):
        if ex.ids.shape != (corpus.max_len,):
            raise CorpusError(f"example {i}: wrong row length")
        if ex.ids[0] != CLS_ID:
            raise CorpusError(f"example {i}: row does not start with [CLS]")
        if not 1 <= ex.valid_len <= corpus.max_len:
            raise CorpusError(f"example {i}: bad valid_len {ex.valid_len}")
        if np.any(ex.ids[ex.valid_len :] != PAD_ID):
            raise CorpusError(f"example {i}: non-pad token in padding region")
        if np.any(ex.ids[: ex.valid_len] == PAD_ID):
            raise CorpusError(f"example {i}: pad token inside valid region")
        if np.any(ex.ids >= corpus.vocab_size) or np.any(ex.ids < 0):
            raise CorpusError(f"example {i}: token id out of range")
        if not 0 <= ex.domain_id < corpus.table.n_plus_1:
            raise CorpusError(f"example {i}: domain id out of range")
        counted[ex.domain_id] += 1
    if counted != list(corpus.table.counts):
        raise CorpusError("table counts disagree with packed examples")
    if corpus.table.counts[corpus.table.target_index] < 1:
        raise CorpusError("target domain has no packed examples")


# ---------------------------------------------------------------------------
# File formats


def write_packed(path: str | Path, corpus: PackedCorpus) -> None:
    """Packed-corpus file: one header line, then one line per example
    ``domain_id<TAB>valid_len<TAB>space-separated ids`` (all max_len ids)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"{PACKED_MAGIC} L_max={corpus.max_len} "
            f"n_plus_1={corpus.table.n_plus_1} vocab_size={corpus.vocab_size}\n"
        )
        for ex in corpus.examples:
            ids = " ".join(str(int(v)) for v in ex.ids)
            fh.write(f"{ex.domain_id}\t{ex.valid_len}\t{ids}\n")


def read_packed(path: str | Path, table: DomainTable) -> PackedCorpus:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split(" ")
        if fields[:2] != PACKED_MAGIC.split(" "):
            raise CorpusError(f"bad packed-corpus header: {header!r}")
        try:
            kv = dict(f.split("=", 1) for f in fields[2:])
            max_len = int(kv["L_max"])
            n_plus_1 = int(kv["n_plus_1"])
            vocab_size = int(kv["vocab_size"])
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"bad packed-corpus header: {header!r}") from exc
        if n_plus_1 != table.n_plus_1:
            raise CorpusError(
                f"packed corpus has {n_plus_1} domains, table has {table.n_plus_1}"
            )
        examples: list[PackedExample] = []
        counts = [0] * n_plus_1
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"line {lineno}: expected 3 TAB-separated fields")
            try:
                did = int(parts[0])
                valid_len = int(parts[1])
                ids = np.array([int(v) for v in parts[2].split(" ")], dtype=np.int64)
            except ValueError as exc:
                raise CorpusError(f"line {lineno}: unparseable example") from exc
            if ids.shape != (max_len,):
                raise CorpusError(f"line {lineno}: expected {max_len} ids")
            examples.append(PackedExample(ids=ids, valid_len=valid_len, domain_id=did))
            counts[did] += 1
    table.counts = counts
    corpus = PackedCorpus(examples=examples, table=table, max_len=max_len, vocab_size=vocab_size)
    validate_packed(corpus)
    return corpus


def write_vocab(path: str | Path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{VOCAB_MAGIC} size={vocab.size}\n")
        for i, tok in enumerate(vocab.id_to_token):
            fh.write(f"{i}\t{tok}\n")


def read_vocab(path: str | Path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(VOCAB_MAGIC):
            raise CorpusError(f"bad vocabulary header: {header!r}")
        tokens = []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            ident, tok = line.split("\t", 1)
            tokens.append((int(ident), tok))
    tokens.sort()
    ordered = [t for _, t in tokens]
    if ordered[:NUM_RESERVED] != RESERVED_TOKENS:
        raise CorpusError("vocabulary file lacks the reserved tokens")
    return Vocabulary(ordered[NUM_RESERVED:])


def write_domain_table(path: str | Path, table: DomainTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{TABLE_MAGIC} n_plus_1={table.n_plus_1} target={table.target_index}\n")
        for i, name in enumerate(table.names):
            fh.write(f"{i}\t{name}\t{table.counts[i]}\n")


def read_domain_table(path: str | Path) -> DomainTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split(" ")
        if fields[:2] != TABLE_MAGIC.split(" "):
            raise CorpusError(f"bad domain-table header: {header!r}")
        kv = dict(f.split("=", 1) for f in fields[2:])
        target = int(kv["target"])
        rows = []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            ident, name, count = line.split("\t")
            rows.append((int(ident), name, int(count)))
    rows.sort()
    return DomainTable(
        names=[name for _, name, _ in rows],
        target_index=target,
        counts=[count for _, _, count in rows],
    )


def write_stats(path: str | Path, stats: list[tuple[str, int]]) -> None:
    """Rank-size report: ``rank<TAB>name<TAB>count``, rank starting at 1."""
    with open(path, "w", encoding="utf-8") as fh:
        for rank, (name, count) in enumerate(stats, start=1):
            fh.write(f"{rank}\t{name}\t{count}\n")
