"""Synthetic composed-retrieval tasks over attribute scenes.

Each catalog item is a unique bundle of ``slots`` attributes, each taking one
of ``values`` symbols.  Items are drawn in small axis-aligned families (two
slots varied, the rest frozen) so that every item has several one-attribute
neighbours: exactly the hard negatives that make a re-ranking stage earn its
keep.  An "image" of an item is a feature grid whose cells render one slot
each (plus a summary row), with seeded Gaussian noise on top.  A query edits
one or two slots of a reference item via a tiny command language
(``set s3 to v5``) and the target is the catalog item carrying the edited
bundle.  Every query also records a 5-item subset: the target plus four
one-attribute-off distractors, mirroring subset-based evaluation protocols.

Train and validation corpora share the attribute vocabulary and feature
renderer but have disjoint bundles, and everything is a pure function of the
dataset configuration, so a manifest is enough to rebuild the data bit for
bit.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, GenerationError, ParseError

CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"

_SALT_CORPUS = 0x434F52
_SALT_EMBED = 0x454D42
_SALT_NOISE = 0x4E4F49
_SALT_QUERY = 0x515259
_SPLIT_TAGS = {"train": 0, "val": 1}

# family shape: spans over the two varied slots.  3 x 4 keeps >= 5
# one-attribute neighbours per member, so subsets survive dropping the
# reference from the distractor pool.
_FAMILY_SPANS = (3, 4)


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    corpus_items: int = 2048
    slots: int = 6
    values: int = 8
    grid: int = 6
    d_model: int = 64
    noise: float = 0.05
    train_queries: int = 4096
    val_queries: int = 512
    min_edits: int = 1
    max_edits: int = 2
    with_subsets: bool = True

    def validate(self) -> None:
        if min(self.corpus_items, self.slots, self.values, self.grid,
               self.d_model) < 1:
            raise ContractError(f"non-positive dataset dimension in {self}")
        if self.train_queries < 1 or self.val_queries < 1:
            raise ContractError("both splits need at least one query")
        if not (1 <= self.min_edits <= self.max_edits <= self.slots):
            raise ContractError(
                f"edit range [{self.min_edits}, {self.max_edits}] invalid "
                f"for {self.slots} slots"
            )
        if self.noise < 0:
            raise ContractError(f"noise must be non-negative, got {self.noise}")
        capacity = self.values ** self.slots
        if 2 * self.corpus_items > capacity:
            raise ContractError(
                f"two disjoint corpora of {self.corpus_items} items exceed "
                f"the {capacity} distinct bundles available"
            )
        if self.grid * self.grid < self.slots:
            raise ContractError(
                f"{self.grid}x{self.grid} grid cannot render {self.slots} slots"
            )


@dataclass(frozen=True)
class QueryTriplet:
    """One retrieval task: reference item, edit text, target item."""

    query_id: int
    ref_id: int
    target_id: int
    tokens: tuple[str, ...]
    subset: tuple[int, ...] | None = None


class SyntheticCorpus:
    """A catalog of attribute bundles plus its rendered feature grids."""

    def __init__(self, config: DatasetConfig, split: str, bundles: np.ndarray):
        if split not in _SPLIT_TAGS:
            raise ContractError(f"unknown split {split!r}")
        self.config = config
        self.split = split
        self.bundles = np.asarray(bundles, dtype=np.int16)
        self.ids = np.arange(len(self.bundles), dtype=np.int64)
        self._features: np.ndarray | None = None
        self._distances: np.ndarray | None = None
        self._bundle_to_id = {tuple(int(v) for v in b): int(i)
                              for i, b in enumerate(self.bundles)}

    def __len__(self) -> int:
        return len(self.bundles)

    def id_of(self, bundle: Sequence[int]) -> int | None:
        return self._bundle_to_id.get(tuple(int(v) for v in bundle))

    def features(self) -> np.ndarray:
        """(items, grid*grid + 1, d_model) float32 feature stack; row 0 of
        each item is the whole-scene summary, the rest are grid cells."""
        if self._features is None:
            self._features = _render_features(self.config, self.split, self.bundles)
        return self._features

    def feature_rows(self, item_ids: np.ndarray) -> np.ndarray:
        return self.features()[np.asarray(item_ids, dtype=np.int64)]

    def distances(self) -> np.ndarray:
        """(items, items) int8 Hamming distances between bundles."""
        if self._distances is None:
            m = len(self.bundles)
            out = np.zeros((m, m), dtype=np.int8)
            for s in range(self.config.slots):
                col = self.bundles[:, s]
                out += (col[:, None] != col[None, :]).astype(np.int8)
            self._distances = out
        return self._distances

    def one_off_ids(self, item_id: int) -> np.ndarray:
        """Ids of items exactly one attribute away, ascending."""
        return np.nonzero(self.distances()[item_id] == 1)[0].astype(np.int64)


def _value_embeddings(config: DatasetConfig) -> np.ndarray:
    """Unit direction per (slot, value) symbol, shared by every split."""
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _SALT_EMBED]))
    emb = rng.standard_normal((config.slots, config.values, config.d_model))
    emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
    return emb.astype(np.float32)


def _render_features(config: DatasetConfig, split: str,
                     bundles: np.ndarray) -> np.ndarray:
    emb = _value_embeddings(config)
    cells = config.grid * config.grid
    # contiguous blocks of cells per slot, sizes differing by at most one
    cell_slot = (np.arange(cells) * config.slots) // cells
    sigma = config.noise / np.sqrt(config.d_model)
    split_tag = _SPLIT_TAGS[split]
    out = np.empty((len(bundles), cells + 1, config.d_model), dtype=np.float32)
    for i, bundle in enumerate(bundles):
        rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed, _SALT_NOISE, split_tag, int(i)]))
        noise = rng.standard_normal((cells + 1, config.d_model)) * sigma
        slot_vecs = emb[np.arange(config.slots), bundle]
        rows = np.empty((cells + 1, config.d_model), dtype=np.float64)
        rows[0] = slot_vecs.mean(axis=0)
        rows[1:] = slot_vecs[cell_slot]
        out[i] = (rows + noise).astype(np.float32)
    return out


def generate_corpus(config: DatasetConfig, split: str,
                    forbidden: frozenset = frozenset()) -> SyntheticCorpus:
    """Draw a corpus of unique bundles arranged in two-slot families."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(
        [config.seed, _SALT_CORPUS, _SPLIT_TAGS[split]]))
    spans = tuple(min(s, config.values) for s in _FAMILY_SPANS[:max(1, min(2, config.slots))])
    family_size = int(np.prod(spans))
    used: set[tuple[int, ...]] = set()
    bundles: list[tuple[int, ...]] = []
    budget = 1000 + 200 * (config.corpus_items // family_size + 1)
    attempts = 0
    while len(bundles) < config.corpus_items:
        attempts += 1
        if attempts > budget:
            raise GenerationError(
                f"could not place a family of {family_size} fresh bundles "
                f"after {budget} attempts (split {split!r})"
            )
        base = rng.integers(0, config.values, size=config.slots)
        vary = rng.choice(config.slots, size=len(spans), replace=False)
        choices = [rng.choice(config.values, size=span, replace=False)
                   for span in spans]
        family = []
        for combo in itertools.product(*choices):
            b = base.copy()
            b[vary] = combo
            family.append(tuple(int(v) for v in b))
        if len(set(family)) != family_size:
            continue
        if any(b in used or b in forbidden for b in family):
            continue
        room = config.corpus_items - len(bundles)
        kept = family[:room]
        used.update(kept)
        bundles.extend(kept)
    return SyntheticCorpus(config, split, np.asarray(bundles, dtype=np.int16))


@dataclass
class Dataset:
    """Both corpora and query sets of one generated dataset."""

    config: DatasetConfig
    train_corpus: SyntheticCorpus
    val_corpus: SyntheticCorpus
    train_queries: list[QueryTriplet]
    val_queries: list[QueryTriplet]

    def corpus(self, split: str) -> SyntheticCorpus:
        return self.train_corpus if split == "train" else self.val_corpus

    def queries(self, split: str) -> list[QueryTriplet]:
        return self.train_queries if split == "train" else self.val_queries


def generate_dataset(config: DatasetConfig) -> Dataset:
    """Generate disjoint train/val corpora and their query sets."""
    config.validate()
    train = generate_corpus(config, "train")
    train_bundles = frozenset(tuple(int(v) for v in b) for b in train.bundles)
    val = generate_corpus(config, "val", forbidden=train_bundles)
    return Dataset(
        config=config,
        train_corpus=train,
        val_corpus=val,
        train_queries=generate_queries(train, config.train_queries),
        val_queries=generate_queries(val, config.val_queries),
    )


def edit_tokens(ref_bundle: np.ndarray, target_bundle: np.ndarray) -> tuple[str, ...]:
    """Command tokens that rewrite the reference bundle into the target."""
    toks: list[str] = []
    for s in np.nonzero(ref_bundle != target_bundle)[0]:
        toks += ["set", f"s{int(s)}", "to", f"v{int(target_bundle[s])}"]
    return tuple(toks)


def generate_queries(corpus: SyntheticCorpus, count: int,
                     budget_per_query: int = 200) -> list[QueryTriplet]:
    """Sample edit queries over a corpus.

    Targets are uniform over items within the configured edit distance of
    the reference; when subsets are enabled a target must keep four
    one-attribute distractors after the reference is set aside.
    """
    config = corpus.config
    if count < 1:
        raise ContractError(f"query count must be >= 1, got {count}")
    rng = np.random.default_rng(np.random.SeedSequence(
        [config.seed, _SALT_QUERY, _SPLIT_TAGS[corpus.split]]))
    dist = corpus.distances()
    one_off_counts = (dist == 1).sum(axis=1)
    queries: list[QueryTriplet] = []
    for qid in range(count):
        for _ in range(budget_per_query):
            ref = int(rng.integers(0, len(corpus)))
            d = dist[ref]
            valid = (d >= config.min_edits) & (d <= config.max_edits)
            if config.with_subsets:
                # a one-edit target loses the reference from its distractor
                # pool, so it needs a spare neighbour
                valid &= (one_off_counts - (d == 1)) >= 4
            candidates = np.nonzero(valid)[0]
            if len(candidates) == 0:
                continue
            target = int(candidates[rng.integers(0, len(candidates))])
            subset = None
            if config.with_subsets:
                pool = [int(i) for i in corpus.one_off_ids(target) if int(i) != ref]
                subset = tuple(sorted([target] + pool[:4]))
            queries.append(QueryTriplet(
                query_id=qid, ref_id=ref, target_id=target,
                tokens=edit_tokens(corpus.bundles[ref], corpus.bundles[target]),
                subset=subset))
            break
        else:
            raise GenerationError(
                f"no admissible (reference, target) pair found for query "
                f"{qid} within {budget_per_query} attempts"
            )
    return queries


# -- tokenization -------------------------------------------------------------


def vocabulary(config: DatasetConfig) -> list[str]:
    """Token inventory: specials, command words, slot and value names."""
    return ([CLS_TOKEN, PAD_TOKEN, "set", "to"]
            + [f"s{i}" for i in range(config.slots)]
            + [f"v{j}" for j in range(config.values)])


def encode_queries(queries: Sequence[QueryTriplet], vocab: Sequence[str],
                   pad_to: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Map query texts onto (ids, mask) arrays with a leading [CLS] slot."""
    index = {tok: i for i, tok in enumerate(vocab)}
    lengths = [1 + len(q.tokens) for q in queries]
    width = max(lengths) if pad_to is None else pad_to
    if width < max(lengths):
        raise ContractError(
            f"pad width {width} is shorter than the longest query ({max(lengths)})"
        )
    ids = np.full((len(queries), width), index[PAD_TOKEN], dtype=np.int64)
    mask = np.zeros((len(queries), width), dtype=bool)
    for r, q in enumerate(queries):
        try:
            row = [index[CLS_TOKEN]] + [index[t] for t in q.tokens]
        except KeyError as exc:
            raise ContractError(
                f"query {q.query_id} uses a token outside the vocabulary: "
                f"{exc.args[0]!r}"
            ) from None
        ids[r, :len(row)] = row
        mask[r, :len(row)] = True
    return ids, mask


# -- serialization ------------------------------------------------------------


def triplets_to_lines(queries: Sequence[QueryTriplet]) -> list[str]:
    lines = []
    for q in queries:
        parts = [f"query_id={q.query_id}", f"ref_id={q.ref_id}",
                 f"target_id={q.target_id}", "tokens=" + ",".join(q.tokens)]
        if q.subset is not None:
            parts.append("subset=" + ",".join(str(i) for i in q.subset))
        lines.append(" ".join(parts))
    return lines


def triplets_from_lines(lines: Iterable[str]) -> list[QueryTriplet]:
    out: list[QueryTriplet] = []
    for n, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        fields: dict[str, str] = {}
        for part in line.split():
            if "=" not in part:
                raise ParseError(f"line {n}: field {part!r} is not key=value")
            key, _, value = part.partition("=")
            if key in fields:
                raise ParseError(f"line {n}: duplicate field {key!r}")
            fields[key] = value
        try:
            qid = int(fields.pop("query_id"))
            ref = int(fields.pop("ref_id"))
            target = int(fields.pop("target_id"))
            toks = fields.pop("tokens")
        except KeyError as exc:
            raise ParseError(f"line {n}: missing field {exc.args[0]!r}") from None
        except ValueError:
            raise ParseError(f"line {n}: non-integer id field") from None
        subset = None
        if "subset" in fields:
            try:
                subset = tuple(int(v) for v in fields.pop("subset").split(","))
            except ValueError:
                raise ParseError(f"line {n}: malformed subset") from None
            if len(subset) != 5 or len(set(subset)) != 5:
                raise ParseError(
                    f"line {n}: subset must hold 5 distinct ids, got {subset}"
                )
            if target not in subset:
                raise ParseError(f"line {n}: subset omits the target id")
        if fields:
            raise ParseError(f"line {n}: unknown fields {sorted(fields)}")
        tokens = tuple(t for t in toks.split(",") if t) if toks else ()
        out.append(QueryTriplet(qid, ref, target, tokens, subset))
    return out


def save_triplets(path, queries: Sequence[QueryTriplet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in triplets_to_lines(queries):
            fh.write(line + "\n")


def load_triplets(path) -> list[QueryTriplet]:
    with open(path, "r", encoding="utf-8") as fh:
        return triplets_from_lines(fh)


# -- manifest -----------------------------------------------------------------

_MANIFEST_FIELDS = [
    ("seed", int), ("corpus_items", int), ("slots", int), ("values", int),
    ("grid", int), ("d_model", int), ("noise", float), ("train_queries", int),
    ("val_queries", int), ("min_edits", int), ("max_edits", int),
    ("with_subsets", lambda s: s == "true"),
]


def manifest_text(config: DatasetConfig) -> str:
    lines = ["format=cir2-dataset", "version=1"]
    for name, _ in _MANIFEST_FIELDS:
        value = getattr(config, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> DatasetConfig:
    fields: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"manifest line {n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        if key in fields:
            raise ParseError(f"manifest line {n}: duplicate key {key!r}")
        fields[key] = value
    if fields.get("format") != "cir2-dataset":
        raise ParseError(f"not a dataset manifest: format={fields.get('format')!r}")
    if fields.get("version") != "1":
        raise ParseError(f"unsupported manifest version {fields.get('version')!r}")
    kwargs = {}
    for name, cast in _MANIFEST_FIELDS:
        if name not in fields:
            raise ParseError(f"manifest is missing field {name!r}")
        try:
            kwargs[name] = cast(fields[name])
        except ValueError:
            raise ParseError(f"manifest field {name!r} is malformed") from None
    config = DatasetConfig(**kwargs)
    config.validate()
    return config
