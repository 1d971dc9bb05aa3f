"""Knowledge-graph containers, dataset I/O, episode sampling and the synthetic generator.

Dataset directory layout (same as the public few-shot releases)::

    train_tasks.json / dev_tasks.json / test_tasks.json
        {relation_name: [[head, relation, tail], ...]}
    path_graph
        background triples, one ``head<TAB>relation<TAB>tail`` per line
    rel2candidates.json
        {relation_name: [entity_name, ...]}
    e1rel_e2.json
        {"head<TAB>relation": [tail, ...]}
    ent2ids / relation2ids      (optional)
        {name: id}; pins the vocabulary order when present
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

INV_SUFFIX = "_inv"
TASK_FILES = {"train": "train_tasks.json", "valid": "dev_tasks.json", "test": "test_tasks.json"}
BACKGROUND_FILE = "path_graph"
CANDIDATES_FILE = "rel2candidates.json"
FILTER_FILE = "e1rel_e2.json"
ENT_VOCAB_FILE = "ent2ids"
REL_VOCAB_FILE = "relation2ids"

CATEGORIES = ("1-1", "1-N", "N-1", "N-N")


class DatasetError(Exception):
    """A dataset file is missing or unreadable."""


class SchemaError(DatasetError):
    """A dataset file is readable but its contents are inconsistent."""


class EpisodeError(ValueError):
    pass


class SamplingError(EpisodeError):
    pass


class GenerationError(ValueError):
    pass


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    entity_vocab: list[str]
    relation_vocab: list[str]
    background_triples: list[Triple]
    neighbor_index: dict[int, list[tuple[int, int]]]
    max_neighbors: int = 50
    seed: int = 0

    def __post_init__(self):
        self.entity_ids = {name: i for i, name in enumerate(self.entity_vocab)}
        self.relation_ids = {name: i for i, name in enumerate(self.relation_vocab)}

    @property
    def num_entities(self) -> int:
        return len(self.entity_vocab)

    @property
    def num_relations(self) -> int:
        return len(self.relation_vocab)

    def neighbors(self, entity: int) -> list[tuple[int, int]]:
        return self.neighbor_index.get(entity, [])

    def inverse_of(self, relation: int) -> int:
        return self.relation_ids[self.relation_vocab[relation] + INV_SUFFIX]

    def background_relations(self) -> list[int]:
        """Forward background relation ids (inverses excluded)."""
        seen = dict.fromkeys(t.relation for t in self.background_triples)
        return list(seen)


@dataclass
class TaskSplit:
    few_shot_relations: dict[int, list[Triple]]
    train_relations: list[int]
    valid_relations: list[int]
    test_relations: list[int]
    candidates: dict[int, list[int]]
    known_tails: dict[tuple[int, int], set[int]] = field(default_factory=dict)

    def partition(self, name: str) -> list[int]:
        try:
            return {"train": self.train_relations, "valid": self.valid_relations,
                    "test": self.test_relations}[name]
        except KeyError:
            raise ValueError(f"unknown partition {name!r}") from None

    def is_true(self, head: int, relation: int, tail: int) -> bool:
        return tail in self.known_tails.get((head, relation), ())


@dataclass
class Episode:
    relation: int
    support: list[Triple]
    query: list[Triple]
    support_negatives: list[Triple]
    query_negatives: list[Triple]

    @property
    def K(self) -> int:
        return len(self.support)


@dataclass
class EmbeddingTable:
    """Pretrained vectors; ``relation_vectors`` has one row per relation id."""

    entity_vectors: np.ndarray
    relation_vectors: np.ndarray

    def __post_init__(self):
        self.entity_vectors = np.ascontiguousarray(self.entity_vectors, dtype=np.float64)
        self.relation_vectors = np.ascontiguousarray(self.relation_vectors, dtype=np.float64)
        if self.entity_vectors.shape[1] != self.relation_vectors.shape[1]:
            raise ValueError("entity and relation vectors must share the same dimension")
        if not (np.isfinite(self.entity_vectors).all() and np.isfinite(self.relation_vectors).all()):
            raise ValueError("embedding table contains non-finite entries")

    @property
    def d(self) -> int:
        return self.entity_vectors.shape[1]

    def check_vocab(self, graph: KnowledgeGraph) -> None:
        if self.entity_vectors.shape[0] != graph.num_entities:
            raise ValueError(f"entity table has {self.entity_vectors.shape[0]} rows, "
                             f"vocabulary has {graph.num_entities}")
        if self.relation_vectors.shape[0] != graph.num_relations:
            raise ValueError(f"relation table has {self.relation_vectors.shape[0]} rows, "
                             f"vocabulary has {graph.num_relations}")


# ---------------------------------------------------------------------------
# neighborhoods
# ---------------------------------------------------------------------------

def build_neighbor_index(triples: Iterable[Triple], inverse: dict[int, int],
                         max_neighbors: int = 50, seed: int = 0) -> dict[int, list[tuple[int, int]]]:
    """Map each entity to its one-hop (relation, entity) neighbors.

    Incoming edges ``(src, r, e)`` are stored on ``e`` as ``(inverse[r], src)``.
    Lists longer than ``max_neighbors`` are down-sampled uniformly without
    replacement; entities are visited in id order so the result depends only
    on ``seed``.
    """
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    full: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for h, r, t in triples:
        full[h].append((r, t))
        full[t].append((inverse[r], h))
    rng = np.random.default_rng(seed)
    index = {}
    for entity in sorted(full):
        nbrs = full[entity]
        if len(nbrs) > max_neighbors:
            keep = np.sort(rng.choice(len(nbrs), size=max_neighbors, replace=False))
            nbrs = [nbrs[i] for i in keep]
        index[entity] = nbrs
    return index


def make_graph(entity_vocab: list[str], base_relations: Sequence[str], task_relations: Sequence[str],
               background: Sequence[tuple[str, str, str]], max_neighbors: int = 50,
               seed: int = 0, relation_order: Sequence[str] | None = None) -> KnowledgeGraph:
    """Assemble a KnowledgeGraph from named triples, synthesizing inverse relations."""
    if relation_order is None:
        relation_order = list(base_relations) + [r + INV_SUFFIX for r in base_relations]
        relation_order += [r for r in task_relations if r not in set(relation_order)]
    else:
        relation_order = list(relation_order)
        present = set(relation_order)
        for name in list(base_relations) + [r + INV_SUFFIX for r in base_relations] + list(task_relations):
            if name not in present:
                relation_order.append(name)
                present.add(name)
    rel_ids = {name: i for i, name in enumerate(relation_order)}
    ent_ids = {name: i for i, name in enumerate(entity_vocab)}
    triples = [Triple(ent_ids[h], rel_ids[r], ent_ids[t]) for h, r, t in background]
    inverse = {rel_ids[r]: rel_ids[r + INV_SUFFIX] for r in base_relations}
    index = build_neighbor_index(triples, inverse, max_neighbors, seed)
    return KnowledgeGraph(list(entity_vocab), relation_order, triples, index, max_neighbors, seed)


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def _read_json(path: Path):
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path.name}: invalid JSON ({exc})") from exc


def load_dataset(root_path: str | Path, max_neighbors: int = 50,
                 seed: int = 0) -> tuple[KnowledgeGraph, TaskSplit]:
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")

    bg_path = root / BACKGROUND_FILE
    if not bg_path.is_file():
        raise DatasetError(f"missing dataset file: {bg_path}")
    background: list[tuple[str, str, str]] = []
    with open(bg_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise SchemaError(f"{BACKGROUND_FILE}:{lineno}: expected 3 tab-separated fields: {line!r}")
            background.append((parts[0], parts[1], parts[2]))

    tasks = {part: _read_json(root / fname) for part, fname in TASK_FILES.items()}
    candidates_raw = _read_json(root / CANDIDATES_FILE)
    filter_raw = _read_json(root / FILTER_FILE)

    pinned_entities = None
    if (root / ENT_VOCAB_FILE).is_file():
        ids = _read_json(root / ENT_VOCAB_FILE)
        pinned_entities = [name for name, _ in sorted(ids.items(), key=lambda kv: kv[1])]
    pinned_relations = None
    if (root / REL_VOCAB_FILE).is_file():
        ids = _read_json(root / REL_VOCAB_FILE)
        pinned_relations = [name for name, _ in sorted(ids.items(), key=lambda kv: kv[1])]

    base_relations = list(dict.fromkeys(r for _, r, _ in background))
    base_set = set(base_relations)
    task_relations: list[str] = []
    for part, content in tasks.items():
        if not isinstance(content, dict):
            raise SchemaError(f"{TASK_FILES[part]}: expected an object keyed by relation name")
        for rel, triples in content.items():
            if rel in base_set:
                raise SchemaError(f"{TASK_FILES[part]}: task relation {rel!r} also occurs in the background graph")
            task_relations.append(rel)

    if pinned_entities is not None:
        entity_vocab = pinned_entities
        known = set(entity_vocab)

        def check(name, where):
            if name not in known:
                raise SchemaError(f"{where}: unknown entity {name!r}")
        for lineno, (h, _, t) in enumerate(background, 1):
            check(h, f"{BACKGROUND_FILE}:{lineno}")
            check(t, f"{BACKGROUND_FILE}:{lineno}")
    else:
        entity_vocab = list(dict.fromkeys(e for h, _, t in background for e in (h, t)))
        known = set(entity_vocab)

        def check(name, where):
            if name not in known:
                known.add(name)
                entity_vocab.append(name)

    named_tasks: dict[str, tuple[str, list[tuple[str, str, str]]]] = {}
    for part, content in tasks.items():
        for rel, triples in content.items():
            parsed = []
            for i, item in enumerate(triples):
                where = f"{TASK_FILES[part]}[{rel!r}][{i}]"
                if not (isinstance(item, (list, tuple)) and len(item) == 3):
                    raise SchemaError(f"{where}: expected [head, relation, tail], got {item!r}")
                h, r, t = item
                if r != rel:
                    raise SchemaError(f"{where}: relation {r!r} does not match task key {rel!r}")
                check(h, where)
                check(t, where)
                parsed.append((h, r, t))
            named_tasks[rel] = (part, parsed)
    for rel, names in candidates_raw.items():
        for name in names:
            check(name, f"{CANDIDATES_FILE}[{rel!r}]")

    graph = make_graph(entity_vocab, base_relations, task_relations, background,
                       max_neighbors, seed, pinned_relations)
    ent, rel_ids = graph.entity_ids, graph.relation_ids

    few_shot: dict[int, list[Triple]] = {}
    parts: dict[str, list[int]] = {"train": [], "valid": [], "test": []}
    for rel, (part, triples) in named_tasks.items():
        rid = rel_ids[rel]
        few_shot[rid] = [Triple(ent[h], rid, ent[t]) for h, _, t in triples]
        parts[part].append(rid)

    candidates: dict[int, list[int]] = {}
    for rel in named_tasks:
        rid = rel_ids[rel]
        if rel in candidates_raw:
            candidates[rid] = [ent[name] for name in candidates_raw[rel]]
        else:
            candidates[rid] = list(range(graph.num_entities))

    known_tails: dict[tuple[int, int], set[int]] = defaultdict(set)
    for key, tails in filter_raw.items():
        if "\t" not in key:
            raise SchemaError(f"{FILTER_FILE}: key {key!r} is not 'head<TAB>relation'")
        h, r = key.split("\t", 1)
        if h not in ent or r not in rel_ids:
            continue
        for t in tails:
            if t in ent:
                known_tails[(ent[h], rel_ids[r])].add(ent[t])
    for triples in few_shot.values():
        for h, r, t in triples:
            known_tails[(h, r)].add(t)

    split = TaskSplit(few_shot, parts["train"], parts["valid"], parts["test"],
                      candidates, dict(known_tails))
    logger.info("loaded %s: %s", root, dataset_stats(graph, split))
    return graph, split


def save_dataset(graph: KnowledgeGraph, split: TaskSplit, root_path: str | Path) -> None:
    """Write ``graph``/``split`` in the layout read by :func:`load_dataset`."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    ents, rels = graph.entity_vocab, graph.relation_vocab

    with open(root / BACKGROUND_FILE, "w", encoding="utf-8") as fh:
        for h, r, t in graph.background_triples:
            fh.write(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n")

    for part, fname in TASK_FILES.items():
        content = {rels[rid]: [[ents[h], rels[r], ents[t]] for h, r, t in split.few_shot_relations[rid]]
                   for rid in split.partition(part)}
        _write_json(root / fname, content)
    _write_json(root / CANDIDATES_FILE,
                {rels[rid]: [ents[e] for e in pool] for rid, pool in split.candidates.items()})
    _write_json(root / FILTER_FILE,
                {f"{ents[h]}\t{rels[r]}": [ents[t] for t in sorted(tails)]
                 for (h, r), tails in sorted(split.known_tails.items())})
    _write_json(root / ENT_VOCAB_FILE, graph.entity_ids)
    _write_json(root / REL_VOCAB_FILE, graph.relation_ids)


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False)


def dataset_stats(graph: KnowledgeGraph, split: TaskSplit) -> dict[str, int]:
    n_task = sum(len(v) for v in split.few_shot_relations.values())
    return {
        "relations": len(graph.background_relations()) + len(split.few_shot_relations),
        "entities": graph.num_entities,
        "triples": len(graph.background_triples) + n_task,
        "background_triples": len(graph.background_triples),
        "task_train": len(split.train_relations),
        "task_valid": len(split.valid_relations),
        "task_test": len(split.test_relations),
    }


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def corrupt_tail(split: TaskSplit, triple: Triple, rng: np.random.Generator,
                 max_attempts: int = 100) -> Triple:
    h, r, t = triple
    pool = split.candidates[r]
    for _ in range(max_attempts):
        cand = pool[rng.integers(len(pool))]
        if cand != t and not split.is_true(h, r, cand):
            return Triple(h, r, cand)
    valid = [c for c in pool if c != t and not split.is_true(h, r, c)]
    if not valid:
        raise SamplingError(f"relation {r}: no candidate tail yields a false triple for head {h}")
    return Triple(h, r, valid[rng.integers(len(valid))])


def sample_episode(split: TaskSplit, relation: int, K: int, query_size: int,
                   rng: np.random.Generator, negatives_per_positive: int = 1,
                   shuffle_support: bool = False) -> Episode:
    """Draw K support and up to ``query_size`` query triples plus tail-corrupted negatives.

    Support triples keep dataset order unless ``shuffle_support`` is set.
    Negatives are listed ``negatives_per_positive`` times per positive, in
    positive order.
    """
    triples = split.few_shot_relations[relation]
    if K < 1 or len(triples) < K + 1:
        raise EpisodeError(f"relation {relation} has {len(triples)} triples; need at least K+1={K + 1}")
    if len(split.candidates.get(relation, ())) < 2:
        raise EpisodeError(f"relation {relation} has fewer than 2 candidate tails")
    n_query = min(query_size, len(triples) - K)
    picked = rng.choice(len(triples), size=K + n_query, replace=False)
    support_idx = picked[:K] if shuffle_support else np.sort(picked[:K])
    support = [triples[i] for i in support_idx]
    query = [triples[i] for i in picked[K:]]
    s_neg = [corrupt_tail(split, tr, rng) for tr in support for _ in range(negatives_per_positive)]
    q_neg = [corrupt_tail(split, tr, rng) for tr in query for _ in range(negatives_per_positive)]
    return Episode(relation, support, query, s_neg, q_neg)


def classify_relation_category(relation: int, triples: Sequence[Triple], threshold: float = 1.5) -> str:
    """Return one of ``1-1``, ``1-N``, ``N-1``, ``N-N`` from tails-per-head / heads-per-tail."""
    if not triples:
        raise ValueError(f"cannot classify relation {relation}: no triples")
    heads = {t.head for t in triples}
    tails = {t.tail for t in triples}
    tph = len(triples) / len(heads)
    hpt = len(triples) / len(tails)
    many_tails, many_heads = tph >= threshold, hpt >= threshold
    if many_tails and many_heads:
        return "N-N"
    if many_tails:
        return "1-N"
    if many_heads:
        return "N-1"
    return "1-1"


# ---------------------------------------------------------------------------
# synthetic KG
# ---------------------------------------------------------------------------

def _partition_sizes(n: int) -> tuple[int, int, int]:
    if n == 1:
        return 1, 0, 0
    if n == 2:
        return 1, 0, 1
    n_test = max(1, round(0.2 * n))
    n_valid = max(1, round(0.1 * n))
    return n - n_test - n_valid, n_valid, n_test


def generate_synthetic_kg(n_entities: int = 200, n_background_relations: int = 20,
                          n_task_relations: int = 5, pattern_strength: float = 0.9,
                          rng: np.random.Generator | int = 0, *,
                          categories: Sequence[str] | None = None,
                          n_distractors: int = 50,
                          noise_degree: int = 6,
                          n_hubs: int = 12,
                          max_neighbors: int = 50,
                          K: int = 5) -> tuple[KnowledgeGraph, TaskSplit]:
    """Build a small KG whose task relations are planted on background neighbor patterns.

    Background relations are split into *pattern* relations and *noise*
    relations. Task relation ``r`` gets a head pattern ``(a_r, x_r)`` and a
    tail pattern ``(b_r, y_r)``: a pattern relation plus an anchor entity.
    Members of the head set carry the edge ``(h, a_r, x_r)``, members of the
    tail set carry ``(t, b_r, y_r)``, and the task triples are exactly the
    head set crossed with the tail set. Every entity also gets
    ``noise_degree`` edges into a small pool of hub entities over noise
    relations. With probability ``1 - pattern_strength`` an entity gains a
    distractor edge: a pattern relation pointing at a random non-anchor.

    ``categories`` optionally fixes the complexity class of each task
    relation (``1-N`` -> single head, ``N-1`` -> single tail, ...).
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if n_entities < 50:
        raise GenerationError("n_entities must be >= 50")
    if n_task_relations < 1:
        raise GenerationError("n_task_relations must be >= 1")
    if n_background_relations < 2:
        raise GenerationError("need at least 2 background relations (pattern + noise)")
    n_pattern = max(1, n_background_relations // 2)
    if not 0.0 <= pattern_strength <= 1.0:
        raise GenerationError("pattern_strength must lie in [0, 1]")
    if categories is not None and len(categories) != n_task_relations:
        raise GenerationError("categories must give one entry per task relation")

    pattern_rels = [f"rel{j}" for j in range(n_pattern)]
    noise_rels = [f"rel{j}" for j in range(n_pattern, n_background_relations)]
    entities = [f"e{i}" for i in range(n_entities)]
    task_names = [f"task{k}" for k in range(n_task_relations)]

    # anchors and hubs are reserved: they never join a head/tail set
    n_reserved = 2 * n_task_relations + n_hubs
    members_pool = n_entities - n_reserved
    if members_pool < 2 * (K + 1):
        raise GenerationError("too few entities for the requested anchors, hubs and pattern sets")
    order = rng.permutation(n_entities)
    anchors = order[: 2 * n_task_relations]
    hubs = order[2 * n_task_relations: n_reserved]
    ordinary = order[n_reserved:]

    background: list[tuple[int, str, int]] = []
    plans = []
    for k in range(n_task_relations):
        cat = categories[k] if categories is not None else "N-N"
        if cat not in CATEGORIES:
            raise GenerationError(f"unknown category {cat!r}")
        n_h = 1 if cat in ("1-1", "1-N") else int(rng.integers(8, 16))
        n_t = 1 if cat in ("1-1", "N-1") else int(rng.integers(8, 16))
        if cat == "1-1":
            raise GenerationError("1-1 relations cannot be planted as a pattern cross product")
        if n_h + n_t > len(ordinary) or n_h * n_t < K + 1:
            raise GenerationError(f"cannot place K+1={K + 1} triples for {task_names[k]} ({cat})")
        picked = rng.choice(ordinary, size=n_h + n_t, replace=False)
        heads, tails = sorted(picked[:n_h].tolist()), sorted(picked[n_h:].tolist())
        a_rel, b_rel = rng.choice(pattern_rels, size=2, replace=n_pattern < 2)
        x, y = int(anchors[2 * k]), int(anchors[2 * k + 1])
        background += [(h, str(a_rel), x) for h in heads]
        background += [(t, str(b_rel), y) for t in tails]
        plans.append((heads, tails))

    anchor_set = set(anchors.tolist())
    for e in ordinary.tolist() + anchors.tolist():
        for _ in range(noise_degree):
            background.append((e, str(rng.choice(noise_rels)), int(hubs[rng.integers(len(hubs))])))
        if rng.random() >= pattern_strength:
            target = int(rng.choice(ordinary))
            while target in anchor_set or target == e:
                target = int(rng.choice(ordinary))
            background.append((e, str(rng.choice(pattern_rels)), target))
    background = list(dict.fromkeys(background))

    named_bg = [(entities[h], r, entities[t]) for h, r, t in background]
    base_relations = pattern_rels + noise_rels
    graph = make_graph(entities, base_relations, task_names, named_bg, max_neighbors,
                       seed=int(rng.integers(2 ** 31)))
    rel_ids = graph.relation_ids

    few_shot, candidates = {}, {}
    known_tails: dict[tuple[int, int], set[int]] = defaultdict(set)
    for k, (heads, tails) in enumerate(plans):
        rid = rel_ids[task_names[k]]
        triples = [Triple(h, rid, t) for h in heads for t in tails]
        rng.shuffle(triples)
        few_shot[rid] = [Triple(*map(int, tr)) for tr in triples]
        tail_set = set(tails)
        others = np.array([e for e in ordinary.tolist() if e not in tail_set])
        distract = rng.choice(others, size=min(n_distractors, len(others)), replace=False)
        candidates[rid] = sorted(tail_set | set(distract.tolist()))
        for h, _, t in few_shot[rid]:
            known_tails[(h, rid)].add(t)

    n_train, n_valid, _ = _partition_sizes(n_task_relations)
    rids = [rel_ids[n] for n in task_names]
    split = TaskSplit(few_shot, rids[:n_train], rids[n_train:n_train + n_valid],
                      rids[n_train + n_valid:], candidates, dict(known_tails))
    _validate_synthetic(graph, split, K)
    return graph, split


def _validate_synthetic(graph: KnowledgeGraph, split: TaskSplit, K: int) -> None:
    bg = set(graph.background_triples)
    parts = [set(split.train_relations), set(split.valid_relations), set(split.test_relations)]
    if any(parts[i] & parts[j] for i in range(3) for j in range(i + 1, 3)):
        raise GenerationError("train/valid/test relation sets overlap")
    for rid, triples in split.few_shot_relations.items():
        if len(triples) < K + 1:
            raise GenerationError(f"relation {graph.relation_vocab[rid]} has only {len(triples)} triples")
        pool = set(split.candidates[rid])
        for tr in triples:
            if tr in bg:
                raise GenerationError("task triple leaked into the background graph")
            if tr.tail not in pool:
                raise GenerationError("task tail missing from candidate pool")
        if len(pool) < 50:
            raise GenerationError(f"candidate pool for {graph.relation_vocab[rid]} is smaller than 50")
