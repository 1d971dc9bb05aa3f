import json

import numpy as np
import pytest
import torch

from gana_fkgc.config import TrainConfig
from gana_fkgc.kg_data import EmbeddingTable, generate_synthetic_kg, sample_episode
from gana_fkgc.model import GANAModel

torch.set_num_threads(1)


def write_toy_dataset(root, background="a\tr1\tb\nc\tr2\ta\n", tasks=None):
    """3 entities, 2 background triples, one task relation ``t`` with two triples."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "path_graph").write_text(background, encoding="utf-8")
    tasks = tasks if tasks is not None else {"train": {"t": [["a", "t", "b"], ["c", "t", "b"]]},
                                             "dev": {}, "test": {}}
    for part, content in tasks.items():
        (root / f"{part}_tasks.json").write_text(json.dumps(content))
    (root / "rel2candidates.json").write_text(json.dumps({"t": ["a", "b", "c"]}))
    (root / "e1rel_e2.json").write_text(json.dumps({"a\tt": ["b"], "c\tt": ["b"]}))
    return root


@pytest.fixture
def toy_dir(tmp_path):
    return write_toy_dataset(tmp_path / "toy")


@pytest.fixture(scope="session")
def tiny_kg():
    """Small planted KG with at most 4 neighbors per entity."""
    return generate_synthetic_kg(80, 6, 3, 0.9, np.random.default_rng(7), noise_degree=2,
                                 n_hubs=6, max_neighbors=4, K=3)


def random_embeddings(graph, d, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(rng.normal(scale=0.5, size=(graph.num_entities, d)),
                          rng.normal(scale=0.5, size=(graph.num_relations, d)))


@pytest.fixture(scope="session")
def tiny_setup(tiny_kg):
    graph, split = tiny_kg
    cfg = TrainConfig(d=6, K=3, query_size=2, batch_tasks=2, l_r=0.05, l_p=0.05, max_neighbors=4)
    emb = random_embeddings(graph, 6, seed=3)
    return graph, split, cfg, emb


def tiny_episodes(split, cfg, n=2, seed=11):
    rng = np.random.default_rng(seed)
    rels = split.train_relations
    return [sample_episode(split, rels[i % len(rels)], cfg.K, cfg.queries_per_episode, rng) for i in range(n)]


def make_model(graph, emb, cfg, seed=5):
    return GANAModel(graph, emb, cfg, np.random.default_rng(seed))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
