import os

import numpy as np
import pytest
from hypothesis import settings

from rungnn.kg import Vocabulary, augment, index_triples

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
UMLS_DIR = os.path.join(ROOT, "data", "umls")


def graph_from_names(named):
    arr, vocab = index_triples(named)
    return augment(arr, vocab), vocab


def random_graph(rng, num_entities, num_relations, num_triples):
    """Augmented graph over exactly ``num_entities`` entities (self loops allowed)."""
    vocab = Vocabulary([f"e{i}" for i in range(num_entities)], [f"r{i}" for i in range(num_relations)])
    base = np.stack([rng.integers(num_entities, size=num_triples),
                     rng.integers(num_relations, size=num_triples),
                     rng.integers(num_entities, size=num_triples)], axis=1)
    base = np.unique(base, axis=0) if len(base) else base.reshape(0, 3)
    return augment(base, vocab)


@pytest.fixture
def in_law_graph():
    """Toy in-law graph: the short r2,r1 path and the informative r1,r3 route both end at Mia."""
    named = [("Andrew", "r1", "Emma"), ("Emma", "r3", "Ethan"), ("Ethan", "r1", "Mia"),
             ("Andrew", "r2", "Liam"), ("Liam", "r1", "Mia"), ("Emma", "r2", "Noah")]
    return graph_from_names(named)


@pytest.fixture(scope="session")
def umls():
    from rungnn.kg import load_dataset
    if not os.path.isdir(UMLS_DIR):
        pytest.skip("UMLS files not present")
    return load_dataset(UMLS_DIR)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_record():
    return _ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
