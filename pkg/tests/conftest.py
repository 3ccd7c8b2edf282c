import numpy as np
import pytest

from chainrec.cli import random_instance
from chainrec.core import InteractionDataset, Rng

ACCEPTANCE_LINES = []


def record_acceptance(name: str, passed, detail: str = "") -> None:
    """``passed`` is True, False, or None for a criterion that could not run."""
    tag = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE_LINES.append(f"[{tag}] {name}" + (f": {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    return record_acceptance


@pytest.fixture
def make_instance():
    def make(seed=0, **kw):
        return random_instance(Rng(seed), **kw)

    return make


@pytest.fixture
def toy_dataset():
    # 4 users, 3 items, K=3; levels already closed
    view = [(0, 0), (1, 0), (2, 0), (3, 0), (0, 1), (1, 2)]
    cart = [(0, 0), (1, 0), (0, 1)]
    buy = [(0, 0)]
    return InteractionDataset.from_pairs(4, 3, [view, cart, buy])


def brute_transitions(ds):
    """Double loop over users and items."""
    K, U, V = ds.K, ds.num_users, ds.num_items
    sets = [set(map(tuple, ds.pairs(k).tolist())) for k in range(K)]
    p = np.zeros((K - 1, V))
    n = np.zeros((K - 1, V), dtype=int)
    for k in range(K - 1):
        for v in range(V):
            lo = both = 0
            for u in range(U):
                if (u, v) in sets[k]:
                    lo += 1
                    if (u, v) in sets[k + 1]:
                        both += 1
            n[k, v] = lo
            p[k, v] = both / lo if lo else 0.0
    return p, n


def naive_total_loss(params, ds, users, lam, w):
    """Triple loop over users, items and levels built on the per-pair reference scores."""
    from chainrec.model import chain_scores

    sets = [set(map(tuple, ds.pairs(k).tolist())) for k in range(ds.K)]
    total = 0.0
    for u in users:
        s = chain_scores(u, params)
        for k in range(ds.K):
            for v in range(ds.num_items):
                r = s[k, v]
                total += lam[k] * ((1 - r) ** 2 if (u, v) in sets[k] else w * r * r)
    M = params.M
    ld = 0.0
    for u in users:
        for m in range(M):
            for n in range(M):
                if m != n:
                    a, b = params.P[m, u], params.P[n, u]
                    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
                    ld += max(c, 0.0) ** 2
    if M > 1:
        total += ld / (len(users) * M * (M - 1))
    return total


def sort_scan_rank(scores, train_pos, item):
    """Build candidates, sort by (-score, index), scan for the item."""
    cand = [v for v in range(len(scores)) if v == item or v not in set(train_pos)]
    order = sorted(cand, key=lambda v: (-scores[v], v))
    return order.index(item) + 1, len(cand)
