"""Concept discrimination: one-to-one matching of token groups to concepts.

Group representations and concept embeddings are compared by cosine
distance, matched with the Hungarian algorithm, and the matched pairs are
trained with a bidirectional contrastive loss (VSC) and a binary
matched/unmatched classifier loss (VSM).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError
from .tensor import Graph, Tensor

DEFAULT_TAU = 0.07
BRUTE_FORCE_MAX_SIDE = 8
BRUTE_FORCE_MAX_CASES = 5_000_000


@dataclass(frozen=True)
class Assignment:
    """Matched (group, concept) pairs sorted by group index."""

    pairs: tuple[tuple[int, int], ...]
    cost: float

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def groups(self) -> list[int]:
        return [i for i, _ in self.pairs]

    @property
    def concepts(self) -> list[int]:
        return [j for _, j in self.pairs]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with zero norm compare as 0."""
    def unit(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.where(n < 1e-9, 0.0, x / np.where(n < 1e-9, 1.0, n))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"width mismatch {a.shape} vs {b.shape}")
    return np.clip(unit(a) @ unit(b).T, -1.0, 1.0)


def cost_matrix(group_reps, concept_embeddings) -> np.ndarray:
    """(N_g, M) cosine distances 1 - cos."""
    return 1.0 - cosine_matrix(_values(group_reps), _values(concept_embeddings))


def _values(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def assignment_cost(cost: np.ndarray, pairs) -> float:
    return math.fsum(float(cost[i, j]) for i, j in pairs)


def _tie_tol(cost: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(cost)))) if cost.size else 1.0
    return 1e-11 * scale * max(cost.shape)


# ---- Hungarian ---------------------------------------------------------------


def _solve_square(a: np.ndarray):
    """Shortest augmenting path Hungarian method on a square matrix.

    Returns (row -> col assignment, row potentials u, col potentials v) with
    a[i, j] - u[i] - v[j] >= 0 and equality on the assignment.
    """
    n = a.shape[0]
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)     # p[j] = row matched to column j (1-based)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _has_perfect_matching(adj: list[list[int]], rows: list[int], cols_free: set[int]) -> bool:
    match: dict[int, int] = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in cols_free and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian_assign(cost) -> Assignment:
    """Minimum-cost injection of the smaller side into the larger one.

    Among optimal assignments the lexicographically smallest pair list is
    returned: the problem is padded to a square, solved once for optimal
    dual potentials, and the answer is built greedily row by row using only
    tight edges while keeping a perfect tight matching possible.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError("cost matrix must be 2-D")
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return Assignment((), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    n = max(rows, cols)
    padded = np.zeros((n, n))
    padded[:rows, :cols] = cost
    row_to_col, u, v = _solve_square(padded)

    reduced = padded - u[:, None] - v[None, :]
    tight = reduced <= _tie_tol(cost)
    tight[np.arange(n), row_to_col] = True
    adj = [list(np.flatnonzero(tight[r])) for r in range(n)]

    chosen: list[tuple[int, int]] = []
    free_cols = set(range(n))
    for r in range(n):
        if r < rows:
            real = [c for c in adj[r] if c < cols]
            dummy = [c for c in adj[r] if c >= cols]
            candidates = sorted(real) + sorted(dummy)
        else:
            candidates = sorted(adj[r])
        for c in candidates:
            if c not in free_cols:
                continue
            free_cols.discard(c)
            if _has_perfect_matching(adj, list(range(r + 1, n)), free_cols):
                if r < rows and c < cols:
                    chosen.append((r, c))
                break
            free_cols.add(c)
        else:  # pragma: no cover - tight graph always admits the solver's matching
            raise RuntimeError("tight-edge reconstruction failed")
    pairs = tuple(chosen)
    return Assignment(pairs, assignment_cost(cost, pairs))


# ---- brute force oracle ------------------------------------------------------


@lru_cache(maxsize=64)
def _injections(large: int, small: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(large), small)), dtype=int).reshape(-1, small)


def brute_force_assign(cost) -> Assignment:
    """Exhaustive search over all injections, same tie-break as :func:`hungarian_assign`."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return Assignment((), 0.0)
    small, large = min(rows, cols), max(rows, cols)
    if small > BRUTE_FORCE_MAX_SIDE:
        raise ContractError(f"brute force limited to min side <= {BRUTE_FORCE_MAX_SIDE}, got {small}")
    if math.perm(large, small) > BRUTE_FORCE_MAX_CASES:
        raise ContractError(f"{math.perm(large, small)} injections exceed the enumeration budget")
    perms = _injections(large, small)
    oriented = cost if rows <= cols else cost.T
    totals = oriented[np.arange(small), perms].sum(axis=1)
    best = totals.min()
    candidates = np.flatnonzero(totals <= best + _tie_tol(cost))

    def pair_list(k):
        perm = perms[k]
        if rows <= cols:
            return tuple((i, int(perm[i])) for i in range(small))
        return tuple(sorted((int(perm[c]), c) for c in range(small)))

    pairs = min(pair_list(k) for k in candidates)
    return Assignment(pairs, assignment_cost(cost, pairs))


# ---- losses --------------------------------------------------------------------


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    return Graph()


def contrastive_diag(graph: Graph, anchors: Tensor, targets: Tensor, tau: float) -> Tensor:
    """-sum_i log softmax_j(cos(anchor_i, target_j)/tau)[i], rows ordered as pairs."""
    logits = graph.matmul(graph.l2_normalize(anchors), graph.l2_normalize(targets).T) * (1.0 / tau)
    eye = np.eye(anchors.shape[0])
    return -graph.sum(graph.mul(graph.log_softmax(logits), eye))


def vsc_loss(group_reps, concept_embeddings, assignment: Assignment,
             tau: float = DEFAULT_TAU) -> tuple[Tensor, bool]:
    """Bidirectional contrastive loss over matched pairs only.

    Negatives for a group are the other matched concepts and vice versa.
    Returns ``(loss, skipped)``; an empty assignment gives a zero constant.
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    graph = _graph_of(group_reps, concept_embeddings)
    if len(assignment) == 0:
        return graph.constant(0.0), True
    v = graph.take_rows(group_reps, assignment.groups)
    t = graph.take_rows(concept_embeddings, assignment.concepts)
    return contrastive_diag(graph, v, t, tau) + contrastive_diag(graph, t, v, tau), False


def init_vsm_predictor(width: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Two-layer perceptron [v, t] (2c) -> 2c -> 1 logit."""
    d = 2 * width
    return {
        "w1": rng.standard_normal((d, d)) / math.sqrt(d),
        "b1": np.zeros(d),
        "w2": rng.standard_normal((d, 1)) / math.sqrt(d),
        "b2": np.zeros(1),
    }


def vsm_logits(graph: Graph, v: Tensor, t: Tensor, predictor) -> Tensor:
    """Logits for every (v row, t row) pair, row-major over the grid."""
    k = v.shape[0]
    rep_v = np.kron(np.eye(k), np.ones((t.shape[0], 1)))   # row a*K+b -> v[a]
    rep_t = np.kron(np.ones((k, 1)), np.eye(t.shape[0]))   # row a*K+b -> t[b]
    pairs = graph.concat([graph.matmul(rep_v, v), graph.matmul(rep_t, t)], axis=-1)
    p = {name: graph._as_tensor(val) for name, val in predictor.items()}
    hidden = graph.gelu(graph.affine(pairs, p["w1"], p["b1"]))
    return graph.affine(hidden, p["w2"], p["b2"])


def bce_with_logits_mean(graph: Graph, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of softplus(z) - y*z, i.e. sigmoid binary cross-entropy."""
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    return graph.mean(graph.softplus(logits) - graph.mul(logits, labels))


def vsm_loss(group_reps, concept_embeddings, assignment: Assignment,
             predictor) -> tuple[Tensor, bool]:
    """Matched/unmatched classification over the full matched grid.

    Grid cell (a, b) pairs the a-th matched group with the b-th matched
    concept; it is positive exactly when a == b.
    """
    graph = _graph_of(group_reps, concept_embeddings, *predictor.values())
    if len(assignment) == 0:
        return graph.constant(0.0), True
    v = graph.take_rows(group_reps, assignment.groups)
    t = graph.take_rows(concept_embeddings, assignment.concepts)
    logits = vsm_logits(graph, v, t, predictor)
    labels = np.eye(len(assignment)).reshape(-1, 1)
    return bce_with_logits_mean(graph, logits, labels), False
