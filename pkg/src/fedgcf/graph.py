"""Bipartite interaction graph and light graph convolution.

The graph is stored as two CSR-style adjacency lists (user side and item
side) with sorted neighbor arrays. Propagation sums neighbor embeddings
in stored neighbor order, so repeated runs are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError


@dataclass
class EmbeddingState:
    """Layer-0 user and item embedding tables (float64, row per node)."""

    user: np.ndarray
    item: np.ndarray

    def __post_init__(self):
        if self.user.ndim != 2 or self.item.ndim != 2 or self.user.shape[1] != self.item.shape[1]:
            raise ValueError(
                f"embedding tables must be 2-d with equal width, got {self.user.shape} / {self.item.shape}"
            )

    @property
    def dim(self) -> int:
        return self.user.shape[1]

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(self.user.copy(), self.item.copy())

    def check_finite(self) -> None:
        for name, table in (("user", self.user), ("item", self.item)):
            bad = np.nonzero(~np.isfinite(table).all(axis=1))[0]
            if bad.size:
                raise NumericError(f"non-finite {name} embedding row {int(bad[0])}")


class BipartiteGraph:
    """Undirected user-item graph in compressed adjacency form."""

    __slots__ = (
        "n_users",
        "n_items",
        "user_ptr",
        "user_adj",
        "item_ptr",
        "item_adj",
        "user_deg",
        "item_deg",
        "user_inv_sqrt",
        "item_inv_sqrt",
    )

    def __init__(self, n_users: int, n_items: int, pairs) -> None:
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        arr = np.asarray(sorted(set(map(tuple, pairs))), dtype=np.int64)
        if arr.size == 0:
            arr = arr.reshape(0, 2)
        if arr.size:
            if arr[:, 0].min() < 0 or arr[:, 0].max() >= n_users:
                raise IndexError("user id out of range in edge list")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= n_items:
                raise IndexError("item id out of range in edge list")
        self.user_deg = np.bincount(arr[:, 0], minlength=n_users).astype(np.int64)
        self.item_deg = np.bincount(arr[:, 1], minlength=n_items).astype(np.int64)
        self.user_ptr = np.concatenate(([0], np.cumsum(self.user_deg)))
        self.item_ptr = np.concatenate(([0], np.cumsum(self.item_deg)))
        # arr is sorted by (user, item) so this is the user-side CSR directly
        self.user_adj = arr[:, 1].copy()
        order = np.lexsort((arr[:, 0], arr[:, 1]))
        self.item_adj = arr[order, 0].copy()
        with np.errstate(divide="ignore"):
            self.user_inv_sqrt = np.where(self.user_deg > 0, 1.0 / np.sqrt(self.user_deg), 0.0)
            self.item_inv_sqrt = np.where(self.item_deg > 0, 1.0 / np.sqrt(self.item_deg), 0.0)

    @property
    def edge_count(self) -> int:
        return int(self.user_adj.shape[0])

    def user_neighbors(self, u: int) -> np.ndarray:
        return self.user_adj[self.user_ptr[u] : self.user_ptr[u + 1]]

    def item_neighbors(self, i: int) -> np.ndarray:
        return self.item_adj[self.item_ptr[i] : self.item_ptr[i + 1]]

    def has_edge(self, u: int, i: int) -> bool:
        row = self.user_neighbors(u)
        pos = np.searchsorted(row, i)
        return pos < row.shape[0] and row[pos] == i

    def edge_array(self) -> np.ndarray:
        """Edges as an (E,2) array sorted by (user, item)."""
        users = np.repeat(np.arange(self.n_users), self.user_deg)
        return np.stack([users, self.user_adj], axis=1)

    def edges(self):
        for u, i in self.edge_array():
            yield int(u), int(i)


def build_graph(pairs, n_users: int, n_items: int) -> BipartiteGraph:
    """Build the graph from an iterable of (user, item) pairs."""
    return BipartiteGraph(n_users, n_items, pairs)


def _segment_rows(values: np.ndarray, ptr: np.ndarray, n_out: int) -> np.ndarray:
    """Sum consecutive row groups of ``values`` delimited by CSR ``ptr``.

    np.add.reduceat mishandles empty segments, so sums are taken only at
    nonempty starts; the gaps between consecutive nonempty starts contain
    exactly one segment's rows because empty segments contribute nothing.
    """
    out = np.zeros((n_out, values.shape[1]), dtype=np.float64)
    if values.shape[0] == 0:
        return out
    counts = np.diff(ptr)
    nonempty = counts > 0
    starts = ptr[:-1][nonempty]
    out[nonempty] = np.add.reduceat(values, starts, axis=0)
    return out


def propagate_once(g: BipartiteGraph, user_emb: np.ndarray, item_emb: np.ndarray):
    """One symmetric-normalized propagation step.

    new_user[u] = sum over i in N(u) of item_emb[i] / sqrt(|N(u)| |N(i)|),
    and symmetrically for items; isolated nodes map to zero. Both outputs
    read the pre-step inputs.
    """
    vals = item_emb[g.user_adj] * g.item_inv_sqrt[g.user_adj, None]
    new_user = _segment_rows(vals, g.user_ptr, g.n_users) * g.user_inv_sqrt[:, None]
    vals = user_emb[g.item_adj] * g.user_inv_sqrt[g.item_adj, None]
    new_item = _segment_rows(vals, g.item_ptr, g.n_items) * g.item_inv_sqrt[:, None]
    return new_user, new_item


def lgc_propagate(g: BipartiteGraph, e0: EmbeddingState, layers: int) -> list[EmbeddingState]:
    """Propagate ``layers`` steps; returns layer 0 through layer ``layers``."""
    if layers < 0:
        raise ValueError(f"layers must be >= 0, got {layers}")
    if e0.user.shape[0] != g.n_users or e0.item.shape[0] != g.n_items:
        raise ValueError("embedding table rows do not match graph node counts")
    out = [e0.copy()]
    cur_u, cur_i = e0.user, e0.item
    for _ in range(layers):
        cur_u, cur_i = propagate_once(g, cur_u, cur_i)
        out.append(EmbeddingState(cur_u.copy(), cur_i.copy()))
    return out


def default_alpha(layers: int) -> np.ndarray:
    """Uniform layer-combination weights 1/(layers+1)."""
    if layers < 0:
        raise ValueError(f"layers must be >= 0, got {layers}")
    return np.full(layers + 1, 1.0 / (layers + 1))


def layer_combine(states: list[EmbeddingState], alpha: np.ndarray) -> EmbeddingState:
    """Weighted sum of per-layer embeddings: e = sum_l alpha_l e^(l)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(states) != alpha.shape[0]:
        raise ValueError(f"{len(states)} layers but {alpha.shape[0]} weights")
    user = sum(a * s.user for a, s in zip(alpha, states))
    item = sum(a * s.item for a, s in zip(alpha, states))
    return EmbeddingState(user, item)


def propagate_combine(g: BipartiteGraph, user0: np.ndarray, item0: np.ndarray, alpha: np.ndarray):
    """Fused propagate + combine on raw tables; returns final (U, I) views.

    Because the symmetric-normalized operator is self-adjoint, this same
    function also maps final-view gradients back to layer-0 gradients.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    acc_u = alpha[0] * user0
    acc_i = alpha[0] * item0
    cur_u, cur_i = user0, item0
    for a in alpha[1:]:
        cur_u, cur_i = propagate_once(g, cur_u, cur_i)
        acc_u = acc_u + a * cur_u
        acc_i = acc_i + a * cur_i
    return acc_u, acc_i


def ego_infer(p_u: np.ndarray, q_local: np.ndarray, alpha: np.ndarray):
    """Device-side inference on the user's ego graph (one layer).

    On the ego graph the user's degree is the local item count k and every
    item's degree is 1, so e_u = a0 p_u + a1 sum_i q_i / sqrt(k) and
    e_i = a0 q_i + a1 p_u / sqrt(k). With no local items the propagated
    part vanishes and e_u = a0 p_u.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[0] != 2:
        raise ValueError("ego inference is single-layer; alpha must have 2 entries")
    q_local = np.asarray(q_local, dtype=np.float64)
    if q_local.ndim != 2:
        q_local = q_local.reshape(0, p_u.shape[0])
    k = q_local.shape[0]
    if k == 0:
        return alpha[0] * p_u, np.zeros((0, p_u.shape[0]))
    s = 1.0 / np.sqrt(k)
    e_u = alpha[0] * p_u + alpha[1] * (q_local.sum(axis=0) * s)
    e_items = alpha[0] * q_local + alpha[1] * (p_u[None, :] * s)
    return e_u, e_items


def xavier_init(n_users: int, n_items: int, dim: int, rng: np.random.Generator) -> EmbeddingState:
    """Xavier-uniform tables: limit sqrt(6/(rows+dim)) per table."""
    lim_u = np.sqrt(6.0 / (n_users + dim))
    lim_i = np.sqrt(6.0 / (n_items + dim))
    return EmbeddingState(
        rng.uniform(-lim_u, lim_u, size=(n_users, dim)),
        rng.uniform(-lim_i, lim_i, size=(n_items, dim)),
    )


def write_edges_tsv(g: BipartiteGraph, path: str) -> None:
    """Dump edges as user<TAB>item lines (debugging aid)."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in g.edge_array():
            fh.write(f"{u}\t{i}\n")
