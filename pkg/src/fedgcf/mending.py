"""Graph mending: impair the contributed graph, train link embeddings on
the impaired version, and predict missing links above a cosine threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import BipartiteGraph, EmbeddingState, propagate_combine, xavier_init
from .learn import AdamMoments, HyperParams, LossSpec, adam_step, compute_gradients
from .seeds import child_rng


@dataclass
class MendingArtifacts:
    """Everything the mending stage produced, kept for inspection."""

    impaired: BipartiteGraph
    removed: tuple[tuple[int, int], ...]
    mender: EmbeddingState
    losses: list[float]
    predicted: tuple[tuple[int, int], ...]
    scores: dict[tuple[int, int], float]
    mended: BipartiteGraph


def impair_graph(g: BipartiteGraph, fraction: float, seed=0):
    """Remove floor(fraction * E) random edges without isolating nodes.

    Edges are visited in a seeded random permutation; an edge is skipped
    when either endpoint currently has degree 1, so every node that had an
    edge keeps one. Fewer edges than requested may be removed when the
    guard leaves no alternatives.
    """
    if not (0.0 <= fraction < 1.0):
        raise ValueError(f"impair fraction must be in [0,1), got {fraction}")
    if g.edge_count == 0:
        raise ValueError("cannot impair a graph with no edges")
    target = int(np.floor(fraction * g.edge_count))
    edges = g.edge_array()
    rng = np.random.default_rng(seed)
    order = rng.permutation(g.edge_count)
    u_deg = g.user_deg.copy()
    i_deg = g.item_deg.copy()
    removed: list[tuple[int, int]] = []
    removed_mask = np.zeros(g.edge_count, dtype=bool)
    for idx in order:
        if len(removed) >= target:
            break
        u, i = int(edges[idx, 0]), int(edges[idx, 1])
        if u_deg[u] <= 1 or i_deg[i] <= 1:
            continue
        u_deg[u] -= 1
        i_deg[i] -= 1
        removed_mask[idx] = True
        removed.append((u, i))
    kept = edges[~removed_mask]
    impaired = BipartiteGraph(g.n_users, g.n_items, kept)
    return impaired, tuple(sorted(removed))


def _sample_negative_links(
    g_full: BipartiteGraph, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform non-edges of ``g_full`` among nonzero-degree endpoints, 1 per
    positive. Rejection sampling; falls back to a full scan when the graph
    is too dense for rejection to finish quickly."""
    users = np.nonzero(g_full.user_deg > 0)[0]
    items = np.nonzero(g_full.item_deg > 0)[0]
    total_cells = users.size * items.size
    if total_cells == 0 or total_cells <= g_full.edge_count:
        return np.zeros((0, 2), dtype=np.int64)
    out: list[tuple[int, int]] = []
    attempts = 0
    max_attempts = 50 * max(count, 1)
    while len(out) < count and attempts < max_attempts:
        u = int(users[rng.integers(users.size)])
        i = int(items[rng.integers(items.size)])
        attempts += 1
        if not g_full.has_edge(u, i):
            out.append((u, i))
    while len(out) < count:
        # dense fallback: enumerate all non-edges once and sample
        candidates = []
        for u in users:
            row = set(g_full.user_neighbors(int(u)).tolist())
            for i in items:
                if int(i) not in row:
                    candidates.append((int(u), int(i)))
        idx = rng.choice(len(candidates), size=count - len(out), replace=len(candidates) < count - len(out))
        out.extend(candidates[j] for j in np.atleast_1d(idx))
        break
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def train_mender(
    impaired: BipartiteGraph,
    removed: tuple[tuple[int, int], ...],
    g_full: BipartiteGraph,
    hyper: HyperParams,
    seed=0,
):
    """Fit fresh embeddings so removed links score near 1 and sampled
    non-links near 0.

    Views come from ``layers_server`` propagation over the impaired graph.
    Each epoch resamples one negative non-edge (of the unimpaired graph)
    per removed link and takes one Adam step on the absolute-residual
    loss. Returns the trained state and the per-epoch losses.
    """
    rng_init = child_rng(seed, "mend_init")
    state = xavier_init(impaired.n_users, impaired.n_items, hyper.dim, rng_init)
    moments = AdamMoments()
    positives = np.asarray(sorted(removed), dtype=np.int64).reshape(-1, 2)
    losses: list[float] = []
    alpha = hyper.alpha_server()
    for epoch in range(hyper.mend_epochs):
        rng = child_rng(seed, "mend_neg", epoch)
        negatives = _sample_negative_links(g_full, positives.shape[0], rng)
        spec = LossSpec(
            graph=impaired,
            alpha=alpha,
            link_positives=positives,
            link_negatives=negatives,
        )
        parts, grads = compute_gradients(spec, state)
        losses.append(parts.total)
        adam_step(state, grads, moments, hyper)
    return state, losses


def predict_links(
    g: BipartiteGraph,
    mender: EmbeddingState,
    threshold: float,
    cap_per_user: int | None = 50,
    layers: int | None = None,
    alpha: np.ndarray | None = None,
):
    """Score non-edges of ``g`` by mended-view cosine and keep those >= t.

    Views are the mender embeddings propagated over ``g`` itself (callers
    pass the impaired graph to measure recovery, or the full contributed
    graph in the production pipeline). Only endpoints with nonzero degree
    are candidates. Per user, at most ``cap_per_user`` predictions survive,
    best score first, ties broken by ascending item id.

    Returns (pairs, scores) with pairs sorted by (user, item).
    """
    if alpha is None:
        layers = 3 if layers is None else layers
        alpha = np.full(layers + 1, 1.0 / (layers + 1))
    z_u, z_i = propagate_combine(g, mender.user, mender.item, np.asarray(alpha))
    users = np.nonzero(g.user_deg > 0)[0]
    items = np.nonzero(g.item_deg > 0)[0]
    if users.size == 0 or items.size == 0:
        return (), {}
    norms_u = np.linalg.norm(z_u[users], axis=1)
    norms_i = np.linalg.norm(z_i[items], axis=1)
    safe_u = np.where(norms_u > 1e-12, norms_u, 1.0)
    safe_i = np.where(norms_i > 1e-12, norms_i, 1.0)
    unit_u = np.where((norms_u > 1e-12)[:, None], z_u[users] / safe_u[:, None], 0.0)
    unit_i = np.where((norms_i > 1e-12)[:, None], z_i[items] / safe_i[:, None], 0.0)
    sims = unit_u @ unit_i.T
    predicted: list[tuple[int, int]] = []
    scores: dict[tuple[int, int], float] = {}
    for row, u in enumerate(users):
        existing = g.user_neighbors(int(u))
        mask = np.isin(items, existing)
        cand_scores = sims[row]
        hits = np.nonzero((cand_scores >= threshold) & ~mask)[0]
        if hits.size == 0:
            continue
        if cap_per_user is not None and hits.size > cap_per_user:
            order = np.lexsort((items[hits], -cand_scores[hits]))
            hits = hits[order[:cap_per_user]]
        for j in hits:
            pair = (int(u), int(items[j]))
            predicted.append(pair)
            scores[pair] = float(cand_scores[j])
    predicted.sort()
    return tuple(predicted), scores


def mend_graph(g: BipartiteGraph, hyper: HyperParams, seed=0) -> MendingArtifacts:
    """Full mending pipeline over the contributed graph ``g``.

    Impair, train the mender on the impaired graph, then predict missing
    links for ``g`` itself; the mended graph is ``g`` plus the predictions.
    """
    rng = child_rng(seed, "impair")
    impaired, removed = impair_graph(g, hyper.impair_fraction, rng)
    mender, losses = train_mender(impaired, removed, g, hyper, seed)
    predicted, scores = predict_links(
        g, mender, hyper.mend_threshold, hyper.mend_cap_per_user, alpha=hyper.alpha_server()
    )
    mended_edges = np.concatenate([g.edge_array(), np.asarray(predicted, dtype=np.int64).reshape(-1, 2)])
    mended = BipartiteGraph(g.n_users, g.n_items, mended_edges)
    return MendingArtifacts(
        impaired=impaired,
        removed=removed,
        mender=mender,
        losses=losses,
        predicted=predicted,
        scores=scores,
        mended=mended,
    )


def write_predictions_tsv(predicted, scores, path: str) -> None:
    """Dump predicted links as user<TAB>item<TAB>score lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in predicted:
            fh.write(f"{u}\t{i}\t{scores[(u, i)]:.6f}\n")
