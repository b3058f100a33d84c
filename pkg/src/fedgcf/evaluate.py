"""Top-K ranking evaluation: Recall@K and NDCG@K over held-out pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionDataset
from .errors import ConfigError


@dataclass
class EvalResult:
    """Per-user and macro-averaged ranking metrics at cutoff k.

    Macro averages run over users with a nonempty relevant set; everyone
    else is skipped, not counted as zero.
    """

    k: int
    per_user: dict[int, tuple[float, float]]
    recall: float
    ndcg: float


def _score_rows(user_vec: np.ndarray, item_views: np.ndarray, sim: str) -> np.ndarray:
    if sim == "inner":
        return item_views @ user_vec
    if sim != "cosine":
        raise ConfigError(f"unknown similarity {sim!r}")
    u_norm = float(np.linalg.norm(user_vec))
    i_norms = np.linalg.norm(item_views, axis=1)
    ok = (i_norms > 1e-12) & (u_norm > 1e-12)
    denom = np.where(ok, i_norms * max(u_norm, 1e-300), 1.0)
    return np.where(ok, item_views @ user_vec / denom, 0.0)


def rank_candidates(
    user_vec: np.ndarray,
    item_views: np.ndarray,
    train_items,
    k: int,
    sim: str = "cosine",
) -> np.ndarray:
    """Top-k candidate items for one user, excluding their train items.

    Ties in score break toward the smaller item id (stable sort on the
    negated scores). Returns fewer than k ids when fewer candidates exist.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    scores = _score_rows(user_vec, item_views, sim)
    mask = np.zeros(item_views.shape[0], dtype=bool)
    train_idx = np.asarray(sorted(train_items), dtype=np.int64)
    if train_idx.size:
        mask[train_idx] = True
    scores = np.where(mask, -np.inf, scores)
    order = np.argsort(-scores, kind="stable")
    order = order[~mask[order]]
    return order[:k].astype(np.int64)


def recall_at_k(ranked: np.ndarray, relevant: set[int]) -> float:
    """|ranked intersect relevant| / |relevant| (relevant must be nonempty)."""
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    hits = sum(1 for i in np.asarray(ranked).tolist() if i in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: np.ndarray, relevant: set[int], k: int) -> float:
    """Binary-gain NDCG with IDCG truncated at min(k, |relevant|)."""
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    dcg = 0.0
    for pos, item in enumerate(np.asarray(ranked).tolist(), start=1):
        if item in relevant:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = min(k, len(relevant))
    idcg = sum(1.0 / np.log2(p + 1) for p in range(1, ideal + 1))
    return dcg / idcg


def evaluate(
    user_views: np.ndarray,
    item_views: np.ndarray,
    ds: InteractionDataset,
    split: str = "test",
    k: int = 20,
    sim: str = "cosine",
) -> EvalResult:
    """Rank every user's non-train items and macro-average the metrics."""
    if split not in ("val", "test"):
        raise ConfigError(f"split must be val|test, got {split!r}")
    relevant_by_user = ds.pairs_by_user(ds.val if split == "val" else ds.test)
    train_by_user = ds.pairs_by_user(ds.train)
    per_user: dict[int, tuple[float, float]] = {}
    for u in sorted(relevant_by_user):
        relevant = set(relevant_by_user[u])
        if not relevant:
            continue
        ranked = rank_candidates(user_views[u], item_views, train_by_user.get(u, ()), k, sim)
        per_user[u] = (recall_at_k(ranked, relevant), ndcg_at_k(ranked, relevant, k))
    if per_user:
        recall = float(np.mean([m[0] for m in per_user.values()]))
        ndcg = float(np.mean([m[1] for m in per_user.values()]))
    else:
        recall = ndcg = 0.0
    return EvalResult(k=k, per_user=per_user, recall=recall, ndcg=ndcg)


def write_per_user_tsv(result: EvalResult, path: str) -> None:
    """Dump per-user metrics as user<TAB>recall<TAB>ndcg lines."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# k={result.k}\n")
        for u in sorted(result.per_user):
            r, n = result.per_user[u]
            fh.write(f"{u}\t{r:.6f}\t{n:.6f}\n")
