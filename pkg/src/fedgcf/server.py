"""Server-side state: contributed graph, global model, embedding exchange,
server training, local differential privacy, and FedAvg aggregation.

The server behaves like one more federation participant: its own training
step produces a parameter-delta upload that is merged with the device
uploads, weighted by batch size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .client import DeviceUpload, ReceivedViews, sample_negatives
from .data import SharePolicy, ShareTier
from .graph import BipartiteGraph, EmbeddingState, propagate_combine
from .learn import (
    AdamMoments,
    CLTerm,
    GradientBundle,
    HyperParams,
    LossParts,
    LossSpec,
    adam_step,
    compute_gradients,
)
from .seeds import child_rng

SERVER_ID = -1


@dataclass
class AuditLog:
    """Structured record of every upload and view distribution.

    Events are plain dicts so they serialize as line-delimited JSON; the
    privacy checks scan them for tier violations.
    """

    events: list[dict] = field(default_factory=list)

    def log_upload(self, round_idx: int, user: int, tier: ShareTier) -> None:
        self.events.append(
            {"event": "upload", "round": round_idx, "user": user, "tier": tier.value}
        )

    def log_distribution(self, round_idx: int, owner: int, tier: ShareTier, recipient: int) -> None:
        self.events.append(
            {
                "event": "distribute",
                "round": round_idx,
                "owner": owner,
                "tier": tier.value,
                "recipient": recipient,
            }
        )

    def log_distribution_summary(self, round_idx: int, owner: int, tier: ShareTier, count: int) -> None:
        self.events.append(
            {
                "event": "distribute_summary",
                "round": round_idx,
                "user": owner,
                "tier": tier.value,
                "distributed_to": count,
            }
        )

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event) + "\n")

    def violations(self, policy: SharePolicy) -> list[str]:
        """Tier violations present in the log (empty list means clean)."""
        problems = []
        for e in self.events:
            if e["event"] == "upload" and policy.category[e["user"]] is ShareTier.NONE:
                problems.append(f"round {e['round']}: NONE user {e['user']} uploaded a view")
            if e["event"] == "distribute":
                owner, recipient = e["owner"], e["recipient"]
                if policy.category[owner] is ShareTier.NONE:
                    problems.append(f"round {e['round']}: NONE user {owner} view distributed")
                if policy.category[owner] is ShareTier.PART and owner != recipient:
                    problems.append(
                        f"round {e['round']}: PART user {owner} view sent to device {recipient}"
                    )
        return problems


@dataclass
class UploadedView:
    vec: np.ndarray
    tier: ShareTier


@dataclass
class ServerState:
    """Global model plus everything the server accumulated."""

    model: EmbeddingState
    graph: BipartiteGraph
    shared_graph: BipartiteGraph
    moments: AdamMoments = field(default_factory=AdamMoments)
    uploaded: dict[int, UploadedView] = field(default_factory=dict)

    def absorb_uploads(self, uploads: list[DeviceUpload], policy: SharePolicy, round_idx: int, audit: AuditLog | None = None) -> None:
        """Refresh stored device views from this round's uploads."""
        for up in uploads:
            if up.user_view is None:
                continue
            tier = policy.category[up.device_id]
            if tier is ShareTier.NONE:
                raise ValueError(f"NONE user {up.device_id} attempted a view upload")
            self.uploaded[up.device_id] = UploadedView(up.user_view.copy(), tier)
            if audit is not None:
                audit.log_upload(round_idx, up.device_id, tier)


def build_server_graph(policy: SharePolicy, n_users: int, n_items: int) -> BipartiteGraph:
    """Union of every user's contributed pairs."""
    return BipartiteGraph(n_users, n_items, sorted(policy.shared_pairs()))


def server_infer(
    graph: BipartiteGraph, model: EmbeddingState, layers: int, alpha: np.ndarray | None = None
):
    """High-order propagated views of every node over ``graph``."""
    if alpha is None:
        alpha = np.full(layers + 1, 1.0 / (layers + 1))
    return propagate_combine(graph, model.user, model.item, np.asarray(alpha))


def embedding_exchange(
    policy: SharePolicy,
    uploaded: dict[int, UploadedView],
    selected: np.ndarray,
    user_views: np.ndarray,
    item_views: np.ndarray,
    local_items: dict[int, tuple[int, ...]],
    round_idx: int,
    audit: AuditLog | None = None,
) -> dict[int, ReceivedViews]:
    """Decide which server-side views each selected device receives.

    A selected contributor (PART or ALL) gets its own server-side user
    view, the server-side user views of every ALL-tier user that has
    uploaded at least once, and server-side item views for its local
    items. NONE devices and unselected devices receive nothing; PART
    views are never placed in another device's map.
    """
    all_sharers = sorted(
        u for u, view in uploaded.items() if view.tier is ShareTier.ALL
    )
    received: dict[int, ReceivedViews] = {}
    counts: dict[int, int] = {}
    for dev_id in sorted(int(d) for d in selected):
        tier = policy.category[dev_id]
        if tier is ShareTier.NONE:
            continue
        views = ReceivedViews()
        views.user_views[dev_id] = user_views[dev_id].copy()
        counts[dev_id] = counts.get(dev_id, 0) + 1
        if audit is not None:
            audit.log_distribution(round_idx, dev_id, tier, dev_id)
        for owner in all_sharers:
            if owner == dev_id:
                continue
            views.user_views[owner] = user_views[owner].copy()
            counts[owner] = counts.get(owner, 0) + 1
            if audit is not None:
                audit.log_distribution(round_idx, owner, ShareTier.ALL, dev_id)
        for item in local_items.get(dev_id, ()):
            views.item_views[int(item)] = item_views[int(item)].copy()
        received[dev_id] = views
    if audit is not None:
        for owner in sorted(counts):
            audit.log_distribution_summary(round_idx, owner, policy.category[owner], counts[owner])
    return received


def _first_order_item_views(
    shared_graph: BipartiteGraph, model: EmbeddingState
) -> np.ndarray:
    """Single-layer combined item views over the unmended contributed graph.

    These stand in for device-side item views in the server's contrastive
    term (devices upload only user views) and are treated as constants.
    """
    alpha = np.full(2, 0.5)
    _, item_views = propagate_combine(shared_graph, model.user, model.item, alpha)
    return item_views


def server_train(
    server: ServerState,
    hyper: HyperParams,
    round_idx: int,
    train_seed: int,
    disable_cl: bool = False,
) -> tuple[DeviceUpload | None, LossParts | None]:
    """One Adam step on a minibatch of contributed interactions.

    BPR positives come from the real contributed pairs; negatives avoid
    each user's mended adjacency. The contrastive term aligns the server's
    propagated views with uploaded device user views (and with detached
    first-order item views) for batch members. Returns the server's own
    delta upload, or None when there is no contributed data.
    """
    edges = server.shared_graph.edge_array()
    if edges.shape[0] == 0:
        return None, None
    rng_batch = child_rng(train_seed, "server_batch", round_idx)
    batch_size = min(hyper.server_batch, edges.shape[0])
    idx = np.sort(rng_batch.choice(edges.shape[0], size=batch_size, replace=False))
    batch = edges[idx]
    users = batch[:, 0]
    positives = batch[:, 1]

    negatives = np.zeros(batch_size, dtype=np.int64)
    rng_neg = child_rng(train_seed, "server_neg", round_idx)
    for u in np.unique(users):
        mask = users == u
        interacted = server.graph.user_neighbors(int(u))
        negatives[mask] = sample_negatives(
            interacted, int(mask.sum()), server.graph.n_items, rng_neg
        )

    cl_terms: list[CLTerm] = []
    cl_weight = 0.0 if disable_cl else hyper.cl_weight
    if cl_weight > 0.0:
        batch_uploaders = sorted(set(users.tolist()) & set(server.uploaded))
        if batch_uploaders:
            ids = np.asarray(batch_uploaders, dtype=np.int64)
            fixed = np.stack([server.uploaded[int(u)].vec for u in ids])
            cl_terms.append(
                CLTerm(
                    kind="user",
                    trainable="key",
                    rows=ids,
                    ids=ids,
                    fixed_ids=ids,
                    fixed_views=fixed,
                )
            )
        batch_items = np.unique(positives)
        batch_items = batch_items[server.shared_graph.item_deg[batch_items] > 0]
        if batch_items.size:
            first_order = _first_order_item_views(server.shared_graph, server.model)
            cl_terms.append(
                CLTerm(
                    kind="item",
                    trainable="key",
                    rows=batch_items,
                    ids=batch_items,
                    fixed_ids=batch_items,
                    fixed_views=first_order[batch_items],
                )
            )

    spec = LossSpec(
        graph=server.graph,
        alpha=hyper.alpha_server(),
        bpr_users=users,
        bpr_pos=positives,
        bpr_neg=negatives,
        cl_terms=cl_terms,
        tau=hyper.temperature,
        cl_weight=cl_weight,
        reg_lambda=hyper.reg_lambda,
        reg_user_rows=np.unique(users),
        reg_item_rows=np.unique(np.concatenate([positives, negatives])),
    )
    parts, grads = compute_gradients(spec, server.model)
    work = server.model.copy()
    adam_step(work, grads, server.moments, hyper)
    delta = GradientBundle()
    for row in sorted(grads.user):
        delta.user[row] = work.user[row] - server.model.user[row]
    for row in sorted(grads.item):
        delta.item[row] = work.item[row] - server.model.item[row]
    upload = DeviceUpload(device_id=SERVER_ID, weight=float(batch_size), delta=delta)
    return upload, parts


def apply_ldp(
    upload: DeviceUpload, clip: float, noise_scale: float, rng: np.random.Generator
) -> DeviceUpload:
    """Clip each delta row to L2 norm ``clip`` and add Laplace noise.

    ``clip`` of 0 disables clipping; ``noise_scale`` of 0 adds nothing and
    draws nothing, so a zero-noise run is bit-identical to a disabled one.
    Noise components are i.i.d. Laplace(0, noise_scale), variance
    2 * noise_scale^2 per component.
    """
    out = GradientBundle()
    for table_name, store in (("user", upload.delta.user), ("item", upload.delta.item)):
        target = out.user if table_name == "user" else out.item
        for row in sorted(store):
            vec = store[row].copy()
            if clip > 0.0:
                norm = float(np.linalg.norm(vec))
                if norm > clip:
                    vec *= clip / norm
            if noise_scale > 0.0:
                vec = vec + rng.laplace(0.0, noise_scale, size=vec.shape)
            target[row] = vec
    return DeviceUpload(
        device_id=upload.device_id,
        weight=upload.weight,
        delta=out,
        user_view=upload.user_view,
    )


def fedavg_aggregate(
    uploads: list[tuple[GradientBundle, float]], base: EmbeddingState
) -> EmbeddingState:
    """Per-row weighted average of deltas applied to the base model.

    new_row = base_row + sum_k w_k delta_k / sum_k w_k over the uploads
    that touch the row; untouched rows copy through, and rows whose total
    weight is zero stay unchanged. Uploads are merged in list order, which
    callers keep deterministic (server first, then ascending device id).
    """
    out = base.copy()
    acc: dict[str, dict[int, tuple[np.ndarray, float]]] = {"user": {}, "item": {}}
    for bundle, weight in uploads:
        for name, store in (("user", bundle.user), ("item", bundle.item)):
            slot = acc[name]
            for row in sorted(store):
                vec_sum, w_sum = slot.get(row, (np.zeros_like(store[row]), 0.0))
                slot[row] = (vec_sum + weight * store[row], w_sum + weight)
    for name, table in (("user", out.user), ("item", out.item)):
        for row in sorted(acc[name]):
            vec_sum, w_sum = acc[name][row]
            if w_sum > 0.0:
                table[row] = table[row] + vec_sum / w_sum
    return out
