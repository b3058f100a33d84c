"""Device-side state and local training.

A device owns its user embedding row, its private train pairs, and sparse
Adam moments. Each participation round it trains on its ego graph (itself
plus its local items), optionally aligns its views with received global
views through the contrastive term, and uploads parameter deltas plus its
combined local user view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ShareTier
from .graph import BipartiteGraph, EmbeddingState, ego_infer
from .learn import (
    AdamMoments,
    CLTerm,
    GradientBundle,
    HyperParams,
    LossParts,
    LossSpec,
    adam_update_rows,
    compute_gradients,
)
from .seeds import child_rng


@dataclass
class DeviceState:
    """Persistent per-device state across rounds."""

    user_id: int
    local_items: tuple[int, ...]
    p_u: np.ndarray
    moments: AdamMoments = field(default_factory=AdamMoments)


@dataclass
class ReceivedViews:
    """Global views handed to a device for contrastive alignment.

    ``user_views`` holds the device's own server-side view plus the views
    of full contributors; ``item_views`` holds server-side views of the
    device's local items.
    """

    user_views: dict[int, np.ndarray] = field(default_factory=dict)
    item_views: dict[int, np.ndarray] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.user_views and not self.item_views


@dataclass
class DeviceUpload:
    """What a participant sends back: per-row parameter deltas, the FedAvg
    weight (trained pair count), and the local user view (sharers only)."""

    device_id: int
    weight: float
    delta: GradientBundle
    user_view: np.ndarray | None = None


def sample_negatives(
    interacted: np.ndarray, k: int, n_items: int, rng: np.random.Generator
) -> np.ndarray:
    """k uniform items outside ``interacted``.

    Sampling is without replacement while the complement allows it; when k
    exceeds the complement size the draw falls back to replacement so the
    caller still gets k negatives.
    """
    interacted = np.asarray(interacted, dtype=np.int64)
    complement = np.setdiff1d(np.arange(n_items, dtype=np.int64), interacted, assume_unique=False)
    if complement.size == 0:
        raise ValueError("user interacted with every item; no negatives exist")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(complement, size=k, replace=k > complement.size)


def _build_cl_terms(
    dev: DeviceState,
    received: ReceivedViews | None,
    local_ids: np.ndarray,
    compact_of: dict[int, int],
) -> list[CLTerm]:
    terms: list[CLTerm] = []
    if received is None:
        return terms
    if received.user_views:
        if dev.user_id not in received.user_views:
            raise ValueError(f"device {dev.user_id} received views without its own positive")
        fixed_ids = np.asarray(sorted(received.user_views), dtype=np.int64)
        fixed = np.stack([received.user_views[int(k)] for k in fixed_ids])
        terms.append(
            CLTerm(
                kind="user",
                trainable="query",
                rows=np.array([0], dtype=np.int64),
                ids=np.array([dev.user_id], dtype=np.int64),
                fixed_ids=fixed_ids,
                fixed_views=fixed,
            )
        )
    cl_items = sorted(set(local_ids.tolist()) & set(received.item_views))
    if cl_items:
        fixed_ids = np.asarray(cl_items, dtype=np.int64)
        fixed = np.stack([received.item_views[int(k)] for k in fixed_ids])
        rows = np.array([compact_of[int(i)] for i in fixed_ids], dtype=np.int64)
        terms.append(
            CLTerm(
                kind="item",
                trainable="query",
                rows=rows,
                ids=fixed_ids,
                fixed_ids=fixed_ids,
                fixed_views=fixed,
            )
        )
    return terms


def client_local_train(
    dev: DeviceState,
    item_table: np.ndarray,
    tier: ShareTier,
    received: ReceivedViews | None,
    hyper: HyperParams,
    round_idx: int,
    train_seed: int,
) -> tuple[DeviceUpload, LossParts]:
    """Run the device's local epochs and produce its upload.

    The device never mutates the broadcast ``item_table``; it edits private
    copies of the touched rows and uploads the deltas. NONE-tier devices
    (and devices with no received views) train pure BPR; contributors add
    the contrastive term and attach their local user view to the upload.
    """
    n_items = item_table.shape[0]
    local = np.asarray(dev.local_items, dtype=np.int64)
    if tier is ShareTier.NONE:
        received = None
    p_start = dev.p_u.copy()
    work_rows: dict[int, np.ndarray] = {}
    loss_acc = LossParts()
    alpha = hyper.alpha_device()

    for epoch in range(hyper.local_epochs):
        if local.size:
            rng = child_rng(train_seed, "neg", round_idx, dev.user_id, epoch)
            negs = sample_negatives(local, local.size, n_items, rng)
        else:
            negs = np.zeros(0, dtype=np.int64)
        compact_ids = np.unique(np.concatenate([local, negs]))
        compact_of = {int(g): j for j, g in enumerate(compact_ids)}
        ego_edges = [(0, compact_of[int(i)]) for i in local]
        ego = BipartiteGraph(1, compact_ids.size, ego_edges)
        rows = np.stack(
            [work_rows.get(int(i), item_table[int(i)]) for i in compact_ids]
        ) if compact_ids.size else np.zeros((0, item_table.shape[1]))
        state = EmbeddingState(dev.p_u[None, :].copy(), rows)
        pos_c = np.array([compact_of[int(i)] for i in local], dtype=np.int64)
        neg_c = np.array([compact_of[int(i)] for i in negs], dtype=np.int64)
        cl_weight = hyper.cl_weight if received is not None and not received.is_empty() else 0.0
        spec = LossSpec(
            graph=ego,
            alpha=alpha,
            bpr_users=np.zeros(local.size, dtype=np.int64),
            bpr_pos=pos_c,
            bpr_neg=neg_c,
            cl_terms=_build_cl_terms(dev, received, local, compact_of) if cl_weight > 0.0 else [],
            tau=hyper.temperature,
            cl_weight=cl_weight,
            reg_lambda=hyper.reg_lambda,
            reg_user_rows=np.array([0], dtype=np.int64),
            reg_item_rows=np.unique(np.concatenate([pos_c, neg_c])),
        )
        parts, bundle = compute_gradients(spec, state)
        loss_acc.bpr += parts.bpr
        loss_acc.cl += parts.cl
        loss_acc.reg += parts.reg
        loss_acc.total += parts.total

        if 0 in bundle.user:
            dev.moments.t_user += 1
            deltas = adam_update_rows(
                {dev.user_id: bundle.user[0]},
                dev.moments.user,
                dev.moments.t_user,
                hyper,
            )
            dev.p_u += deltas[dev.user_id]
        if bundle.item:
            global_grads = {int(compact_ids[r]): g for r, g in bundle.item.items()}
            dev.moments.t_item += 1
            deltas = adam_update_rows(global_grads, dev.moments.item, dev.moments.t_item, hyper)
            for gid, delta in deltas.items():
                row = work_rows.get(gid)
                if row is None:
                    row = item_table[gid].copy()
                work_rows[gid] = row + delta

    epochs = float(hyper.local_epochs)
    loss_acc.bpr /= epochs
    loss_acc.cl /= epochs
    loss_acc.reg /= epochs
    loss_acc.total /= epochs

    delta = GradientBundle()
    if not np.array_equal(dev.p_u, p_start):
        delta.user[dev.user_id] = dev.p_u - p_start
    for gid in sorted(work_rows):
        delta.item[gid] = work_rows[gid] - item_table[gid]

    user_view = None
    if tier is not ShareTier.NONE:
        q_local = (
            np.stack([work_rows.get(int(i), item_table[int(i)]) for i in local])
            if local.size
            else np.zeros((0, item_table.shape[1]))
        )
        user_view, _ = ego_infer(dev.p_u, q_local, alpha)
    upload = DeviceUpload(
        device_id=dev.user_id,
        weight=float(local.size * hyper.local_epochs),
        delta=delta,
        user_view=user_view,
    )
    return upload, loss_acc
