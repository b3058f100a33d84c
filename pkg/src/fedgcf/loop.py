"""Round orchestration: client selection, one federation round, and the
full training run with periodic evaluation and early stopping.
"""

from __future__ import annotations

import pickle
import time
from dataclasses import dataclass, field

import numpy as np

from .client import DeviceState, DeviceUpload, client_local_train
from .data import InteractionDataset, SharePolicy, ShareTier, assign_share_policy, attach_contributions
from .evaluate import EvalResult, evaluate
from .graph import BipartiteGraph, EmbeddingState, ego_infer, xavier_init
from .learn import AdamMoments, HyperParams, LossParts
from .mending import MendingArtifacts, mend_graph
from .seeds import child_rng
from .server import AuditLog, ServerState, apply_ldp, build_server_graph, embedding_exchange, fedavg_aggregate, server_infer, server_train


@dataclass
class RoundReport:
    """Per-round accounting. Wall time is excluded from equality so two
    deterministic runs compare equal."""

    round_idx: int
    participants: tuple[int, ...]
    mean_bpr_loss: float
    mean_cl_loss: float
    participant_loss_sum: float
    server_loss: float
    total_loss: float
    wall_time: float = field(compare=False, default=0.0)


@dataclass
class RunContext:
    """Everything a run needs, prepared once before the round loop."""

    ds: InteractionDataset
    policy: SharePolicy
    hyper: HyperParams
    devices: dict[int, DeviceState]
    server: ServerState
    audit: AuditLog
    artifacts: MendingArtifacts | None
    train_seed: int
    server_only: bool = False
    disable_cl: bool = False
    sync_all_users: bool = False
    ldp_enabled: bool = False


@dataclass
class RunResult:
    context: RunContext
    reports: list[RoundReport]
    evals: list[dict]
    best_val_recall: float
    stopped_early: bool
    rounds_run: int


def select_clients(n_users: int, n: int, round_idx: int, seed: int) -> np.ndarray:
    """Uniform sample of min(n, n_users) distinct users, ascending ids.

    Deterministic in (seed, round): re-running a round reselects the same
    participants regardless of what happened in other rounds.
    """
    size = min(n, n_users)
    if size <= 0:
        return np.zeros(0, dtype=np.int64)
    rng = child_rng(seed, "select", round_idx)
    return np.sort(rng.choice(n_users, size=size, replace=False)).astype(np.int64)


def _resolved_hyper(hyper: HyperParams, disable_cl: bool) -> HyperParams:
    if not disable_cl:
        return hyper
    resolved = HyperParams(**vars(hyper))
    resolved.cl_weight = 0.0
    return resolved


def prepare_run(
    ds: InteractionDataset,
    hyper: HyperParams,
    share_mode: str = "uniform",
    share_ratio: float | None = None,
    seed_policy: int = 1,
    seed_train: int = 2,
    disable_gm: bool = False,
    disable_cl: bool = False,
    server_only: bool = False,
    sync_all_users: bool = False,
) -> RunContext:
    """Build policy, devices, server graph, and run mending once.

    The mended graph equals the contributed graph when mending is disabled
    or there is nothing to mend (no contributed edges).
    """
    hyper = _resolved_hyper(hyper, disable_cl)
    policy = assign_share_policy(ds.n_users, share_mode, seed_policy, share_ratio)
    policy = attach_contributions(policy, ds, seed_policy)
    policy.validate(ds)

    model = xavier_init(ds.n_users, ds.n_items, hyper.dim, child_rng(seed_train, "init"))
    train_by_user = ds.pairs_by_user(ds.train)
    devices = {
        u: DeviceState(
            user_id=u,
            local_items=train_by_user.get(u, ()),
            p_u=model.user[u].copy(),
        )
        for u in range(ds.n_users)
    }

    shared_graph = build_server_graph(policy, ds.n_users, ds.n_items)
    artifacts = None
    if shared_graph.edge_count > 0 and not disable_gm and hyper.impair_fraction > 0.0:
        artifacts = mend_graph(shared_graph, hyper, child_rng(seed_train, "mend").integers(2**31))
        graph = artifacts.mended
    else:
        graph = shared_graph
    server = ServerState(model=model, graph=graph, shared_graph=shared_graph)
    return RunContext(
        ds=ds,
        policy=policy,
        hyper=hyper,
        devices=devices,
        server=server,
        audit=AuditLog(),
        artifacts=artifacts,
        train_seed=seed_train,
        server_only=server_only,
        disable_cl=disable_cl,
        sync_all_users=sync_all_users,
        ldp_enabled=hyper.ldp_noise > 0.0 or hyper.ldp_clip > 0.0,
    )


def run_round(ctx: RunContext, round_idx: int) -> RoundReport:
    """One federation round.

    Select participants, distribute server-side views, run local training,
    take the server's own step, privatize device uploads, aggregate with
    FedAvg, and broadcast (participants additionally resync their user
    row from the new global model).
    """
    t0 = time.perf_counter()
    hyper = ctx.hyper
    server = ctx.server
    if ctx.server_only:
        selected = np.zeros(0, dtype=np.int64)
    else:
        selected = select_clients(ctx.ds.n_users, hyper.clients_per_round, round_idx, ctx.train_seed)

    received_maps: dict[int, "ReceivedViews"] = {}
    if selected.size:
        user_views, item_views = server_infer(
            server.graph, server.model, hyper.layers_server, hyper.alpha_server()
        )
        local_items = {int(u): ctx.devices[int(u)].local_items for u in selected}
        received_maps = embedding_exchange(
            ctx.policy,
            server.uploaded,
            selected,
            user_views,
            item_views,
            local_items,
            round_idx,
            ctx.audit,
        )

    uploads: list[DeviceUpload] = []
    losses: list[LossParts] = []
    for u in selected:
        dev = ctx.devices[int(u)]
        upload, parts = client_local_train(
            dev,
            server.model.item,
            ctx.policy.category[int(u)],
            received_maps.get(int(u)),
            hyper,
            round_idx,
            ctx.train_seed,
        )
        uploads.append(upload)
        losses.append(parts)

    server.absorb_uploads(uploads, ctx.policy, round_idx, ctx.audit)
    server_upload, server_parts = server_train(
        server, hyper, round_idx, ctx.train_seed, ctx.disable_cl
    )

    if ctx.ldp_enabled:
        uploads = [
            apply_ldp(
                up,
                hyper.ldp_clip,
                hyper.ldp_noise,
                child_rng(ctx.train_seed, "ldp", round_idx, up.device_id),
            )
            for up in uploads
        ]

    merged: list[tuple] = []
    if server_upload is not None:
        merged.append((server_upload.delta, server_upload.weight))
    merged.extend((up.delta, up.weight) for up in uploads)
    new_model = fedavg_aggregate(merged, server.model)
    server.model = new_model
    for u in selected:
        ctx.devices[int(u)].p_u = new_model.user[int(u)].copy()
    if ctx.sync_all_users:
        for u, dev in ctx.devices.items():
            dev.p_u = new_model.user[u].copy()

    participant_sum = float(sum(p.total for p in losses))
    server_loss = float(server_parts.total) if server_parts is not None else 0.0
    mean_bpr = float(np.mean([p.bpr for p in losses])) if losses else 0.0
    mean_cl = float(np.mean([p.cl for p in losses])) if losses else 0.0
    return RoundReport(
        round_idx=round_idx,
        participants=tuple(int(u) for u in selected),
        mean_bpr_loss=mean_bpr,
        mean_cl_loss=mean_cl,
        participant_loss_sum=participant_sum,
        server_loss=server_loss,
        total_loss=participant_sum + server_loss,
        wall_time=time.perf_counter() - t0,
    )


def eval_views(ctx: RunContext, mode: str = "server"):
    """Embedding views used for evaluation.

    ``server``: global model propagated over the mended contributed graph.
    ``device``: each user's ego-combined view of their own train items
    against raw (layer-0 scaled) item rows.
    """
    hyper = ctx.hyper
    if mode == "server":
        return server_infer(ctx.server.graph, ctx.server.model, hyper.layers_server, hyper.alpha_server())
    if mode != "device":
        raise ValueError(f"unknown eval view mode {mode!r}")
    alpha = hyper.alpha_device()
    item_views = alpha[0] * ctx.server.model.item
    user_views = np.zeros_like(ctx.server.model.user)
    for u, dev in ctx.devices.items():
        local = np.asarray(dev.local_items, dtype=np.int64)
        q_local = ctx.server.model.item[local] if local.size else np.zeros((0, hyper.dim))
        user_views[u], _ = ego_infer(dev.p_u, q_local, alpha)
    return user_views, item_views


def run_training(
    ds: InteractionDataset,
    hyper: HyperParams,
    share_mode: str = "uniform",
    share_ratio: float | None = None,
    seed_policy: int = 1,
    seed_train: int = 2,
    disable_gm: bool = False,
    disable_cl: bool = False,
    server_only: bool = False,
    sync_all_users: bool = False,
    eval_view: str = "server",
    score_sim: str = "cosine",
    resume: RunContext | None = None,
    resume_state: dict | None = None,
) -> RunResult:
    """Full training run: prepare once, loop rounds, evaluate periodically.

    Evaluation happens before round 1 (round index 0) and after every
    ``eval_every`` rounds; training stops early when validation Recall@K
    fails to improve for ``patience`` consecutive evaluations.
    """
    problems = hyper.validate()
    if problems:
        raise ValueError("invalid hyperparameters: " + "; ".join(problems))
    if resume is not None:
        ctx = resume
    else:
        ctx = prepare_run(
            ds,
            hyper,
            share_mode,
            share_ratio,
            seed_policy,
            seed_train,
            disable_gm,
            disable_cl,
            server_only,
            sync_all_users,
        )
    hyper = ctx.hyper
    reports: list[RoundReport] = []
    evals: list[dict] = []
    best_val = -np.inf
    stale = 0
    stopped = False
    start_round = 1
    if resume_state is not None:
        reports = resume_state["reports"]
        evals = resume_state["evals"]
        best_val = resume_state["best_val"]
        stale = resume_state["stale"]
        start_round = resume_state["next_round"]

    def run_eval(round_idx: int) -> dict:
        user_views, item_views = eval_views(ctx, eval_view)
        val = evaluate(user_views, item_views, ctx.ds, "val", hyper.eval_k, score_sim)
        test = evaluate(user_views, item_views, ctx.ds, "test", hyper.eval_k, score_sim)
        return {
            "round": round_idx,
            "val_recall": val.recall,
            "val_ndcg": val.ndcg,
            "test_recall": test.recall,
            "test_ndcg": test.ndcg,
        }

    if start_round == 1:
        evals.append(run_eval(0))
        best_val = evals[-1]["val_recall"]

    rounds_run = start_round - 1
    for round_idx in range(start_round, hyper.rounds + 1):
        reports.append(run_round(ctx, round_idx))
        rounds_run = round_idx
        if round_idx % hyper.eval_every == 0 or round_idx == hyper.rounds:
            record = run_eval(round_idx)
            evals.append(record)
            if record["val_recall"] > best_val:
                best_val = record["val_recall"]
                stale = 0
            else:
                stale += 1
                if stale >= hyper.patience:
                    stopped = True
                    break
    return RunResult(
        context=ctx,
        reports=reports,
        evals=evals,
        best_val_recall=float(best_val),
        stopped_early=stopped,
        rounds_run=rounds_run,
    )


def save_run_state(result: RunResult, path: str) -> None:
    """Persist enough state to resume the round loop (binary pickle)."""
    ctx = result.context
    payload = {
        "model_user": ctx.server.model.user,
        "model_item": ctx.server.model.item,
        "server_moments": ctx.server.moments,
        "uploaded": ctx.server.uploaded,
        "devices": {
            u: (dev.local_items, dev.p_u, dev.moments) for u, dev in ctx.devices.items()
        },
        "reports": result.reports,
        "evals": result.evals,
        "best_val": result.best_val_recall,
        "stale": 0,
        "next_round": result.rounds_run + 1,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_run_state(ctx: RunContext, path: str) -> dict:
    """Restore model/device state into ``ctx`` and return the loop state."""
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    ctx.server.model = EmbeddingState(payload["model_user"], payload["model_item"])
    ctx.server.moments = payload["server_moments"]
    ctx.server.uploaded = payload["uploaded"]
    for u, (local_items, p_u, moments) in payload["devices"].items():
        dev = ctx.devices[u]
        dev.local_items = local_items
        dev.p_u = p_u
        dev.moments = moments
    return payload
