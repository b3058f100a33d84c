"""Losses, analytic gradients, and the sparse Adam optimizer.

All similarities are cosine. Gradients are derived by hand and flow from
the loss back to the layer-0 embedding tables through the propagation
operator, which is self-adjoint (symmetric normalization), so the
backward pass reuses the forward propagation with the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import NumericError
from .graph import BipartiteGraph, EmbeddingState, propagate_combine

_NORM_FLOOR = 1e-12


@dataclass
class HyperParams:
    """Every tunable knob of a training run, with conventional defaults."""

    dim: int = 64
    learning_rate: float = 1e-3
    reg_lambda: float = 1e-4
    cl_weight: float = 0.1
    temperature: float = 0.2
    mend_threshold: float = 0.6
    layers_device: int = 1
    layers_server: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clients_per_round: int = 256
    rounds: int = 100
    local_epochs: int = 1
    server_batch: int = 2048
    mend_epochs: int = 100
    impair_fraction: float = 0.1
    mend_cap_per_user: int = 50
    ldp_clip: float = 0.0
    ldp_noise: float = 0.0
    eval_k: int = 20
    eval_every: int = 5
    patience: int = 10

    def alpha_device(self) -> np.ndarray:
        return np.full(self.layers_device + 1, 1.0 / (self.layers_device + 1))

    def alpha_server(self) -> np.ndarray:
        return np.full(self.layers_server + 1, 1.0 / (self.layers_server + 1))

    def validate(self) -> list[str]:
        problems = []
        if self.dim <= 0:
            problems.append(f"dim must be positive, got {self.dim}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        if self.reg_lambda < 0:
            problems.append(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if self.cl_weight < 0:
            problems.append(f"cl_weight must be >= 0, got {self.cl_weight}")
        if self.temperature <= 0:
            problems.append(f"temperature must be positive, got {self.temperature}")
        if not (-1.0 <= self.mend_threshold <= 1.0):
            problems.append(f"mend_threshold must be in [-1,1], got {self.mend_threshold}")
        if self.layers_device != 1:
            problems.append(f"layers_device is fixed at 1 (ego graphs), got {self.layers_device}")
        if self.layers_server < 1:
            problems.append(f"layers_server must be >= 1, got {self.layers_server}")
        if not (0.0 <= self.adam_beta1 < 1.0) or not (0.0 <= self.adam_beta2 < 1.0):
            problems.append("adam betas must be in [0,1)")
        if self.adam_eps <= 0:
            problems.append(f"adam_eps must be positive, got {self.adam_eps}")
        if self.clients_per_round < 0:
            problems.append(f"clients_per_round must be >= 0, got {self.clients_per_round}")
        if self.rounds < 0:
            problems.append(f"rounds must be >= 0, got {self.rounds}")
        if self.local_epochs < 1:
            problems.append(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.server_batch < 1:
            problems.append(f"server_batch must be >= 1, got {self.server_batch}")
        if self.mend_epochs < 0:
            problems.append(f"mend_epochs must be >= 0, got {self.mend_epochs}")
        if not (0.0 <= self.impair_fraction < 1.0):
            problems.append(f"impair_fraction must be in [0,1), got {self.impair_fraction}")
        if self.mend_cap_per_user < 1:
            problems.append(f"mend_cap_per_user must be >= 1, got {self.mend_cap_per_user}")
        if self.ldp_clip < 0 or self.ldp_noise < 0:
            problems.append("ldp_clip and ldp_noise must be >= 0")
        if self.eval_k < 1:
            problems.append(f"eval_k must be >= 1, got {self.eval_k}")
        if self.eval_every < 1:
            problems.append(f"eval_every must be >= 1, got {self.eval_every}")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        return problems


@dataclass
class GradientBundle:
    """Sparse per-row vectors over the two embedding tables.

    Used both for gradients and for parameter deltas; only rows touched by
    the producing computation are present.
    """

    user: dict[int, np.ndarray] = field(default_factory=dict)
    item: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, table: str, row: int, vec: np.ndarray) -> None:
        store = self.user if table == "user" else self.item
        if row in store:
            store[row] = store[row] + vec
        else:
            store[row] = np.array(vec, dtype=np.float64)

    def is_empty(self) -> bool:
        return not self.user and not self.item

    def check_finite(self) -> None:
        for name, store in (("user", self.user), ("item", self.item)):
            for row in sorted(store):
                if not np.all(np.isfinite(store[row])):
                    raise NumericError(f"non-finite gradient for {name} row {row}")

    @classmethod
    def from_dense(cls, grad_user: np.ndarray, grad_item: np.ndarray) -> "GradientBundle":
        bundle = cls()
        for row in np.nonzero(np.any(grad_user != 0.0, axis=1))[0]:
            bundle.user[int(row)] = grad_user[row].copy()
        for row in np.nonzero(np.any(grad_item != 0.0, axis=1))[0]:
            bundle.item[int(row)] = grad_item[row].copy()
        return bundle


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity with the zero-vector convention cos(0, x) = 0."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _row_norms(mat: np.ndarray) -> np.ndarray:
    return np.linalg.norm(mat, axis=1)


def _safe_unit(mat: np.ndarray):
    """Row-normalize; rows below the norm floor become zero (flagged)."""
    norms = _row_norms(mat)
    ok = norms >= _NORM_FLOOR
    inv = np.where(ok, 1.0 / np.where(ok, norms, 1.0), 0.0)
    return mat * inv[:, None], norms, ok


def _cosine_rows(a: np.ndarray, b: np.ndarray):
    """Row-paired cosines plus gradients w.r.t. both rows.

    d cos / d a = (b_hat - cos * a_hat) / ||a||, symmetric in b; rows with
    a zero-norm side get cosine 0 and zero gradient (the convention's
    subgradient).
    """
    a_hat, a_norm, a_ok = _safe_unit(a)
    b_hat, b_norm, b_ok = _safe_unit(b)
    ok = a_ok & b_ok
    cos = np.where(ok, np.sum(a_hat * b_hat, axis=1), 0.0)
    inv_a = np.where(ok, 1.0 / np.where(a_ok, a_norm, 1.0), 0.0)
    inv_b = np.where(ok, 1.0 / np.where(b_ok, b_norm, 1.0), 0.0)
    da = (b_hat - cos[:, None] * a_hat) * inv_a[:, None]
    db = (a_hat - cos[:, None] * b_hat) * inv_b[:, None]
    return cos, da, db


def _bpr_terms(user_vecs: np.ndarray, pos_vecs: np.ndarray, neg_vecs: np.ndarray):
    """Pairwise ranking loss sum(softplus(-(s_pos - s_neg))) and gradients."""
    s_pos, du_p, dp = _cosine_rows(user_vecs, pos_vecs)
    s_neg, du_n, dn = _cosine_rows(user_vecs, neg_vecs)
    x = s_pos - s_neg
    loss = float(np.sum(np.logaddexp(0.0, -x)))
    # d softplus(-x) / dx = sigmoid(x) - 1
    coef = (1.0 / (1.0 + np.exp(-x)) - 1.0)[:, None]
    g_user = coef * (du_p - du_n)
    g_pos = coef * dp
    g_neg = -coef * dn
    return loss, g_user, g_pos, g_neg


def bpr_loss(
    e_u: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    reg_lambda: float = 0.0,
    reg_rows: np.ndarray | None = None,
) -> float:
    """Ranking loss for one user view against paired positive/negative views.

    loss = sum_k -ln sigmoid(cos(e_u, pos_k) - cos(e_u, neg_k))
         + reg_lambda * sum of squared entries of ``reg_rows``.
    Empty positives reduce the loss to the regularization term.
    """
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.shape[0] and positives.shape != negatives.shape:
        raise ValueError(f"positives {positives.shape} and negatives {negatives.shape} differ")
    total = 0.0
    if positives.shape[0]:
        users = np.broadcast_to(e_u, positives.shape)
        total, _, _, _ = _bpr_terms(users, positives, negatives)
    if reg_lambda and reg_rows is not None:
        total += reg_lambda * float(np.sum(np.asarray(reg_rows) ** 2))
    return float(total)


def _infonce_terms(queries: np.ndarray, keys: np.ndarray, pos_idx: np.ndarray, tau: float):
    """Softmax contrastive loss over cosine logits, with both-side gradients.

    loss = sum_q [logsumexp_k cos(q, k)/tau - cos(q, k_pos(q))/tau].
    A single query whose positive is the only key gives exactly zero.
    """
    q_hat, q_norm, q_ok = _safe_unit(queries)
    k_hat, k_norm, k_ok = _safe_unit(keys)
    logits = (q_hat @ k_hat.T) / tau
    row_max = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - row_max)
    denom = exp.sum(axis=1, keepdims=True)
    log_denom = np.log(denom[:, 0]) + row_max[:, 0]
    loss = float(np.sum(log_denom - logits[np.arange(len(pos_idx)), pos_idx]))
    d_logits = exp / denom
    d_logits[np.arange(len(pos_idx)), pos_idx] -= 1.0
    d_cos = d_logits / tau
    g_q_hat = d_cos @ k_hat
    g_k_hat = d_cos.T @ q_hat
    # project out the radial component: d cos / d q = (g - (g . q_hat) q_hat)/||q||
    inv_q = np.where(q_ok, 1.0 / np.where(q_ok, q_norm, 1.0), 0.0)
    inv_k = np.where(k_ok, 1.0 / np.where(k_ok, k_norm, 1.0), 0.0)
    g_q = (g_q_hat - np.sum(g_q_hat * q_hat, axis=1, keepdims=True) * q_hat) * inv_q[:, None]
    g_k = (g_k_hat - np.sum(g_k_hat * k_hat, axis=1, keepdims=True) * k_hat) * inv_k[:, None]
    return loss, g_q, g_k


def infonce_loss(
    local_views: Mapping[int, np.ndarray],
    global_views: Mapping[int, np.ndarray],
    tau: float,
) -> float:
    """Contrastive alignment of two views of the same nodes.

    Every local view must have a same-id global positive; the denominator
    runs over all global views, so extra global entries act as negatives.
    An empty local map contributes zero.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not local_views:
        return 0.0
    missing = [k for k in local_views if k not in global_views]
    if missing:
        raise ValueError(f"local view ids {sorted(missing)} lack a global positive")
    local_ids = sorted(local_views)
    global_ids = sorted(global_views)
    queries = np.stack([np.asarray(local_views[k], dtype=np.float64) for k in local_ids])
    keys = np.stack([np.asarray(global_views[k], dtype=np.float64) for k in global_ids])
    pos_idx = np.array([global_ids.index(k) for k in local_ids])
    loss, _, _ = _infonce_terms(queries, keys, pos_idx, tau)
    return loss


def mending_loss(
    z_user: np.ndarray,
    z_item: np.ndarray,
    positive_links: np.ndarray,
    negative_links: np.ndarray,
) -> float:
    """Absolute residual between link cosine and its 0/1 target.

    loss = sum over positives |cos(z_u, z_i) - 1| + sum over negatives
    |cos(z_u, z_i) - 0|.
    """
    total = 0.0
    for pairs, target in ((positive_links, 1.0), (negative_links, 0.0)):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.shape[0] == 0:
            continue
        cos, _, _ = _cosine_rows(z_user[pairs[:, 0]], z_item[pairs[:, 1]])
        total += float(np.sum(np.abs(cos - target)))
    return total


def combined_loss(bpr: float, cl: float, cl_weight: float, reg_lambda: float, reg: float) -> float:
    """Joint objective: ranking + weighted contrastive + single-counted reg."""
    return float(bpr + cl_weight * cl + reg_lambda * reg)


@dataclass
class CLTerm:
    """One contrastive term inside a LossSpec.

    ``rows`` index the propagated table (``kind`` selects user or item) and
    supply the trainable side; ``ids`` are the matching semantic node ids
    used to align with ``fixed_ids``/``fixed_views``, which are constants.
    ``trainable`` says whether the propagated views act as the queries or
    as the keys of the softmax.
    """

    kind: str
    trainable: str
    rows: np.ndarray
    ids: np.ndarray
    fixed_ids: np.ndarray
    fixed_views: np.ndarray

    def __post_init__(self):
        if self.kind not in ("user", "item"):
            raise ValueError(f"kind must be user|item, got {self.kind!r}")
        if self.trainable not in ("query", "key"):
            raise ValueError(f"trainable must be query|key, got {self.trainable!r}")
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.fixed_ids = np.asarray(self.fixed_ids, dtype=np.int64)
        if self.rows.shape != self.ids.shape:
            raise ValueError("rows and ids must align")
        if self.fixed_views.shape[0] != self.fixed_ids.shape[0]:
            raise ValueError("fixed_views and fixed_ids must align")


@dataclass
class LossSpec:
    """Which loss terms to evaluate on which graph context.

    BPR triplets index rows of the propagated tables. ``link_positives`` /
    ``link_negatives`` are (u,i) pairs for the mending objective.
    ``reg_user_rows`` / ``reg_item_rows`` are the layer-0 rows regularized
    once in the combined objective.
    """

    graph: BipartiteGraph
    alpha: np.ndarray
    bpr_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bpr_pos: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bpr_neg: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cl_terms: list[CLTerm] = field(default_factory=list)
    link_positives: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    link_negatives: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    tau: float = 0.2
    cl_weight: float = 0.0
    reg_lambda: float = 0.0
    reg_user_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    reg_item_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class LossParts:
    """Loss components; ``total = bpr + cl_weight*cl + mend + reg_lambda*reg``."""

    bpr: float = 0.0
    cl: float = 0.0
    mend: float = 0.0
    reg: float = 0.0
    total: float = 0.0


def _final_views(spec: LossSpec, state: EmbeddingState):
    return propagate_combine(spec.graph, state.user, state.item, spec.alpha)


def compute_loss(spec: LossSpec, state: EmbeddingState) -> LossParts:
    """Forward-only evaluation of a LossSpec (used by tests and reporting)."""
    parts, _ = compute_gradients(spec, state, need_grads=False)
    return parts


def compute_gradients(
    spec: LossSpec, state: EmbeddingState, need_grads: bool = True
) -> tuple[LossParts, GradientBundle]:
    """Evaluate the composite loss and its layer-0 gradient bundle.

    The forward pass propagates layer 0 through the graph and combines the
    layers; every loss term produces gradients with respect to the final
    views, which the self-adjoint propagation maps back to layer 0. The
    regularizer acts on layer-0 rows directly.
    """
    final_u, final_i = _final_views(spec, state)
    grad_u = np.zeros_like(final_u)
    grad_i = np.zeros_like(final_i)
    parts = LossParts()

    users = np.asarray(spec.bpr_users, dtype=np.int64)
    if users.size:
        pos = np.asarray(spec.bpr_pos, dtype=np.int64)
        neg = np.asarray(spec.bpr_neg, dtype=np.int64)
        if users.shape != pos.shape or users.shape != neg.shape:
            raise ValueError("bpr triplet arrays must align")
        loss, g_user, g_pos, g_neg = _bpr_terms(final_u[users], final_i[pos], final_i[neg])
        parts.bpr = loss
        if need_grads:
            np.add.at(grad_u, users, g_user)
            np.add.at(grad_i, pos, g_pos)
            np.add.at(grad_i, neg, g_neg)

    if spec.cl_terms and spec.cl_weight > 0.0:
        for term in spec.cl_terms:
            if term.rows.size == 0 or term.fixed_ids.size == 0:
                continue
            table = final_u if term.kind == "user" else final_i
            views = table[term.rows]
            if term.trainable == "query":
                id_pos = {int(k): j for j, k in enumerate(term.fixed_ids)}
                pos_idx = np.array([id_pos[int(k)] for k in term.ids])
                loss, g_q, _ = _infonce_terms(views, term.fixed_views, pos_idx, spec.tau)
                g_train = g_q
            else:
                id_pos = {int(k): j for j, k in enumerate(term.ids)}
                pos_idx = np.array([id_pos[int(k)] for k in term.fixed_ids])
                loss, _, g_k = _infonce_terms(term.fixed_views, views, pos_idx, spec.tau)
                g_train = g_k
            parts.cl += loss
            if need_grads:
                target = grad_u if term.kind == "user" else grad_i
                np.add.at(target, term.rows, spec.cl_weight * g_train)

    for pairs, target_val in ((spec.link_positives, 1.0), (spec.link_negatives, 0.0)):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.shape[0] == 0:
            continue
        cos, d_zu, d_zi = _cosine_rows(final_u[pairs[:, 0]], final_i[pairs[:, 1]])
        resid = cos - target_val
        parts.mend += float(np.sum(np.abs(resid)))
        if need_grads:
            sign = np.sign(resid)[:, None]
            np.add.at(grad_u, pairs[:, 0], sign * d_zu)
            np.add.at(grad_i, pairs[:, 1], sign * d_zi)

    reg_u = np.unique(np.asarray(spec.reg_user_rows, dtype=np.int64))
    reg_i = np.unique(np.asarray(spec.reg_item_rows, dtype=np.int64))
    if reg_u.size:
        parts.reg += float(np.sum(state.user[reg_u] ** 2))
    if reg_i.size:
        parts.reg += float(np.sum(state.item[reg_i] ** 2))

    parts.total = parts.bpr + spec.cl_weight * parts.cl + parts.mend + spec.reg_lambda * parts.reg
    if not need_grads:
        return parts, GradientBundle()

    # adjoint pass: the propagation operator is symmetric, so pushing the
    # final-view gradients through the same propagate+combine yields the
    # layer-0 gradients
    grad_u0, grad_i0 = propagate_combine(spec.graph, grad_u, grad_i, spec.alpha)
    if spec.reg_lambda > 0.0:
        if reg_u.size:
            grad_u0[reg_u] += 2.0 * spec.reg_lambda * state.user[reg_u]
        if reg_i.size:
            grad_i0[reg_i] += 2.0 * spec.reg_lambda * state.item[reg_i]
    bundle = GradientBundle.from_dense(grad_u0, grad_i0)
    bundle.check_finite()
    return parts, bundle


@dataclass
class AdamMoments:
    """Sparse Adam state: first/second moments per touched row, step count
    per table. Untouched rows never materialize moments."""

    user: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    item: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    t_user: int = 0
    t_item: int = 0


def adam_update_rows(
    rows: dict[int, np.ndarray],
    moments: dict[int, tuple[np.ndarray, np.ndarray]],
    t: int,
    hyper: HyperParams,
) -> dict[int, np.ndarray]:
    """One bias-corrected Adam step over a sparse row-gradient map.

    Returns per-row deltas to add to the parameters; moments mutate in
    place. ``t`` is the already-incremented step count for this table.
    """
    b1, b2 = hyper.adam_beta1, hyper.adam_beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    deltas: dict[int, np.ndarray] = {}
    for row in sorted(rows):
        g = rows[row]
        m, v = moments.get(row, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        moments[row] = (m, v)
        m_hat = m / bc1
        v_hat = v / bc2
        deltas[row] = -hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.adam_eps)
    return deltas


def adam_step(
    state: EmbeddingState, grads: GradientBundle, moments: AdamMoments, hyper: HyperParams
) -> EmbeddingState:
    """Apply one Adam step to the touched rows of ``state`` in place.

    An empty bundle leaves the state, the moments, and the step counters
    unchanged.
    """
    if grads.user:
        moments.t_user += 1
        for row, delta in adam_update_rows(grads.user, moments.user, moments.t_user, hyper).items():
            state.user[row] += delta
    if grads.item:
        moments.t_item += 1
        for row, delta in adam_update_rows(grads.item, moments.item, moments.t_item, hyper).items():
            state.item[row] += delta
    return state
