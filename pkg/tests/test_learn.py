import math

import numpy as np
import pytest

from fedgcf.errors import NumericError
from fedgcf.graph import BipartiteGraph, EmbeddingState, default_alpha
from fedgcf.learn import (
    AdamMoments,
    CLTerm,
    GradientBundle,
    HyperParams,
    LossSpec,
    adam_step,
    bpr_loss,
    combined_loss,
    compute_gradients,
    compute_loss,
    cosine_sim,
    infonce_loss,
    mending_loss,
)

from oracles import cosine_oracle, fd_gradient, max_rel_err

# frozen expected values, derived by hand:
#   ln 2                       = 0.6931471805599453
#   ln(1 + e^-1)               = 0.3132616875182228
#   ln(1 + e^-5)               = 0.0067153484891181
#   sqrt(2)/2                  = 0.7071067811865476
LN2 = 0.6931471805599453
SOFTPLUS_NEG1 = 0.3132616875182228
INFONCE_ORTHO = 0.0067153484891181


# ---------------------------------------------------------------- cosine


def test_cosine_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=4)
        b = rng.normal(size=4)
        assert cosine_sim(a, b) == pytest.approx(cosine_oracle(a, b), abs=1e-12)


def test_cosine_zero_vector_convention():
    assert cosine_sim(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 0.0
    assert cosine_sim(np.array([1.0, 0.0, 0.0]), np.zeros(3)) == 0.0
    assert cosine_sim(np.zeros(3), np.zeros(3)) == 0.0


def test_cosine_scale_invariance_and_range():
    rng = np.random.default_rng(1)
    a = rng.normal(size=6)
    b = rng.normal(size=6)
    assert cosine_sim(3.0 * a, b) == pytest.approx(cosine_sim(a, b), abs=1e-12)
    assert -1.0 - 1e-12 <= cosine_sim(a, b) <= 1.0 + 1e-12
    assert cosine_sim(a, a) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- bpr


def test_bpr_equal_scores_gives_ln2():
    e_u = np.array([1.0, 0.0, 0.0])
    pos = np.array([[0.0, 1.0, 0.0]])
    neg = np.array([[0.0, 0.0, 1.0]])
    assert bpr_loss(e_u, pos, neg) == pytest.approx(LN2, abs=1e-12)


def test_bpr_unit_margin_value():
    # cos(u,pos)=1, cos(u,neg)=0 -> softplus(-1) = ln(1+e^-1)
    e_u = np.array([1.0, 0.0])
    pos = np.array([[2.0, 0.0]])
    neg = np.array([[0.0, 5.0]])
    assert bpr_loss(e_u, pos, neg) == pytest.approx(SOFTPLUS_NEG1, abs=1e-12)


def test_bpr_sums_over_pairs_and_reg():
    e_u = np.array([1.0, 0.0])
    pos = np.array([[2.0, 0.0], [0.0, 1.0]])
    neg = np.array([[0.0, 5.0], [3.0, 0.0]])
    base = SOFTPLUS_NEG1 + math.log(1.0 + math.e)  # softplus(-1) + softplus(1)
    assert bpr_loss(e_u, pos, neg) == pytest.approx(base, abs=1e-12)
    reg_rows = np.array([[1.0, 2.0]])
    assert bpr_loss(e_u, pos, neg, reg_lambda=0.5, reg_rows=reg_rows) == pytest.approx(
        base + 0.5 * 5.0, abs=1e-12
    )


def test_bpr_empty_positives_is_reg_only():
    e_u = np.array([1.0, 0.0])
    empty = np.zeros((0, 2))
    assert bpr_loss(e_u, empty, empty) == 0.0
    assert bpr_loss(e_u, empty, empty, 2.0, np.array([[1.0, 1.0]])) == pytest.approx(4.0)


def test_bpr_shape_mismatch_rejected():
    e_u = np.array([1.0, 0.0])
    with pytest.raises(ValueError):
        bpr_loss(e_u, np.ones((2, 2)), np.ones((1, 2)))


# ---------------------------------------------------------------- infonce


def test_infonce_orthogonal_pair_frozen_value():
    # tau=0.2: logits 5 (positive) and 0 (negative), per-row loss ln(1+e^-5)
    views_a = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0])}
    views_b = {0: np.array([2.0, 0.0]), 1: np.array([0.0, 3.0])}
    got = infonce_loss(views_a, views_b, tau=0.2)
    assert got == pytest.approx(2.0 * INFONCE_ORTHO, abs=1e-12)


def test_infonce_single_pair_is_zero():
    views = {5: np.array([0.3, -0.7])}
    assert infonce_loss(views, {5: np.array([-1.0, 2.0])}, tau=0.2) == 0.0


def test_infonce_empty_local_is_zero():
    assert infonce_loss({}, {0: np.array([1.0, 0.0])}, tau=0.2) == 0.0


def test_infonce_extra_global_keys_are_negatives():
    views_a = {0: np.array([1.0, 0.0])}
    views_b = {0: np.array([1.0, 0.0]), 7: np.array([0.0, 1.0])}
    # logits 5 and 0 -> ln(1+e^-5)
    assert infonce_loss(views_a, views_b, tau=0.2) == pytest.approx(INFONCE_ORTHO, abs=1e-12)


def test_infonce_missing_positive_rejected():
    with pytest.raises(ValueError):
        infonce_loss({3: np.array([1.0, 0.0])}, {0: np.array([1.0, 0.0])}, tau=0.2)


def test_infonce_bad_temperature_rejected():
    with pytest.raises(ValueError):
        infonce_loss({0: np.ones(2)}, {0: np.ones(2)}, tau=0.0)


def test_infonce_decreases_when_views_align():
    rng = np.random.default_rng(2)
    keys = {k: rng.normal(size=4) for k in range(5)}
    aligned = {k: keys[k] + 0.01 * rng.normal(size=4) for k in range(3)}
    scrambled = {k: rng.normal(size=4) for k in range(3)}
    assert infonce_loss(aligned, keys, 0.2) < infonce_loss(scrambled, keys, 0.2)


# ---------------------------------------------------------------- mending


def test_mending_loss_values():
    z_u = np.array([[1.0, 0.0], [0.0, 2.0]])
    z_i = np.array([[3.0, 0.0], [1.0, 1.0]])
    # positive (0,0): |1-1| = 0 ; positive (0,1): |cos45-1| = 1-sqrt2/2
    pos = np.array([[0, 0], [0, 1]])
    # negative (1,0): |0-0| = 0 ; negative (1,1): |cos45| = sqrt2/2
    neg = np.array([[1, 0], [1, 1]])
    want = (1.0 - math.sqrt(0.5)) + math.sqrt(0.5)
    assert mending_loss(z_u, z_i, pos, neg) == pytest.approx(want, abs=1e-12)
    assert mending_loss(z_u, z_i, np.zeros((0, 2)), np.zeros((0, 2))) == 0.0


def test_mending_kink_has_zero_gradient():
    # a positive link already at cosine 1 sits on the |.| kink: subgradient 0
    # (axis-aligned vectors so the cosine is exactly 1.0 in floating point)
    g = BipartiteGraph(1, 1, [(0, 0)])
    state = EmbeddingState(np.array([[1.0, 0.0]]), np.array([[2.0, 0.0]]))
    spec = LossSpec(
        graph=g,
        alpha=default_alpha(1),
        link_positives=np.array([[0, 0]]),
    )
    parts, bundle = compute_gradients(spec, state)
    assert parts.mend == pytest.approx(0.0, abs=1e-12)
    assert bundle.is_empty()


# ---------------------------------------------------------------- combined


def test_combined_loss_formula():
    assert combined_loss(1.5, 2.0, 0.1, 0.01, 3.0) == pytest.approx(1.5 + 0.2 + 0.03)


def test_compute_loss_component_accounting():
    rng = np.random.default_rng(3)
    g = BipartiteGraph(2, 3, [(0, 0), (0, 1), (1, 2)])
    state = EmbeddingState(rng.normal(size=(2, 4)), rng.normal(size=(3, 4)))
    spec = LossSpec(
        graph=g,
        alpha=default_alpha(1),
        bpr_users=np.array([0]),
        bpr_pos=np.array([0]),
        bpr_neg=np.array([2]),
        reg_lambda=0.01,
        reg_user_rows=np.array([0]),
        reg_item_rows=np.array([0, 2]),
    )
    parts = compute_loss(spec, state)
    want_reg = float(np.sum(state.user[0] ** 2) + np.sum(state.item[[0, 2]] ** 2))
    assert parts.reg == pytest.approx(want_reg, abs=1e-12)
    assert parts.total == pytest.approx(parts.bpr + 0.01 * parts.reg, abs=1e-12)
    assert parts.cl == 0.0 and parts.mend == 0.0


def test_reg_rows_counted_once_despite_duplicates():
    rng = np.random.default_rng(4)
    g = BipartiteGraph(1, 1, [(0, 0)])
    state = EmbeddingState(rng.normal(size=(1, 3)), rng.normal(size=(1, 3)))
    spec = LossSpec(
        graph=g,
        alpha=default_alpha(1),
        reg_lambda=1.0,
        reg_user_rows=np.array([0, 0, 0]),
        reg_item_rows=np.array([0, 0]),
    )
    parts = compute_loss(spec, state)
    want = float(np.sum(state.user[0] ** 2) + np.sum(state.item[0] ** 2))
    assert parts.reg == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------- gradients


def make_random_spec(rng, layers):
    n_u = int(rng.integers(3, 6))
    n_i = int(rng.integers(4, 7))
    pairs = {(int(rng.integers(n_u)), int(rng.integers(n_i))) for _ in range(n_u * 2)}
    # keep every node attached so cosine terms see nonzero views
    for u in range(n_u):
        pairs.add((u, int(rng.integers(n_i))))
    for i in range(n_i):
        pairs.add((int(rng.integers(n_u)), i))
    g = BipartiteGraph(n_u, n_i, sorted(pairs))
    d = 5
    state = EmbeddingState(rng.normal(size=(n_u, d)), rng.normal(size=(n_i, d)))
    users = rng.integers(0, n_u, size=4)
    cl_terms = [
        CLTerm(
            kind="user",
            trainable="query",
            rows=np.arange(n_u),
            ids=np.arange(n_u),
            fixed_ids=np.arange(n_u),
            fixed_views=rng.normal(size=(n_u, d)),
        ),
        CLTerm(
            kind="item",
            trainable="key",
            rows=np.arange(n_i),
            ids=np.arange(n_i),
            fixed_ids=np.arange(0, n_i, 2),
            fixed_views=rng.normal(size=(len(range(0, n_i, 2)), d)),
        ),
    ]
    spec = LossSpec(
        graph=g,
        alpha=default_alpha(layers),
        bpr_users=users,
        bpr_pos=rng.integers(0, n_i, size=4),
        bpr_neg=rng.integers(0, n_i, size=4),
        cl_terms=cl_terms,
        link_positives=np.array([[0, 0]]),
        link_negatives=np.array([[1, 1]]),
        tau=0.2,
        cl_weight=0.3,
        reg_lambda=0.05,
        reg_user_rows=users,
        reg_item_rows=np.arange(n_i),
    )
    return spec, state


@pytest.mark.parametrize("layers", [1, 3])
def test_gradients_match_finite_differences(layers):
    rng = np.random.default_rng(42 + layers)
    for _ in range(5):
        spec, state = make_random_spec(rng, layers)
        _, bundle = compute_gradients(spec, state)
        dense_u = np.zeros_like(state.user)
        dense_i = np.zeros_like(state.item)
        for r, v in bundle.user.items():
            dense_u[r] = v
        for r, v in bundle.item.items():
            dense_i[r] = v
        fd_u, fd_i = fd_gradient(lambda s: compute_loss(spec, s).total, state)
        assert max_rel_err(dense_u, fd_u) < 1e-5
        assert max_rel_err(dense_i, fd_i) < 1e-5


def test_gradient_zero_row_is_safe():
    # zero layer-0 vector on an isolated user: cosine convention keeps the
    # loss finite and the gradient empty for that row
    g = BipartiteGraph(2, 2, [(0, 0), (0, 1)])
    state = EmbeddingState(
        np.array([[1.0, 2.0], [0.0, 0.0]]),
        np.array([[1.0, 0.0], [0.0, 1.0]]),
    )
    spec = LossSpec(
        graph=g,
        alpha=default_alpha(1),
        bpr_users=np.array([1]),
        bpr_pos=np.array([0]),
        bpr_neg=np.array([1]),
    )
    parts, bundle = compute_gradients(spec, state)
    assert parts.bpr == pytest.approx(LN2, abs=1e-12)
    assert 1 not in bundle.user
    bundle.check_finite()


def test_need_grads_false_returns_empty_bundle():
    rng = np.random.default_rng(5)
    spec, state = make_random_spec(rng, 1)
    parts, bundle = compute_gradients(spec, state, need_grads=False)
    assert bundle.is_empty()
    assert parts.total != 0.0


def test_cl_weight_zero_skips_contrastive():
    rng = np.random.default_rng(6)
    spec, state = make_random_spec(rng, 1)
    spec.cl_weight = 0.0
    parts, _ = compute_gradients(spec, state)
    assert parts.cl == 0.0


# ---------------------------------------------------------------- bundle


def test_bundle_add_accumulates_and_copies():
    b = GradientBundle()
    v = np.array([1.0, 2.0])
    b.add("user", 3, v)
    b.add("user", 3, v)
    b.add("item", 0, -v)
    v[0] = 99.0  # must not alias into the bundle
    assert np.allclose(b.user[3], [2.0, 4.0])
    assert np.allclose(b.item[0], [-1.0, -2.0])
    assert not b.is_empty()


def test_bundle_from_dense_skips_zero_rows():
    gu = np.array([[0.0, 0.0], [1.0, 0.0]])
    gi = np.zeros((3, 2))
    b = GradientBundle.from_dense(gu, gi)
    assert set(b.user) == {1} and not b.item


def test_bundle_check_finite_raises():
    b = GradientBundle(user={0: np.array([np.nan, 1.0])})
    with pytest.raises(NumericError):
        b.check_finite()


# ---------------------------------------------------------------- adam


def test_adam_empty_bundle_is_noop():
    state = EmbeddingState(np.ones((2, 3)), np.ones((2, 3)))
    before_u = state.user.copy()
    moments = AdamMoments()
    adam_step(state, GradientBundle(), moments, HyperParams())
    assert np.array_equal(state.user, before_u)
    assert moments.t_user == 0 and moments.t_item == 0
    assert not moments.user and not moments.item


def test_adam_first_step_is_signed_learning_rate():
    hyper = HyperParams(learning_rate=0.01, adam_eps=1e-12)
    state = EmbeddingState(np.zeros((2, 3)), np.zeros((1, 3)))
    grads = GradientBundle(user={1: np.array([4.0, -0.5, 0.25])})
    adam_step(state, grads, AdamMoments(), hyper)
    # bias-corrected m_hat/sqrt(v_hat) = g/|g| on step one
    assert np.allclose(state.user[1], [-0.01, 0.01, -0.01], atol=1e-9)
    assert np.array_equal(state.user[0], np.zeros(3))


def test_adam_touches_only_given_rows_and_counts_per_table():
    hyper = HyperParams()
    state = EmbeddingState(np.zeros((3, 2)), np.zeros((3, 2)))
    moments = AdamMoments()
    adam_step(state, GradientBundle(user={0: np.ones(2)}), moments, hyper)
    assert moments.t_user == 1 and moments.t_item == 0
    adam_step(state, GradientBundle(item={2: np.ones(2)}), moments, hyper)
    assert moments.t_user == 1 and moments.t_item == 1
    assert set(moments.user) == {0} and set(moments.item) == {2}
    assert np.array_equal(state.user[1], np.zeros(2))


def test_adam_descends_a_quadratic():
    # minimize sum(x^2) on a single row; Adam should shrink the norm
    hyper = HyperParams(learning_rate=0.05)
    state = EmbeddingState(np.array([[3.0, -2.0]]), np.zeros((1, 2)))
    moments = AdamMoments()
    start = float(np.sum(state.user[0] ** 2))
    for _ in range(200):
        grads = GradientBundle(user={0: 2.0 * state.user[0]})
        adam_step(state, grads, moments, hyper)
    assert float(np.sum(state.user[0] ** 2)) < 0.01 * start


def test_adam_deterministic():
    def run():
        hyper = HyperParams(learning_rate=0.01)
        state = EmbeddingState(np.full((2, 2), 0.5), np.full((2, 2), -0.5))
        moments = AdamMoments()
        rng = np.random.default_rng(7)
        for _ in range(10):
            g = GradientBundle(
                user={0: rng.normal(size=2)}, item={1: rng.normal(size=2)}
            )
            adam_step(state, g, moments, hyper)
        return state

    a, b = run(), run()
    assert np.array_equal(a.user, b.user) and np.array_equal(a.item, b.item)


# ---------------------------------------------------------------- hyper


def test_hyperparams_defaults_valid():
    assert HyperParams().validate() == []


def test_hyperparams_alpha_vectors():
    h = HyperParams()
    assert np.allclose(h.alpha_device(), [0.5, 0.5])
    assert np.allclose(h.alpha_server(), [0.25, 0.25, 0.25, 0.25])


def test_hyperparams_validate_collects_all_problems():
    h = HyperParams(dim=0, learning_rate=-1.0, temperature=0.0, layers_device=2)
    problems = h.validate()
    assert len(problems) >= 4
    joined = "\n".join(problems)
    for word in ("dim", "learning_rate", "temperature", "layers_device"):
        assert word in joined


def test_cl_term_validation():
    with pytest.raises(ValueError):
        CLTerm("other", "query", np.zeros(1), np.zeros(1), np.zeros(1), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        CLTerm("user", "both", np.zeros(1), np.zeros(1), np.zeros(1), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        CLTerm("user", "query", np.zeros(2), np.zeros(1), np.zeros(1), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        CLTerm("user", "query", np.zeros(1), np.zeros(1), np.zeros(2), np.zeros((1, 2)))
