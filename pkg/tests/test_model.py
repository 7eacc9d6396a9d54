import math

import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from jointmap.corpus import COMMERCIAL, INTENTS, NONCOMMERCIAL
from jointmap.datasets import LabeledDataset, Record
from jointmap.errors import ConfigError, DataError, ParseError
from jointmap.model import (
    JointMap,
    ModelConfig,
    Vocabulary,
    category_cross_entropy,
    category_cross_entropy_grad,
    category_focal_loss,
    category_focal_loss_grad,
    intent_cross_entropy,
    intent_cross_entropy_grad,
    joint_loss,
    load_pretrained_embeddings,
    pool_representation,
    split_attention,
    train_model,
)
from jointmap.numerics import check_gradients


def tiny_model(seed=5, **overrides):
    tokens = [f"t{i}" for i in range(12)]
    base = dict(vocab_size=12, num_categories=3, embed_dim=4, query_len=4,
                heads=2, gamma=1.5, dropout=0.0)
    base.update(overrides)
    return JointMap(ModelConfig(**base), Vocabulary(tokens), seed=seed)


# ------------------------------------------------------------------ config


def test_heads_must_divide_query_length():
    with pytest.raises(ConfigError):
        tiny_model(query_len=5, heads=2)


def test_default_heads_is_one_per_position():
    model = tiny_model(heads=None)
    assert model.config.resolved_heads() == 4
    assert model.config.head_dim() == 1


def test_negative_gamma_rejected():
    with pytest.raises(ConfigError):
        tiny_model(gamma=-0.5)


def test_both_loss_weights_zero_rejected():
    with pytest.raises(ConfigError):
        tiny_model(beta_category=0.0, beta_intent=0.0)


def test_alpha_length_checked():
    with pytest.raises(ConfigError):
        tiny_model(alpha=[1.0, 2.0])


def test_vocab_size_mismatch_rejected():
    tokens = [f"t{i}" for i in range(12)]
    cfg = ModelConfig(vocab_size=11, num_categories=3, embed_dim=4, query_len=4, heads=2)
    with pytest.raises(ConfigError):
        JointMap(cfg, Vocabulary(tokens), seed=0)


# ------------------------------------------------------------------- embed


def test_embed_pads_short_queries_with_zero_rows():
    model = tiny_model()
    embedded, ids, pad_mask = model.embed_query(("t0", "t1", "t2"))
    assert embedded.shape == (4, 4)
    assert np.array_equal(embedded[3], np.zeros(4))
    assert pad_mask.tolist() == [True, True, True, False]


def test_embed_truncates_long_queries():
    model = tiny_model()
    tokens = tuple(f"t{i}" for i in range(9))
    embedded, ids, pad_mask = model.embed_query(tokens)
    assert len(ids) == 4
    assert ids == model.vocabulary.encode(tokens[:4])


def test_embed_lookup_is_bit_exact():
    model = tiny_model()
    table = model.store.params["word_embeddings"]
    embedded, ids, _ = model.embed_query(("t7",))
    assert np.array_equal(embedded[0], table[model.vocabulary.encode(["t7"])[0]])


def test_embed_oov_uses_shared_unk_row():
    model = tiny_model()
    table = model.store.params["word_embeddings"]
    embedded, ids, _ = model.embed_query(("never-seen",))
    assert ids == [model.vocabulary.unk_id]
    assert np.array_equal(embedded[0], table[-1])


def test_embed_empty_tokens_rejected():
    with pytest.raises(DataError):
        tiny_model().embed_query(())


# ----------------------------------------------------------- compatibility


def test_compatibility_identical_vectors_give_one():
    model = tiny_model()
    model.store.params["category_embeddings"][0] = np.array([1.0, 2.0, 3.0, 4.0])
    embedded = np.zeros((4, 4))
    embedded[0] = np.array([1.0, 2.0, 3.0, 4.0])
    compat = model.compatibility_matrix(embedded)
    assert compat[0, 0] == pytest.approx(1.0)


def test_compatibility_padded_columns_are_zero():
    model = tiny_model()
    embedded, _, _ = model.embed_query(("t0", "t1"))
    compat = model.compatibility_matrix(embedded)
    assert np.array_equal(compat[:, 2:], np.zeros((5, 2)))


def test_compatibility_matches_hand_cosines():
    model = tiny_model()
    labels = model.label_matrix()
    embedded, _, _ = model.embed_query(("t0", "t1", "t2", "t3"))
    compat = model.compatibility_matrix(embedded)
    for i in (0, 2, 4):
        for j in range(4):
            expected = float(labels[i] @ embedded[j]) / (
                np.linalg.norm(labels[i]) * np.linalg.norm(embedded[j])
            )
            assert compat[i, j] == pytest.approx(expected, rel=1e-12)


# -------------------------------------------------------------- attention


def test_attention_single_head_identity_projection_is_convex_mix():
    model = tiny_model(heads=1)
    n = model.config.query_len
    model.store.params["attn_key_proj"][...] = np.eye(n)
    model.store.params["attn_value_proj"][...] = np.eye(n)
    compat = np.array([[0.5, -0.2, 0.1, 0.9]])
    attended, weights, _ = model.multihead_attention(compat)
    # One label row: softmax weight 1 on itself, output equals the value row.
    assert np.allclose(attended, compat)
    assert weights.shape == (1, 1, 1)
    assert weights[0, 0, 0] == pytest.approx(1.0)


def test_attention_rows_are_convex_weights():
    model = tiny_model()
    compat = np.random.default_rng(3).normal(size=(5, 4))
    attended, weights, _ = model.multihead_attention(compat)
    assert attended.shape == compat.shape
    assert np.all(weights >= 0)
    assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_zero_input_gives_zero_output():
    model = tiny_model()
    attended, weights, _ = model.multihead_attention(np.zeros((5, 4)))
    assert np.allclose(attended, 0.0)
    assert np.allclose(weights.sum(axis=-1), 1.0)


def test_attention_matches_hand_stepped_oracle():
    # n=2, one head, three label rows, small integer projections.
    model = tiny_model(query_len=2, heads=1)
    wk = np.array([[1.0, 0.0], [1.0, 1.0]])
    wv = np.array([[2.0, 0.0], [0.0, 1.0]])
    model.store.params["attn_key_proj"][...] = wk
    model.store.params["attn_value_proj"][...] = wv
    compat = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    attended, weights, _ = model.multihead_attention(compat)

    keys = [[r @ c for c in wk.T] for r in compat]
    values = [[r @ c for c in wv.T] for r in compat]
    for i in range(3):
        raw = [sum(compat[i][x] * keys[j][x] for x in range(2)) / math.sqrt(2)
               for j in range(3)]
        mx = max(raw)
        exps = [math.exp(v - mx) for v in raw]
        total = sum(exps)
        probs = [e / total for e in exps]
        expected = [sum(probs[j] * values[j][x] for j in range(3)) for x in range(2)]
        assert np.allclose(attended[i], expected, rtol=1e-12)
        assert np.allclose(weights[0, i], probs, rtol=1e-12)


def test_split_attention_row_ranges_and_reassembly():
    attended = np.arange(20.0).reshape(5, 4)
    cat, intent = split_attention(attended, 3)
    assert cat.shape == (3, 4)
    assert intent.shape == (2, 4)
    assert np.array_equal(np.vstack([cat, intent]), attended)


# ---------------------------------------------------------------- highway


def test_highway_gate_saturation_carry_only():
    model = tiny_model()
    model.store.params["highway_category_gate_b"][...] = -20.0
    x = np.random.default_rng(0).normal(size=(4, 4))
    out, _ = model.highway(x, "category")
    assert np.allclose(out, x, atol=1e-6)


def test_highway_gate_saturation_transform_only():
    model = tiny_model()
    p = model.store.params
    p["highway_category_gate_b"][...] = 20.0
    x = np.random.default_rng(1).normal(size=(4, 4))
    out, _ = model.highway(x, "category")
    expected = np.maximum(
        x @ p["highway_category_transform_w"] + p["highway_category_transform_b"], 0.0
    )
    assert np.allclose(out, expected, atol=1e-6)


def test_highway_stacks_have_independent_parameters():
    model = tiny_model()
    x = np.random.default_rng(2).normal(size=(4, 4))
    cat, _ = model.highway(x, "category")
    intent, _ = model.highway(x, "intent")
    assert not np.allclose(cat, intent)


# ---------------------------------------------------------------- pooling


def test_pool_uniform_scores_give_mean_of_rows():
    gmat = np.full((3, 4), 0.25)
    alpha = np.arange(16.0).reshape(4, 4)
    pad = np.ones(4, dtype=bool)
    pooled, _ = pool_representation(gmat, alpha, pad)
    assert np.allclose(pooled, alpha.mean(axis=0))


def test_pool_saturated_scores_pick_one_row():
    gmat = np.zeros((2, 4))
    gmat[:, 1] = 50.0
    alpha = np.random.default_rng(0).normal(size=(4, 3))
    pad = np.ones(4, dtype=bool)
    pooled, _ = pool_representation(gmat, alpha, pad)
    assert np.allclose(pooled, alpha[1], atol=1e-8)


def test_pool_two_word_hand_instance():
    gmat = np.array([[1.0, 0.0], [0.5, 0.25]])
    alpha = np.array([[2.0, 4.0], [1.0, -1.0]])
    pad = np.ones(2, dtype=bool)
    pooled, _ = pool_representation(gmat, alpha, pad)
    w0 = math.exp(1.0) / (math.exp(1.0) + math.exp(0.25))
    w1 = 1.0 - w0
    assert np.allclose(pooled, [2.0 * w0 + 1.0 * w1, 4.0 * w0 - 1.0 * w1], rtol=1e-12)


def test_pool_masks_padded_positions():
    gmat = np.array([[0.0, 100.0]])
    alpha = np.array([[3.0], [9.0]])
    pad = np.array([True, False])
    pooled, _ = pool_representation(gmat, alpha, pad)
    assert np.allclose(pooled, [3.0])


def test_pool_all_padded_rejected():
    with pytest.raises(DataError):
        pool_representation(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros(2, dtype=bool))


# ---------------------------------------------------------------- forward


def test_forward_logit_shapes():
    model = tiny_model()
    trace = model.forward(("t0", "t1"))
    assert trace.category_logits.shape == (3,)
    assert trace.intent_logits.shape == (2,)
    assert trace.compat.shape == (5, 4)
    assert trace.attended_category.shape == (3, 4)
    assert trace.attended_intent.shape == (2, 4)


def test_forward_eval_mode_deterministic():
    model = tiny_model(dropout=0.5)
    a = model.forward(("t0", "t3", "t5"))
    b = model.forward(("t0", "t3", "t5"))
    assert np.array_equal(a.category_logits, b.category_logits)
    assert np.array_equal(a.intent_logits, b.intent_logits)


def test_forward_attention_rows_sum_to_one():
    model = tiny_model()
    trace = model.forward(("t0", "t1", "t2"))
    assert np.allclose(trace.attn_weights.sum(axis=-1), 1.0, atol=1e-6)


def test_forward_matches_composed_per_op_oracle():
    model = tiny_model(heads=2)
    tokens = ("t1", "t4", "t9")
    trace = model.forward(tokens)

    p = model.store.params
    n, v = model.config.query_len, model.config.embed_dim
    ids = model.vocabulary.encode(tokens)
    emb = [[0.0] * v for _ in range(n)]
    for j, tid in enumerate(ids):
        emb[j] = [float(x) for x in p["word_embeddings"][tid]]
    labels = [list(map(float, row)) for row in p["category_embeddings"]]
    labels += [list(map(float, row)) for row in p["intent_embeddings"]]

    def cos(a, b):
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(x * x for x in b))
        if na == 0 or nb == 0:
            return 0.0
        return sum(x * y for x, y in zip(a, b)) / (na * nb)

    m = len(labels)
    compat = [[cos(labels[i], emb[j]) for j in range(n)] for i in range(m)]

    def matvec(rows, mat):
        return [[sum(r[i] * mat[i][c] for i in range(len(r))) for c in range(len(mat[0]))]
                for r in rows]

    keys = matvec(compat, [list(map(float, row)) for row in p["attn_key_proj"]])
    values = matvec(compat, [list(map(float, row)) for row in p["attn_value_proj"]])
    h, d = 2, n // 2
    attended = [[0.0] * n for _ in range(m)]
    for head in range(h):
        lo, hi = head * d, (head + 1) * d
        for i in range(m):
            raw = [sum(compat[i][x] * keys[j][x] for x in range(lo, hi)) / math.sqrt(d)
                   for j in range(m)]
            mx = max(raw)
            exps = [math.exp(val - mx) for val in raw]
            total = sum(exps)
            for x in range(lo, hi):
                attended[i][x] = sum(exps[j] / total * values[j][x] for j in range(m))

    def highway(prefix, x_rows):
        gw = [list(map(float, row)) for row in p[f"{prefix}_gate_w"]]
        gb = list(map(float, p[f"{prefix}_gate_b"]))
        tw = [list(map(float, row)) for row in p[f"{prefix}_transform_w"]]
        tb = list(map(float, p[f"{prefix}_transform_b"]))
        out = []
        for row in x_rows:
            gate = [1.0 / (1.0 + math.exp(-(sum(row[i] * gw[i][c] for i in range(v)) + gb[c])))
                    for c in range(v)]
            trans = [max(sum(row[i] * tw[i][c] for i in range(v)) + tb[c], 0.0)
                     for c in range(v)]
            out.append([g * t + (1 - g) * x for g, t, x in zip(gate, trans, row)])
        return out

    def pool(g_rows, alpha_rows, real_positions):
        scores = [max(g_rows[i][j] for i in range(len(g_rows))) for j in range(n)]
        masked = [scores[j] if j < real_positions else -math.inf for j in range(n)]
        mx = max(masked)
        exps = [math.exp(sc - mx) for sc in masked]
        total = sum(exps)
        w = [e / total for e in exps]
        return [sum(w[j] * alpha_rows[j][c] for j in range(n)) for c in range(v)]

    alpha_cat = highway("highway_category", emb)
    alpha_int = highway("highway_intent", emb)
    z1 = pool(compat and attended[:3], alpha_cat, len(ids))
    z2 = pool(attended[3:], alpha_int, len(ids))
    s_cat = [sum(z1[i] * p["category_head_w"][i][c] for i in range(v))
             + p["category_head_b"][c] for c in range(3)]
    s_int = [sum(z2[i] * p["intent_head_w"][i][c] for i in range(v))
             + p["intent_head_b"][c] for c in range(2)]

    assert np.allclose(trace.category_logits, s_cat, rtol=1e-9, atol=1e-12)
    assert np.allclose(trace.intent_logits, s_int, rtol=1e-9, atol=1e-12)


def test_forward_training_requires_rng_when_dropout_active():
    model = tiny_model(dropout=0.5)
    with pytest.raises(ConfigError):
        model.forward(("t0",), training=True)


def test_category_permutation_equivariance():
    model = tiny_model(seed=9)
    perm = [2, 0, 1]
    permuted = tiny_model(seed=9)
    p, q = model.store.params, permuted.store.params
    q["category_embeddings"][...] = p["category_embeddings"][perm]
    q["category_head_w"][...] = p["category_head_w"][:, perm]
    q["category_head_b"][...] = p["category_head_b"][perm]
    tokens = ("t2", "t6", "t11")
    base = model.forward(tokens)
    out = permuted.forward(tokens)
    assert np.allclose(out.category_logits, base.category_logits[perm], atol=1e-12)
    assert np.allclose(out.intent_logits, base.intent_logits, atol=1e-12)


# ------------------------------------------------------------------ losses


def test_category_cross_entropy_at_zero_logit():
    assert category_cross_entropy([0.0], [1.0]) == pytest.approx(math.log(2), rel=1e-12)


def test_category_cross_entropy_saturated_is_tiny():
    loss = category_cross_entropy([20.0, -20.0, 20.0], [1.0, 0.0, 1.0])
    assert loss < 1e-6


def test_category_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(0)
    s = rng.normal(size=4)
    t = np.array([1.0, 0.0, 1.0, 0.0])
    direct = -sum(
        ti * math.log(1 / (1 + math.exp(-si))) + (1 - ti) * math.log(1 - 1 / (1 + math.exp(-si)))
        for si, ti in zip(s, t)
    )
    assert category_cross_entropy(s, t) == pytest.approx(direct, rel=1e-12)


def test_intent_cross_entropy_uniform_logits():
    assert intent_cross_entropy([0.0, 0.0], 1) == pytest.approx(math.log(2), rel=1e-12)


def test_intent_cross_entropy_saturated():
    assert intent_cross_entropy([20.0, -20.0], 0) < 1e-6


def test_intent_cross_entropy_matches_direct_formula():
    s = [1.0, -0.5]
    expected = -math.log(math.exp(-0.5) / (math.exp(1.0) + math.exp(-0.5)))
    assert intent_cross_entropy(s, 1) == pytest.approx(expected, rel=1e-12)


def test_focal_reduces_to_cross_entropy_at_gamma_zero():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        s = rng.normal(scale=3.0, size=k)
        t = (rng.random(k) > 0.5).astype(float)
        assert abs(category_focal_loss(s, t, 0.0, 1.0) - category_cross_entropy(s, t)) <= 1e-12


def test_focal_well_classified_contribution_is_small():
    # p_t = 0.99 with gamma 1.5: (0.01)^1.5 * |ln 0.99| bound.
    s = math.log(0.99 / 0.01)
    loss = category_focal_loss([s], [1.0], 1.5, 1.0)
    assert loss < 0.001


def test_focal_hand_computed_value():
    expected = 0.5**1.5 * math.log(2.0)
    assert category_focal_loss([0.0], [1.0], 1.5, 1.0) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(0.2451, abs=1e-4)


@given(st.floats(min_value=0.05, max_value=8.0), st.floats(min_value=0.02, max_value=4.0))
def test_focal_downweights_well_classified(logit, gamma):
    # Correctly classified (p_t > 0.5) positive example: focal < plain CE.
    focal = category_focal_loss([logit], [1.0], gamma, 1.0)
    plain = category_cross_entropy([logit], [1.0])
    assert focal < plain


def test_focal_alpha_scales_per_class():
    s = np.array([0.3, -0.4])
    t = np.array([1.0, 0.0])
    base = category_focal_loss(s, t, 1.5, np.array([1.0, 1.0]))
    weighted = category_focal_loss(s, t, 1.5, np.array([2.0, 1.0]))
    single = category_focal_loss(s[:1], t[:1], 1.5, 1.0)
    assert weighted == pytest.approx(base + single, rel=1e-12)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    s = rng.normal(size=5)
    t = (rng.random(5) > 0.5).astype(float)
    alpha = rng.uniform(0.5, 2.0, size=5)
    h = 1e-6
    for loss, grad, args in (
        (category_cross_entropy, category_cross_entropy_grad, (t,)),
        (category_focal_loss, category_focal_loss_grad, (t, 1.5, alpha)),
    ):
        analytic = grad(s, *args)
        for i in range(5):
            sp, sm = s.copy(), s.copy()
            sp[i] += h
            sm[i] -= h
            fd = (loss(sp, *args) - loss(sm, *args)) / (2 * h)
            assert analytic[i] == pytest.approx(fd, abs=1e-7)
    analytic = intent_cross_entropy_grad(s[:2], 1)
    for i in range(2):
        sp, sm = s[:2].copy(), s[:2].copy()
        sp[i] += h
        sm[i] -= h
        fd = (intent_cross_entropy(sp, 1) - intent_cross_entropy(sm, 1)) / (2 * h)
        assert analytic[i] == pytest.approx(fd, abs=1e-7)


def test_joint_loss_contract():
    assert joint_loss(0.4, 0.8, 0.5, 0.5) == pytest.approx(0.6)
    assert joint_loss(0.4, 123.0, 1.0, 0.0) == pytest.approx(0.4)
    with pytest.raises(ConfigError):
        joint_loss(1.0, 1.0, 0.0, 0.0)


# --------------------------------------------------------------- gradients


def test_full_model_gradient_check():
    # Tiny instance: vocab 12, V=4, n=3, |C|=2, |U|=2.
    tokens = [f"t{i}" for i in range(12)]
    cfg = ModelConfig(vocab_size=12, num_categories=2, embed_dim=4, query_len=3,
                      heads=3, gamma=1.5, dropout=0.0)
    model = JointMap(cfg, Vocabulary(tokens), seed=3)
    batch = [
        (("t0", "t3", "t5"), 0, np.array([1.0, 0.0])),
        (("t1", "t2"), 1, np.zeros(2)),
        (("t8", "zzz", "t9"), 0, np.array([0.0, 1.0])),
    ]

    def closure():
        return sum(
            model.loss_and_grad(toks, intent, targets, training=False)["total"]
            for toks, intent, targets in batch
        )

    report = check_gradients(closure, model.store, tolerance=1e-4, step=1e-4)
    assert report.passed, report.errors


# ---------------------------------------------------------------- training


def _toy_dataset(n_commercial=12, n_noncommercial=6):
    records = []
    for i in range(n_commercial):
        records.append(
            Record(f"r{i}", f"q{i}", (f"t{i % 10}", f"t{(i + 3) % 10}"), COMMERCIAL,
                   frozenset({i % 3}), split="train")
        )
    for i in range(n_noncommercial):
        j = n_commercial + i
        records.append(
            Record(f"r{j}", f"q{j}", (f"t{(i + 5) % 10}",), NONCOMMERCIAL,
                   frozenset(), split="train" if i % 2 == 0 else "val")
        )
    for i in range(3):
        records.append(
            Record(f"v{i}", f"qv{i}", (f"t{i}", f"t{i + 1}"), COMMERCIAL,
                   frozenset({i}), split="val")
        )
    return LabeledDataset(records)


def _toy_model(seed=0, **overrides):
    tokens = [f"t{i}" for i in range(10)]
    base = dict(vocab_size=10, num_categories=3, embed_dim=6, query_len=4,
                heads=2, dropout=0.2)
    base.update(overrides)
    return JointMap(ModelConfig(**base), Vocabulary(tokens), seed=seed)


def test_train_lr_zero_leaves_parameters_unchanged():
    model = _toy_model()
    before = model.store.copy_params()
    train_model(model, _toy_dataset(), epochs=1, batch_size=4, lr=0.0, seed=0)
    for name, param in model.store.params.items():
        assert np.array_equal(param, before[name]), name


def test_train_single_step_decreases_loss():
    model = _toy_model(dropout=0.0)
    ds = _toy_dataset()
    record = ds.split("train")[0]
    targets = np.zeros(3)
    for c in record.categories:
        targets[c] = 1.0
    before = model.loss_and_grad(record.tokens, 0, targets, training=False,
                                 accumulate=False)["total"]
    train_model(model, LabeledDataset([record]), epochs=1, batch_size=1, lr=0.01, seed=0)
    after = model.loss_and_grad(record.tokens, 0, targets, training=False,
                                accumulate=False)["total"]
    assert after < before


def test_train_bit_reproducible_under_seed():
    reports = []
    params = []
    for _ in range(2):
        model = _toy_model(seed=4)
        report = train_model(model, _toy_dataset(), epochs=3, batch_size=4, lr=0.005, seed=11)
        reports.append([e.train_loss for e in report.epochs])
        params.append({k: v.tobytes() for k, v in model.store.params.items()})
    assert reports[0] == reports[1]
    assert params[0] == params[1]


def test_train_restores_best_validation_epoch():
    model = _toy_model(seed=2)
    report = train_model(model, _toy_dataset(), epochs=4, batch_size=4, lr=0.01, seed=3)
    assert 1 <= report.best_epoch <= 4
    assert len(report.epochs) == 4
    line = report.epochs[0].as_json()
    assert '"epoch": 1' in line and "val_macro_f1_intent" in line


def test_train_empty_train_split_rejected():
    model = _toy_model()
    ds = LabeledDataset([Record("r0", "q0", ("t0",), COMMERCIAL, frozenset({0}), split="val")])
    with pytest.raises(ConfigError):
        train_model(model, ds, epochs=1)


def test_train_rejects_out_of_range_category_ids():
    model = _toy_model()
    ds = LabeledDataset(
        [Record("r0", "q0", ("t0",), COMMERCIAL, frozenset({99}), split="train")]
    )
    with pytest.raises(ConfigError):
        train_model(model, ds, epochs=1)


# ----------------------------------------------------------------- predict


def test_predict_noncommercial_returns_empty_category_set():
    model = tiny_model()
    model.store.params["intent_head_b"][...] = np.array([-5.0, 5.0])
    model.store.params["category_head_b"][...] = 10.0
    pred = model.predict(("t0", "t1"))
    assert pred.intent == NONCOMMERCIAL
    assert pred.categories == frozenset()


def test_predict_threshold_one_yields_no_categories():
    model = tiny_model()
    model.store.params["intent_head_b"][...] = np.array([5.0, -5.0])
    pred = model.predict(("t0", "t1"), threshold=1.0)
    assert pred.intent == COMMERCIAL
    assert pred.categories == frozenset()


def test_predict_confident_categories_cross_threshold():
    model = tiny_model()
    model.store.params["intent_head_b"][...] = np.array([5.0, -5.0])
    model.store.params["category_head_b"][...] = np.array([8.0, -8.0, -8.0])
    pred = model.predict(("t0",))
    assert 0 in pred.categories


# ------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = tiny_model(seed=13, dropout=0.3, gamma=1.2, alpha=[1.0, 2.0, 0.5])
    path = tmp_path / "model.jmap"
    model.save(path)
    loaded = JointMap.load(path)
    for field_name in ("vocab_size", "embed_dim", "query_len", "num_categories",
                       "gamma", "beta_category", "beta_intent", "dropout",
                       "category_threshold"):
        assert getattr(loaded.config, field_name) == getattr(model.config, field_name)
    assert loaded.config.resolved_heads() == model.config.resolved_heads()
    assert np.array_equal(loaded.alpha, model.alpha)
    assert loaded.vocabulary.tokens == model.vocabulary.tokens
    for name, param in model.store.params.items():
        assert np.array_equal(loaded.store.params[name], param), name
    tokens = ("t0", "t5", "oov")
    a = model.forward(tokens)
    b = loaded.forward(tokens)
    assert np.array_equal(a.category_logits, b.category_logits)
    assert np.array_equal(a.intent_logits, b.intent_logits)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.jmap"
    path.write_bytes(b"WRONG" + b"\x00" * 64)
    with pytest.raises(ParseError):
        JointMap.load(path)


def test_checkpoint_file_starts_with_magic(tmp_path):
    model = tiny_model()
    path = tmp_path / "model.jmap"
    model.save(path)
    assert path.read_bytes().startswith(b"JMAP1")


# ------------------------------------------------------ external embeddings


def test_load_pretrained_embeddings(tmp_path):
    model = tiny_model()
    dim = model.config.embed_dim
    lines = ["t3 " + " ".join(str(0.5 * i) for i in range(dim)),
             "unknown-token " + " ".join("0.0" for _ in range(dim))]
    path = tmp_path / "vectors.txt"
    path.write_text("\n".join(lines))
    loaded = load_pretrained_embeddings(model, path)
    assert loaded == 1
    row = model.vocabulary.encode(["t3"])[0]
    assert np.allclose(model.store.params["word_embeddings"][row],
                       [0.5 * i for i in range(dim)])


def test_load_pretrained_embeddings_dim_mismatch(tmp_path):
    model = tiny_model()
    path = tmp_path / "vectors.txt"
    path.write_text("t3 1.0 2.0")
    with pytest.raises(ParseError):
        load_pretrained_embeddings(model, path)
