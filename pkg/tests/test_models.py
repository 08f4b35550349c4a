import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthzsd.errors import ContractError, ParseError
from synthzsd.models import (
    ClassifierHead,
    CriticParams,
    GeneratorParams,
    SemanticClassifier,
    SemanticTable,
    classifier_forward,
    classifier_logits,
    critic_forward,
    critic_input_grad,
    dump_model_bytes,
    generator_forward,
    init_classifier_head,
    init_critic,
    init_generator,
    init_semantic_classifier,
    init_unseen_rows,
    load_model,
    load_model_bytes,
    save_model,
    semantic_classifier_forward,
)
from synthzsd.numerics import RandomStream, finite_diff_grad, relative_error, softmax


def zero_generator(d=3, D=4, H=5):
    return GeneratorParams(np.zeros((H, 2 * d)), np.zeros(H), np.zeros((D, H)), np.zeros(D))


def zero_critic(d=3, D=4, H=5):
    return CriticParams(np.zeros((H, D + d)), np.zeros(H), np.zeros(H), 0.0, D)


def table(d=4, S=3, U=2, seed=0):
    rs = RandomStream(seed)
    return SemanticTable(range(1, S + 1), [f"s{i}" for i in range(S)], rs.normal((d, S)),
                         range(S + 1, S + U + 1), [f"u{i}" for i in range(U)], rs.normal((d, U)))


class TestSemanticTable:
    def test_normalises_columns(self):
        t = table()
        np.testing.assert_allclose(np.linalg.norm(t.Ws, axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(t.Wu, axis=0), 1.0, atol=1e-12)

    def test_does_not_mutate_input(self):
        Ws = np.array([[3.0], [4.0]])
        SemanticTable([1], ["a"], Ws, [], [], np.zeros((2, 0)))
        np.testing.assert_array_equal(Ws, [[3.0], [4.0]])

    def test_overlapping_ids_rejected(self):
        with pytest.raises(ContractError):
            SemanticTable([1], ["a"], np.ones((2, 1)), [1], ["b"], np.ones((2, 1)))

    def test_background_id_reserved(self):
        with pytest.raises(ContractError):
            SemanticTable([0], ["a"], np.ones((2, 1)), [], [], np.zeros((2, 0)))

    def test_vector_lookup(self):
        t = table()
        np.testing.assert_array_equal(t.vector(2), t.Ws[:, 1])
        np.testing.assert_array_equal(t.vectors([5, 1]), np.stack([t.Wu[:, 1], t.Ws[:, 0]]))
        assert t.is_seen(1) and t.is_unseen(4) and not t.is_seen(4)


class TestGenerator:
    def test_zero_params_give_zero(self):
        np.testing.assert_array_equal(generator_forward(zero_generator(), np.ones(3), np.ones(3)), np.zeros(4))

    def test_output_bias_rectified(self):
        g = zero_generator()
        g = g.with_params({**g.params(), "b2": np.array([-1.0, 0.5, 2.0, -0.1])})
        np.testing.assert_array_equal(generator_forward(g, np.ones(3), -np.ones(3)), [0.0, 0.5, 2.0, 0.0])

    def test_deterministic(self):
        g = init_generator(3, 4, 5, RandomStream(1))
        w, z = np.ones(3), np.arange(3.0)
        assert generator_forward(g, w, z).tobytes() == generator_forward(g, w, z).tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            generator_forward(zero_generator(), np.ones(2), np.ones(3))

    @given(st.integers(0, 2**32), st.floats(-100, 100))
    def test_non_negative(self, seed, scale):
        rs = RandomStream(seed)
        g = init_generator(3, 6, 7, rs)
        out = generator_forward(g, scale * rs.normal((5, 3)), rs.normal((5, 3)))
        assert np.all(out >= 0)

    def test_batch_rows_match_single(self):
        rs = RandomStream(2)
        g = init_generator(3, 4, 5, rs)
        W, Z = rs.normal((6, 3)), rs.normal((6, 3))
        batch = generator_forward(g, W, Z)
        for i in range(6):
            np.testing.assert_allclose(generator_forward(g, W[i], Z[i]), batch[i], rtol=1e-14)


def critic_reference(c, f, w):
    h = np.concatenate([f, w]) @ c.W1.T + c.b1
    h = np.where(h > 0, h, c.slope * h)
    return float(h @ c.w2 + c.b2)


class TestCritic:
    def test_zero_params(self):
        assert critic_forward(zero_critic(), np.ones(4), np.ones(3)) == 0.0

    def test_constant_output_bias(self):
        c = zero_critic()
        c = c.with_params({**c.params(), "b2": np.array(7.0)})
        rs = RandomStream(0)
        for _ in range(3):
            assert critic_forward(c, rs.normal(4), rs.normal(3)) == 7.0

    def test_matches_reference(self):
        rs = RandomStream(4)
        c = init_critic(3, 4, 6, rs)
        c = c.with_params({**c.params(), "b1": rs.normal(6), "b2": np.array(0.3)})
        for _ in range(10):
            f, w = rs.normal(4), rs.normal(3)
            np.testing.assert_allclose(critic_forward(c, f, w), critic_reference(c, f, w), rtol=1e-12)

    def test_input_grad_zero_output_weight(self):
        c = init_critic(3, 4, 5, RandomStream(0))
        c = c.with_params({**c.params(), "w2": np.zeros(5)})
        np.testing.assert_array_equal(critic_input_grad(c, np.ones(4), np.ones(3)), np.zeros(4))

    def test_input_grad_single_unit(self):
        W1 = np.concatenate([np.eye(1, 4) * 1.0 + np.array([[0.0, 0.5, -0.25, 0.0]]), np.zeros((1, 2))], axis=1)
        c = CriticParams(W1, np.array([1.0]), np.array([3.0]), 0.0, 4)
        g = critic_input_grad(c, np.ones(4), np.zeros(2))
        np.testing.assert_allclose(g, 3.0 * W1[0, :4])

    def test_input_grad_finite_difference(self):
        rs = RandomStream(8)
        checked = 0
        while checked < 20:
            c = init_critic(3, 5, 6, rs)
            c = c.with_params({**c.params(), "b1": 0.1 * rs.normal(6)})
            f, w = rs.normal(5), rs.normal(3)
            pre = np.concatenate([f, w]) @ c.W1.T + c.b1
            if np.abs(pre).min() <= 1e-3:
                continue
            num = finite_diff_grad(lambda x: critic_forward(c, x, w), f, 1e-6)
            assert relative_error(critic_input_grad(c, f, w), num) < 1e-4
            checked += 1


class TestClassifierHead:
    def head(self, W, b):
        n = len(b)
        return ClassifierHead(np.asarray(W, float), np.asarray(b, float), np.arange(n), np.ones(n, bool), n - 1, 0)

    def test_identical_rows_uniform(self):
        h = self.head([[1.0, 2.0], [1.0, 2.0]], [0.5, 0.5])
        np.testing.assert_allclose(classifier_forward(h, np.array([3.0, -1.0])), [0.5, 0.5])

    def test_bias_only(self):
        h = self.head(np.zeros((2, 3)), [0.0, 2.0])
        np.testing.assert_allclose(classifier_forward(h, np.ones(3)), [0.119203, 0.880797], atol=1e-6)

    def test_active_rows_equal_masked_renormalisation(self):
        rs = RandomStream(5)
        h = self.head(rs.normal((6, 4)), rs.normal(6))
        f = rs.normal(4)
        rows = np.array([0, 2, 5])
        full = np.exp(classifier_logits(h, f)[0])
        expected = full[rows] / full[rows].sum()
        np.testing.assert_allclose(classifier_forward(h, f, rows), expected, rtol=1e-12)

    def test_uninitialised_rows_rejected(self):
        t = table()
        h = init_classifier_head(t, 5, RandomStream(0))
        assert np.isnan(h.W[h.unseen_rows]).all()
        with pytest.raises(ContractError):
            classifier_forward(h, np.ones(5), h.rows_for("gzsd"))
        classifier_forward(h, np.ones(5), h.rows_for("seen"))
        h2 = init_unseen_rows(h, RandomStream(1))
        classifier_forward(h2, np.ones(5), h2.rows_for("zsd"))
        np.testing.assert_array_equal(h2.W[: 1 + t.S], h.W[: 1 + t.S])

    def test_row_layout(self):
        h = init_classifier_head(table(S=3, U=2), 5, RandomStream(0))
        assert list(h.class_ids) == [0, 1, 2, 3, 4, 5]
        assert list(h.rows_for("zsd")) == [0, 4, 5]
        assert h.row_of(4) == 4
        with pytest.raises(ContractError):
            h.row_of(9)

    @given(st.integers(0, 2**32), st.floats(-1e3, 1e3))
    def test_argmax_shift_invariant(self, seed, shift):
        rs = RandomStream(seed)
        h = self.head(rs.normal((5, 3)), rs.normal(5))
        f = rs.normal(3)
        shifted = h.with_params({"W": h.W, "b": h.b + shift})
        assert np.argmax(classifier_forward(h, f)) == np.argmax(classifier_forward(shifted, f))


class TestSemanticClassifier:
    def test_identity_projection(self):
        sc = SemanticClassifier(np.eye(2), np.zeros(2), np.eye(2), [1, 2])
        np.testing.assert_allclose(semantic_classifier_forward(sc, np.array([3.0, 1.0])),
                                   [0.880797, 0.119203], atol=1e-6)

    def test_bias_only_independent_of_feature(self):
        rs = RandomStream(0)
        sc = SemanticClassifier(np.zeros((3, 4)), rs.normal(3), rs.normal((3, 2)), [1, 2])
        np.testing.assert_array_equal(semantic_classifier_forward(sc, rs.normal(4)),
                                      semantic_classifier_forward(sc, rs.normal(4)))

    def test_swap_is_stateless(self):
        t = table()
        sc = init_semantic_classifier(t, 6, RandomStream(2))
        f = RandomStream(3).normal((4, 6))
        first = semantic_classifier_forward(sc.attach_unseen(t), f)
        semantic_classifier_forward(sc.attach_seen(t), f)
        again = semantic_classifier_forward(sc.attach_seen(t).attach_unseen(t), f)
        assert first.tobytes() == again.tobytes()
        assert first.shape == (4, t.U)

    @given(st.integers(0, 2**32), st.permutations(range(4)))
    def test_column_permutation_equivariance(self, seed, perm):
        rs = RandomStream(seed)
        S = rs.normal((3, 4))
        S /= np.linalg.norm(S, axis=0)
        sc = SemanticClassifier(rs.normal((3, 5)), rs.normal(3), S, [1, 2, 3, 4])
        f = rs.normal(5)
        perm = list(perm)
        permuted = sc.attach(S[:, perm], np.array([1, 2, 3, 4])[perm])
        np.testing.assert_allclose(semantic_classifier_forward(permuted, f),
                                   semantic_classifier_forward(sc, f)[perm], rtol=1e-12)

    def test_matches_formula(self):
        rs = RandomStream(6)
        sc = SemanticClassifier(rs.normal((3, 5)), rs.normal(3), rs.normal((3, 4)), [1, 2, 3, 4])
        f = rs.normal(5)
        np.testing.assert_allclose(semantic_classifier_forward(sc, f),
                                   softmax(sc.semantics.T @ (sc.W_fc @ f + sc.b_fc)), rtol=1e-12)


class TestCheckpoints:
    @pytest.mark.parametrize("make", [
        lambda rs: init_generator(3, 4, 5, rs),
        lambda rs: init_critic(3, 4, 5, rs),
        lambda rs: init_classifier_head(table(), 4, rs),
        lambda rs: init_semantic_classifier(table(), 4, rs),
    ])
    def test_round_trip_bitwise(self, make, tmp_path):
        m = make(RandomStream(0))
        path = tmp_path / "m.model"
        save_model(m, path)
        back = load_model(path)
        assert back == m
        assert dump_model_bytes(back) == dump_model_bytes(m)

    def test_rejects_garbage(self):
        with pytest.raises(ParseError):
            load_model_bytes(b"hello\nend\n")

    def test_rejects_truncated_block(self):
        data = dump_model_bytes(init_generator(2, 3, 4, RandomStream(0)))
        with pytest.raises(ParseError):
            load_model_bytes(data[:-8])
        with pytest.raises(ParseError):
            load_model_bytes(data + b"\0" * 8)
