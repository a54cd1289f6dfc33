import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from oracles import central_difference, max_relative_error, scalar_aam_loss
from picl.encoder import (AAMHead, EncoderModel, LRSchedule, SgdOptimizer, aam_loss, load_model,
                          normalization_backward, save_model, step)
from picl.errors import (CheckpointError, ContractError, DegenerateInputError, DivergenceError,
                         ShapeError)
from picl.linalg import l2_normalize_rows


def small_model(seed=0, sizes=(5, 4, 4, 3)):
    return EncoderModel.init(sizes, np.random.default_rng(seed))


class TestForward:
    def test_zero_weights_surface_degenerate_error(self):
        m = small_model()
        for w in m.weights:
            w[:] = 0.0
        with pytest.raises(DegenerateInputError):
            m.forward(np.ones(5))

    def test_identity_layer_is_plain_normalization(self):
        m = EncoderModel([np.eye(2)], [np.zeros(2)])
        f, _ = m.forward([3.0, 4.0])
        np.testing.assert_allclose(f, [0.6, 0.8], atol=1e-15)

    def test_seeded_init_is_bit_reproducible(self):
        x = np.linspace(-1, 1, 5)
        a = small_model(7).forward(x)[0]
        b = small_model(7).forward(x)[0]
        assert a.tobytes() == b.tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            small_model().forward(np.ones(4))

    def test_batch_matches_rows_and_output_is_unit(self):
        m = small_model(3, (6, 8, 8, 4))
        x = np.random.default_rng(1).normal(size=(10, 6))
        f, _ = m.forward(x)
        for i in range(10):
            np.testing.assert_allclose(m.forward(x[i])[0], f[i], atol=1e-14)
        np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-10)


class TestAAMLoss:
    def test_zero_margin_is_softmax_cross_entropy(self):
        rng = np.random.default_rng(0)
        head = AAMHead(l2_normalize_rows(rng.normal(size=(4, 3))), 32.0, 0.0)
        f = l2_normalize_rows(rng.normal(size=(1, 3)))[0]
        logits = 32.0 * head.weight @ f
        expected = -logits[2] + math.log(np.exp(logits).sum())
        assert aam_loss(head, f, 2)[0] == pytest.approx(expected, rel=1e-12)

    def test_single_class_loss_is_zero(self):
        head = AAMHead(np.array([[1.0, 0.0]]), 32.0, 0.2)
        loss, g, gw = aam_loss(head, np.array([0.6, 0.8]), 0)
        assert loss == 0.0
        assert not np.any(g) and not np.any(gw)

    def test_two_class_spot_value(self):
        head = AAMHead(np.array([[1.0, 0.0], [0.0, 1.0]]), 32.0, 0.2)
        loss = aam_loss(head, np.array([1.0, 0.0]), 0)[0]
        expected = math.log1p(math.exp(-32.0 * math.cos(0.2)))
        assert loss == pytest.approx(expected, rel=1e-9)
        assert loss == pytest.approx(2.4e-14, rel=0.05)

    def test_matches_scalar_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            head = AAMHead(l2_normalize_rows(rng.normal(size=(5, 4))), 32.0,
                           float(rng.uniform(0, 0.5)))
            f = l2_normalize_rows(rng.normal(size=(1, 4)))[0]
            y = int(rng.integers(5))
            assert aam_loss(head, f, y)[0] == pytest.approx(
                scalar_aam_loss(f, y, head.weight, head.scale, head.margin), rel=1e-9, abs=1e-12)

    def test_label_out_of_range(self):
        head = AAMHead(np.eye(3), 32.0, 0.2)
        with pytest.raises(ContractError):
            aam_loss(head, np.array([1.0, 0.0, 0.0]), 3)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.0, 0.49), st.floats(0.0, 0.01), st.integers(0, 999))
    def test_monotone_in_margin(self, cos_y, m, dm, seed):
        rng = np.random.default_rng(seed)
        f = np.array([1.0, 0.0, 0.0])
        other = l2_normalize_rows(rng.normal(size=(3, 3)))
        w_y = np.array([cos_y, math.sqrt(1 - cos_y ** 2), 0.0])
        weight = np.vstack([w_y, other])
        lo = aam_loss(AAMHead(weight, 32.0, m), f, 0)[0]
        hi = aam_loss(AAMHead(weight, 32.0, min(0.5, m + dm)), f, 0)[0]
        assert hi >= lo

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        head = AAMHead(l2_normalize_rows(rng.normal(size=(4, 5))), 32.0, 0.2)
        f = l2_normalize_rows(rng.normal(size=(3, 5)))
        y = np.array([0, 3, 1])
        _, gf, gw = aam_loss(head, f, y)
        nf, nw = central_difference(lambda: aam_loss(head, f, y)[0], [f, head.weight])
        assert max_relative_error([gf, gw], [nf, nw]) < 1e-5


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        m = small_model()
        f, tape = m.forward(np.ones((2, 5)))
        for g in m.backward(tape, np.zeros_like(f)).as_list():
            assert not np.any(g)

    def test_normalization_jacobian_spot_value(self):
        np.testing.assert_allclose(normalization_backward([2.0, 0.0], [0.0, 1.0]), [0.0, 0.5])
        m = EncoderModel([np.eye(2)], [np.zeros(2)])
        _, tape = m.forward(np.array([2.0, 0.0]))
        grads = m.backward(tape, np.array([0.0, 1.0]))
        # dL/db equals dL/du for an identity layer
        np.testing.assert_allclose(grads.biases[0], [0.0, 0.5])

    def test_stale_tape_rejected(self):
        m = small_model()
        f, tape = m.forward(np.ones(5))
        grads = m.backward(tape, np.ones_like(f))
        step(m, grads, SgdOptimizer(LRSchedule(0.1, 0.1, 1)), 0)
        with pytest.raises(ContractError):
            m.backward(tape, np.ones_like(f))
        with pytest.raises(ContractError):
            small_model(1).backward(small_model(2).forward(np.ones(5))[1], np.ones(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_random_encoder_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        p = gradcheck.random_problem(rng)
        upstream = rng.normal(size=(len(p.xs), p.model.embedding_dim))

        def loss():
            return float(np.sum(p.model.forward(p.xs)[0] * upstream))

        f, tape = p.model.forward(p.xs)
        analytic = p.model.backward(tape, upstream).as_list()
        numeric = central_difference(loss, p.model.parameters())
        assert max_relative_error(analytic, numeric) < 1e-5


class TestOptimizer:
    def test_schedule_endpoints_and_monotone(self):
        s = LRSchedule(1e-3, 1e-5, 100)
        assert s(0) == 1e-3
        assert s(100) == 1e-5
        lrs = [s(t) for t in range(101)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))
        assert s(50) == pytest.approx(1e-4, rel=1e-12)

    def test_plain_sgd_arithmetic(self):
        m = EncoderModel([np.array([[1.0]])], [np.array([0.0])])
        grads = m.backward(m.forward(np.array([1.0]))[1], np.array([0.0]))
        grads.weights[0][:] = 0.5
        step(m, grads, SgdOptimizer(LRSchedule(0.1, 0.1, 1)), 0)
        assert m.weights[0][0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_zero_gradients_leave_model_unchanged(self):
        m = small_model()
        before = [p.copy() for p in m.parameters()]
        head = AAMHead.init(3, 3, np.random.default_rng(0))
        hw = head.weight.copy()
        zeros = m.backward(m.forward(np.ones(5))[1], np.zeros(3))
        step(m, zeros, SgdOptimizer(), 0, head=head, head_grad=np.zeros_like(head.weight))
        for a, b in zip(before, m.parameters()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(head.weight, hw, atol=1e-15)

    def test_head_rows_renormalized(self):
        head = AAMHead.init(4, 3, np.random.default_rng(0))
        m = small_model()
        zeros = m.backward(m.forward(np.ones(5))[1], np.zeros(3))
        step(m, zeros, SgdOptimizer(LRSchedule(1.0, 1.0, 1)), 0, head=head,
             head_grad=np.random.default_rng(1).normal(size=head.weight.shape))
        np.testing.assert_allclose(np.linalg.norm(head.weight, axis=1), 1.0, atol=1e-12)

    def test_non_finite_gradients_raise(self):
        m = small_model()
        grads = m.backward(m.forward(np.ones(5))[1], np.ones(3))
        grads.weights[0][0, 0] = np.nan
        with pytest.raises(DivergenceError):
            step(m, grads, SgdOptimizer(), 0)

    def test_momentum_accumulates(self):
        m = EncoderModel([np.array([[1.0]])], [np.array([0.0])])
        opt = SgdOptimizer(LRSchedule(0.1, 0.1, 1), momentum=0.5)
        for t in range(2):
            g = m.backward(m.forward(np.array([1.0]))[1], np.array([0.0]))
            g.weights[0][:] = 1.0
            step(m, g, opt, t)
        # v1 = 1, v2 = 0.5 * 1 + 1 = 1.5
        assert m.weights[0][0, 0] == pytest.approx(1.0 - 0.1 - 0.15, abs=1e-15)


class TestCheckpoint:
    def test_byte_exact_round_trip(self, tmp_path):
        m = small_model(4)
        head = AAMHead.init(3, 3, np.random.default_rng(9), margin=0.1)
        save_model(tmp_path / "a.ckpt", m, head, seed=4)
        m2, h2, header = load_model(tmp_path / "a.ckpt")
        save_model(tmp_path / "b.ckpt", m2, h2, seed=4)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert header["seed"] == 4
        assert header["meta"]["layer_sizes"] == [5, 4, 4, 3]
        for a, b in zip(m.parameters(), m2.parameters()):
            assert a.tobytes() == b.tobytes()
        assert h2.margin == 0.1

    def test_corrupt_files_rejected(self, tmp_path):
        m = small_model()
        save_model(tmp_path / "a.ckpt", m, None)
        blob = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + blob[8:])
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "bad.ckpt")
        (tmp_path / "short.ckpt").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "short.ckpt")
