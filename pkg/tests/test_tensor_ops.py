"""Forward/backward contracts of the autodiff ops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimfit import tensor as T
from slimfit.errors import ShapeError, SlimfitError
from slimfit.tensor import CompressionConfig, Parameter, Tensor


def scalarize(y):
    flat = T.reshape(y, (1, int(np.prod(y.shape))))
    ones = Tensor(np.ones((flat.shape[1], 1), dtype=np.float64))
    return T.matmul(flat, ones)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]], dtype=np.float32))
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_hand_product(self):
        out = T.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
        assert out.data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_records_both_inputs(self):
        with T.record(None) as tape:
            T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
        assert len(tape.nodes[-1].saved) == 2


class TestGelu:
    def test_zero(self):
        assert float(T.gelu(Tensor(np.array([0.0]))).data[0]) == 0.0

    def test_asymptote(self):
        out = float(T.gelu(Tensor(np.array([10.0]))).data[0])
        assert abs(out - 10.0) / 10.0 < 1e-3

    def test_at_one(self):
        # tanh-approximation formula evaluated independently
        out = float(T.gelu(Tensor(np.array([1.0], dtype=np.float64))).data[0])
        assert out == pytest.approx(0.8411919906082768, rel=1e-9)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor(np.array([0.0, 0.0]))).data
        assert out.tolist() == [0.5, 0.5]

    def test_stability_no_overflow(self):
        out = T.softmax(Tensor(np.array([1000.0, 0.0]))).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-20)

    def test_hand_values(self):
        out = T.softmax(Tensor(np.log(np.array([1.0, 2.0, 3.0])))).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-6)

    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=8))
    @settings(max_examples=100)
    def test_rows_sum_to_one(self, row):
        out = T.softmax(Tensor(np.array(row, dtype=np.float32))).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-6

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor(np.zeros((2, 2))), axis=5)


def _ln_params(H, gamma=None, beta=None):
    g = Parameter(np.ones(H, dtype=np.float64) if gamma is None else np.asarray(gamma, dtype=np.float64), 0)
    b = Parameter(np.zeros(H, dtype=np.float64) if beta is None else np.asarray(beta, dtype=np.float64), 0)
    return g, b


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        g, b = _ln_params(4)
        out = T.layernorm(Tensor(np.array([[5.0, 5.0, 5.0, 5.0]])), g, b)
        assert np.array_equal(out.data, np.zeros((1, 4), dtype=np.float32))

    def test_hand_standardization(self):
        g, b = _ln_params(2)
        out = T.layernorm(Tensor(np.array([[1.0, 3.0]], dtype=np.float64)), g, b, eps=0.0)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_affine_of_standardized(self):
        g, b = _ln_params(2, gamma=[2.0, 2.0], beta=[1.0, 1.0])
        out = T.layernorm(Tensor(np.array([[1.0, 3.0]], dtype=np.float64)), g, b, eps=0.0)
        np.testing.assert_allclose(out.data, [[-1.0, 3.0]], atol=1e-12)

    def test_zero_upstream_gives_zero_grads(self):
        g, b = _ln_params(4)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 4)))
        with T.record(None):
            out = T.layernorm(x, g, b)
            loss = T.scale(scalarize(out), 0.0)
            T.backward(loss)
        assert np.allclose(x.grad, 0)
        assert np.allclose(g.grad, 0)
        assert np.allclose(b.grad, 0)

    def test_frozen_skips_affine_grads(self):
        g, b = _ln_params(4)
        g.update_enabled = b.update_enabled = False
        x = Tensor(np.random.default_rng(0).standard_normal((2, 4)))
        with T.record(None):
            loss = scalarize(T.layernorm(x, g, b))
            T.backward(loss)
        assert g.grad is None and b.grad is None
        assert x.grad is not None

    def test_frozen_keepall_prune_matches_active_input_grad(self):
        rng = np.random.default_rng(1)
        xdat = rng.standard_normal((3, 8)).astype(np.float32)

        def input_grad(frozen, compression):
            g, b = _ln_params(8)
            g.data = g.data.astype(np.float32)
            b.data = b.data.astype(np.float32)
            g.update_enabled = b.update_enabled = not frozen
            x = Tensor(xdat.copy())
            with T.record(compression):
                out = T.layernorm(x, g, b)
                flat = T.reshape(out, (1, 24))
                loss = T.matmul(flat, Tensor(np.ones((24, 1), dtype=np.float32)))
                T.backward(loss)
            return x.grad

        active = input_grad(False, None)
        frozen = input_grad(True, CompressionConfig(prune_layernorm=True, keep_frac=1.0))
        assert np.array_equal(active, frozen)


class TestBackward:
    def test_single_linear_weight_grad_is_xt_g(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
        w = Parameter(rng.standard_normal((4, 2)).astype(np.float32), 0)
        with T.record(None):
            y = T.linear(x, w)
            loss = T.scale(scalarize(y), 1.0)
            T.backward(loss)
        ghat = np.ones((3, 2), dtype=np.float32)
        np.testing.assert_allclose(w.grad, x.data.T @ ghat, rtol=1e-6)

    def test_three_layer_chain_frozen_middle(self):
        rng = np.random.default_rng(5)
        xdat = rng.standard_normal((4, 3)).astype(np.float32)

        def run(freeze_middle):
            ws = [Parameter(rng_copy[i].copy(), i) for i in range(3)]
            bs = [Parameter(np.zeros(3, dtype=np.float32), i) for i in range(3)]
            if freeze_middle:
                ws[1].update_enabled = bs[1].update_enabled = False
            x = Tensor(xdat.copy())
            with T.record(None):
                h = x
                for w, b in zip(ws, bs):
                    h = T.linear(h, w, b)
                loss = scalarize_f32(h)
                T.backward(loss)
            return ws, bs, loss.data.item()

        rng_copy = [rng.standard_normal((3, 3)).astype(np.float32) for _ in range(3)]

        def scalarize_f32(y):
            flat = T.reshape(y, (1, int(np.prod(y.shape))))
            return T.matmul(flat, Tensor(np.ones((flat.shape[1], 1), dtype=np.float32)))

        ws_a, bs_a, loss_a = run(False)
        ws_f, bs_f, loss_f = run(True)
        assert loss_a == loss_f
        assert np.array_equal(ws_a[0].grad, ws_f[0].grad)
        assert np.array_equal(ws_a[2].grad, ws_f[2].grad)
        assert np.array_equal(bs_a[0].grad, bs_f[0].grad)
        assert np.array_equal(bs_a[2].grad, bs_f[2].grad)
        assert ws_f[1].grad is None and bs_f[1].grad is None

    def test_all_frozen_traversal_completes(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
        w = Parameter(rng.standard_normal((3, 3)).astype(np.float32), 0)
        w.update_enabled = False
        with T.record(None):
            loss = scalarize(T.linear(x, w))
            T.backward(loss)
        assert w.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)))
        with T.record(None):
            y = T.scale(x, 2.0)
            with pytest.raises(SlimfitError, match="scalar"):
                T.backward(y)


class TestCompressionTransparency:
    def test_forward_bit_identical_with_codecs(self):
        rng = np.random.default_rng(2)
        xdat = rng.standard_normal((2, 8)).astype(np.float32)

        def forward(compression):
            x = Tensor(xdat.copy())
            with T.record(compression):
                return T.gelu(x).data.copy()

        assert np.array_equal(forward(None), forward(CompressionConfig.all_on()))

    def test_gelu_backward_uses_decompressed_cache(self):
        rng = np.random.default_rng(3)
        xdat = rng.standard_normal((2, 8)).astype(np.float32)

        def grad(compression):
            x = Tensor(xdat.copy())
            with T.record(compression):
                flat = T.reshape(T.gelu(x), (1, 16))
                loss = T.matmul(flat, Tensor(np.ones((16, 1), dtype=np.float32)))
                T.backward(loss)
            return x.grad

        exact = grad(None)
        lossy = grad(CompressionConfig(quant_gelu=True))
        assert not np.array_equal(exact, lossy)   # cache was really quantized
        assert np.abs(exact - lossy).max() < 0.5  # but close


class TestSharedSoftmaxBuffer:
    def test_buffer_shared_once(self):
        rng = np.random.default_rng(0)
        with T.record(None) as tape:
            p = T.softmax(Tensor(rng.standard_normal((2, 3, 3)).astype(np.float32)),
                          axis=-1, compress="matsoft8")
            T.matmul(p, Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32)),
                     compress="matsoft8")
        names = [name for name, _, _ in tape.saved_records()]
        probs = [n for n in names if n.endswith(".probs")]
        assert len(probs) == 1  # one buffer despite two consumers


class TestPlumbingOps:
    def test_add_broadcast_grads(self):
        a = Tensor(np.ones((2, 3), dtype=np.float32))
        b = Tensor(np.ones(3, dtype=np.float32))
        with T.record(None):
            loss = scalarize(T.add(a, b))
            T.backward(loss)
        assert a.grad.shape == (2, 3)
        assert b.grad.shape == (3,)
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])

    def test_embedding_rejects_bad_ids(self):
        table = Parameter(np.zeros((4, 2), dtype=np.float32), 0)
        with pytest.raises(ShapeError):
            T.embedding(table, np.array([[5]]))

    def test_no_grad_records_nothing(self):
        with T.record(None) as tape:
            with T.no_grad():
                T.gelu(Tensor(np.ones(3)))
        assert tape.nodes == []
