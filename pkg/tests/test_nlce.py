import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import scalar_oracle as so
from nlcen import autograd as ag
from nlcen import nlce as nl
from nlcen.autograd import ShapeError, Tensor
from nlcen.gradcheck import grad_check
from nlcen.nlce import NLCE


def make_block(C, K=2, seed=0, embed=None, code_dim=None, nonzero_wz=True, **kw):
    rng = np.random.default_rng(seed)
    p = NLCE(rng, C, embed=embed, codewords=K, code_dim=code_dim, **kw)
    if nonzero_wz and p.use_nonlocal:
        p.w_z.data[:] = rng.normal(scale=0.5, size=p.w_z.shape)
    return p


def positions(x):
    """(1, C, H, W) array -> list of N feature vectors in row-major order."""
    _, C, H, W = x.shape
    return [list(x[0, :, h, w]) for h in range(H) for w in range(W)]


def oracle_params(p):
    d = {k: getattr(p, k).data.tolist() for k in ("w_theta", "w_phi", "w_g", "w_z", "proj", "codebook", "smoothing", "w_gamma")}
    d["bn_weight"] = p.bn.weight.data.tolist()
    d["bn_bias"] = p.bn.bias.data.tolist()
    return d


def rand_x(rng, C, H, W, B=1, scale=1.0):
    return rng.normal(scale=scale, size=(B, C, H, W))


class TestPairwiseAttention:
    def test_single_position(self):
        p = make_block(3)
        a = nl.pairwise_attention(Tensor(np.ones((1, 3, 1, 1))), p)
        np.testing.assert_array_equal(a.data, [[[1.0]]])

    def test_identical_features_give_uniform_rows(self):
        p = make_block(3)
        x = np.broadcast_to(np.array([0.3, -1.0, 2.0])[None, :, None, None], (1, 3, 2, 3)).copy()
        a = nl.pairwise_attention(Tensor(x), p).data
        np.testing.assert_allclose(a, 1 / 6, rtol=0, atol=1e-15)

    def test_against_brute_force(self):
        rng = np.random.default_rng(1)
        p = make_block(2, seed=1)
        x = rand_x(rng, 2, 1, 3)
        a = nl.pairwise_attention(Tensor(x), p).data[0]
        ref = so.attention(positions(x), p.w_theta.data.tolist(), p.w_phi.data.tolist())
        np.testing.assert_allclose(a, ref, rtol=1e-13, atol=1e-15)


class TestNonLocalResponse:
    def test_single_position_is_wg_x(self):
        p = make_block(4)
        x = np.arange(4.0).reshape(1, 4, 1, 1)
        y = nl.non_local_response(Tensor(x), p).data[0, 0]
        np.testing.assert_allclose(y, p.w_g.data @ np.arange(4.0), rtol=1e-14)

    def test_identical_inputs_identical_outputs(self):
        p = make_block(3)
        x = np.broadcast_to(np.array([1.0, 2.0, -1.0])[None, :, None, None], (1, 3, 3, 3)).copy()
        y = nl.non_local_response(Tensor(x), p).data[0]
        np.testing.assert_allclose(y - y[0], 0.0, atol=1e-14)

    def test_against_brute_force(self):
        rng = np.random.default_rng(2)
        p = make_block(2, seed=2)
        x = rand_x(rng, 2, 3, 1)
        y = nl.non_local_response(Tensor(x), p).data[0]
        ref = so.non_local(positions(x), p.w_theta.data.tolist(), p.w_phi.data.tolist(), p.w_g.data.tolist())
        np.testing.assert_allclose(y, ref, rtol=1e-13, atol=1e-15)


class TestEnhance:
    def test_zero_wz_is_identity(self):
        rng = np.random.default_rng(0)
        p = make_block(3, nonzero_wz=False)
        x = rand_x(rng, 3, 2, 2)
        fz = nl.enhance(Tensor(x), nl.non_local_response(Tensor(x), p), p)
        np.testing.assert_array_equal(fz.data, x)

    def test_zero_input_gives_zero(self):
        p = make_block(3)
        x = Tensor(np.zeros((1, 3, 2, 2)))
        np.testing.assert_array_equal(nl.enhance(x, nl.non_local_response(x, p), p).data, 0.0)

    def test_against_brute_force(self):
        rng = np.random.default_rng(3)
        p = make_block(3, seed=3)
        x = rand_x(rng, 3, 2, 2)
        fz = nl.enhance(Tensor(x), nl.non_local_response(Tensor(x), p), p).data
        xs = positions(x)
        ys = so.non_local(xs, p.w_theta.data.tolist(), p.w_phi.data.tolist(), p.w_g.data.tolist())
        ref = so.enhance(xs, ys, p.w_z.data.tolist())
        np.testing.assert_allclose(positions(fz), ref, rtol=1e-13, atol=1e-14)


class TestEncodeContext:
    def test_single_codeword_weight_is_one(self):
        rng = np.random.default_rng(4)
        p = make_block(3, K=1, seed=4)
        x = rand_x(rng, 3, 2, 2)
        zp = ag.matmul(nl._positions(Tensor(x)), ag.transpose(p.proj, (1, 0)))
        np.testing.assert_array_equal(nl.assignment_weights(zp, p).data, 1.0)
        ek = nl.aggregate_residuals(Tensor(x), p).data[0, 0]
        np.testing.assert_allclose(ek, (zp.data[0] - p.codebook.data[0]).sum(axis=0), rtol=1e-13)

    def test_zero_residual(self):
        # proj = identity and all projected features equal to the single codeword
        p = make_block(2, K=1, code_dim=2)
        p.proj.data[:] = np.eye(2)
        d = np.array([0.4, -0.2])
        p.codebook.data[0] = d
        p.bn.eval()
        p.bn.running_mean[:] = [0.3, -0.5]
        x = np.broadcast_to(d[None, :, None, None], (1, 2, 2, 2)).copy()
        np.testing.assert_array_equal(nl.aggregate_residuals(Tensor(x), p).data, 0.0)
        e = nl.encode_context(Tensor(x), p).data[0]
        expected = np.maximum(0.0, (0.0 - p.bn.running_mean) / np.sqrt(1.0 + 1e-5))
        np.testing.assert_allclose(e, expected, rtol=1e-15)

    @pytest.mark.parametrize("training", [True, False])
    def test_against_brute_force(self, training):
        rng = np.random.default_rng(5)
        p = make_block(3, K=2, code_dim=2, seed=5)
        p.bn.weight.data[:] = [1.3, 0.7]
        p.bn.bias.data[:] = [0.2, -0.1]
        p.bn.running_mean[:] = [0.1, -0.3]
        p.bn.running_var[:] = [0.5, 2.0]
        running = None if training else (p.bn.running_mean.tolist(), p.bn.running_var.tolist())
        p.train(training)
        fz = rand_x(rng, 3, 3, 1)  # N = 3
        e = nl.encode_context(Tensor(fz), p).data[0]
        ref, _ = so.context(positions(fz), p.proj.data.tolist(), p.codebook.data.tolist(),
                            p.smoothing.data.tolist(), p.bn.weight.data.tolist(), p.bn.bias.data.tolist(),
                            running=running)
        np.testing.assert_allclose(e, ref, rtol=1e-12, atol=1e-14)


class TestChannelAttention:
    def test_zero_weights(self):
        p = make_block(4)
        p.w_gamma.data[:] = 0
        g = nl.channel_attention(Tensor(np.array([[1.0, -2.0]])), p)
        np.testing.assert_array_equal(g.data, 0.5)

    def test_zero_context(self):
        p = make_block(4)
        g = nl.channel_attention(Tensor(np.zeros((1, p.code_dim))), p)
        np.testing.assert_array_equal(g.data, 0.5)

    def test_against_scalar_sigmoid(self):
        p = make_block(4, seed=6)
        e = np.array([0.7, -1.1])
        g = nl.channel_attention(Tensor(e[None]), p).data[0]
        np.testing.assert_allclose(g, so.gate(e.tolist(), p.w_gamma.data.tolist()), rtol=1e-14)
        assert np.all((g > 0) & (g < 1))


class TestForward:
    def test_gate_of_ones_returns_enhanced(self, monkeypatch):
        rng = np.random.default_rng(7)
        p = make_block(3, seed=7)
        x = Tensor(rand_x(rng, 3, 2, 2))
        monkeypatch.setattr(nl, "channel_attention", lambda e, p: Tensor(np.ones((e.shape[0], p.channels))))
        fz = nl.enhance(x, nl.non_local_response(x, p), p)
        np.testing.assert_array_equal(nl.nlce_forward(x, p).data, fz.data)

    def test_zero_input(self):
        p = make_block(3)
        np.testing.assert_array_equal(nl.nlce_forward(Tensor(np.zeros((1, 3, 2, 2))), p).data, 0.0)

    @pytest.mark.parametrize("training", [True, False])
    def test_end_to_end_oracle(self, training):
        rng = np.random.default_rng(8)
        p = make_block(3, K=2, seed=8)
        p.bn.running_mean[:] = rng.normal(size=p.code_dim)
        p.bn.running_var[:] = rng.uniform(0.5, 2.0, size=p.code_dim)
        p.train(training)
        x = rand_x(rng, 3, 2, 2)  # N = 4
        out = nl.nlce_forward(Tensor(x), p).data
        running = None if training else (p.bn.running_mean.tolist(), p.bn.running_var.tolist())
        ref = so.nlce(positions(x), oracle_params(p), running=running)
        np.testing.assert_allclose(positions(out), ref, rtol=1e-12, atol=1e-14)

    def test_half_identity_when_projections_zero(self):
        rng = np.random.default_rng(9)
        p = make_block(5, nonzero_wz=False)
        p.w_gamma.data[:] = 0
        x = rand_x(rng, 5, 3, 4, B=2)
        np.testing.assert_array_equal(nl.nlce_forward(Tensor(x), p).data, 0.5 * x)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            nl.nlce_forward(Tensor(np.zeros((1, 2, 2, 2))), make_block(3))

    def test_no_codewords_rejected(self):
        with pytest.raises(ValueError):
            NLCE(np.random.default_rng(0), 3, codewords=0)

    def test_defaults(self):
        p = NLCE(np.random.default_rng(0), 16)
        assert (p.embed, p.code_dim, p.codewords) == (8, 8, 32)
        assert np.all(p.w_z.data == 0)
        assert np.all((p.smoothing.data > 0) & (p.smoothing.data <= 1))
        assert np.all(np.abs(p.codebook.data) <= 1 / np.sqrt(32))


class TestProperties:
    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            C, H, W = rng.integers(1, 7, size=3)
            p = make_block(int(C), seed=int(rng.integers(1 << 30)))
            a = nl.pairwise_attention(Tensor(rand_x(rng, C, H, W, scale=3.0)), p).data
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_assignment_weights_sum_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            C, H, W, K = rng.integers(1, 7, size=4)
            p = make_block(int(C), K=int(K), seed=int(rng.integers(1 << 30)))
            zp = ag.matmul(nl._positions(Tensor(rand_x(rng, C, H, W, scale=3.0))), ag.transpose(p.proj, (1, 0)))
            np.testing.assert_allclose(nl.assignment_weights(zp, p).data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(H=st.integers(1, 6), W=st.integers(1, 6), C=st.integers(1, 6), K=st.integers(1, 5), B=st.integers(1, 3))
    def test_shape_preserved(self, H, W, C, K, B):
        p = make_block(C, K=K)
        x = np.random.default_rng(0).normal(size=(B, C, H, W))
        assert nl.nlce_forward(Tensor(x), p).shape == x.shape

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_non_local_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        p = make_block(3, seed=seed)
        x = rand_x(rng, 3, 2, 3)
        perm = rng.permutation(6)
        xf = x.reshape(1, 3, 6)
        xp = xf[:, :, perm].reshape(1, 3, 2, 3)
        y = nl.non_local_response(Tensor(x), p).data[0]
        yp = nl.non_local_response(Tensor(xp), p).data[0]
        np.testing.assert_allclose(yp, y[perm], rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_pass_check(self, seed):
        rng = np.random.default_rng(seed)
        p = make_block(4, K=3, seed=seed)
        x = Tensor(rand_x(rng, 4, 3, 2, B=2), requires_grad=True)
        w = rng.normal(size=x.shape)
        f = lambda: ag.reduce_sum(ag.mul(nl.nlce_forward(x, p), w))
        report = grad_check(f, [x] + p.parameters(), tol=1e-3)
        assert report.passed, str(report)
