import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pfin_fed import mathcore as mc
from pfin_fed.mathcore import Graph, ParamSet


def const(x):
    return Graph().constant(x)


def finite_rows(min_d=2, max_d=12):
    return st.integers(1, 5).flatmap(
        lambda n: st.integers(min_d, max_d).flatmap(
            lambda d: arrays(np.float64, (n, d),
                             elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False))))


# ---------------------------------------------------------------- fixtures from the examples

class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(mc.matmul(const(np.eye(2)), a).value, a)

    def test_row_times_column(self):
        g = Graph()
        out = mc.matmul(g.constant([[1.0, 2.0]]), g.constant([[3.0], [4.0]]))
        assert out.value.tolist() == [[11.0]]

    def test_zero_annihilates(self):
        g = Graph()
        out = mc.matmul(g.constant(np.zeros((3, 4))), g.constant(np.random.default_rng(0).normal(size=(4, 2))))
        assert not out.value.any()

    def test_mismatch_names_both_shapes(self):
        g = Graph()
        with pytest.raises(mc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            mc.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = mc.layernorm(const([[5.0, 5.0, 5.0, 5.0]]), np.ones(4), np.zeros(4))
        np.testing.assert_array_equal(out.value, np.zeros((1, 4)))

    def test_already_standardised(self):
        out = mc.layernorm(const([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=0.0)
        np.testing.assert_allclose(out.value, [[1.0, -1.0]], atol=1e-15)

    def test_zero_gain_gives_bias(self):
        x = np.random.default_rng(1).normal(size=(3, 6))
        bias = np.arange(6.0)
        out = mc.layernorm(const(x), np.zeros(6), bias)
        np.testing.assert_array_equal(out.value, np.broadcast_to(bias, (3, 6)))

    def test_single_feature_rejected(self):
        with pytest.raises(mc.DegenerateInputError):
            mc.layernorm(const([[1.0]]), np.ones(1), np.zeros(1))

    @given(arrays(np.float64, (4, 9), elements=st.floats(-100, 100)))
    def test_standardised_statistics(self, x):
        x = x + np.linspace(0, 1, 9)  # no exactly constant rows
        out = mc.layernorm(const(x), np.ones(9), np.zeros(9), eps=0.0).value
        assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
        assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-6)

    @given(arrays(np.float64, (4, 9), elements=st.floats(-100, 100)))
    def test_default_eps_statistics(self, x):
        out = mc.layernorm(const(x), np.ones(9), np.zeros(9)).value
        assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
        # var / (var + eps) is within 1e-6 of 1 once var >= 10
        ok = x.var(axis=1) >= 10.0
        assert np.all(np.abs(out.var(axis=1)[ok] - 1.0) < 1e-6)


class TestGelu:
    def test_zero(self):
        assert mc.gelu(const([0.0])).value[0] == 0.0

    def test_large_positive(self):
        assert abs(mc.gelu(const([10.0])).value[0] - 10.0) < 1e-9

    def test_minus_one(self):
        phi = 0.5 * (1.0 + math.erf(-1.0 / math.sqrt(2.0)))
        assert mc.gelu(const([-1.0])).value[0] == pytest.approx(-phi, abs=1e-12)
        assert mc.gelu(const([-1.0])).value[0] == pytest.approx(-0.158655, abs=1e-6)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(mc.softmax(const([[0.0, 0.0, 0.0]])).value, [[1 / 3] * 3])

    def test_two_values(self):
        e = math.e
        expected = [e / (e + e * e), e * e / (e + e * e)]
        np.testing.assert_allclose(mc.softmax(const([[1.0, 2.0]])).value[0], expected, rtol=1e-14)
        np.testing.assert_allclose(expected, [0.268941, 0.731059], atol=1e-6)

    @given(finite_rows(1), st.floats(-1e3, 1e3))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        p = mc.softmax(const(x)).value
        assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-12)
        np.testing.assert_allclose(mc.softmax(const(x + c)).value, p, atol=1e-12)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(mc.l2_normalize(const([[3.0, 4.0]])).value, [[0.6, 0.8]])

    def test_idempotent_on_unit_vector(self):
        v = np.array([[0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(mc.l2_normalize(const(v)).value, v)

    def test_zero_vector_stays_zero(self):
        np.testing.assert_array_equal(mc.l2_normalize(const(np.zeros((1, 4)))).value, np.zeros((1, 4)))

    @given(finite_rows(1))
    def test_unit_norm(self, x):
        out = mc.l2_normalize(const(x)).value
        big = np.linalg.norm(x, axis=1) >= 1e-6
        np.testing.assert_allclose(np.linalg.norm(out[big], axis=1), 1.0, atol=1e-12)


class TestAttention:
    @staticmethod
    def identity_weights(g, d):
        w = {}
        for k in mc.ATTN_KEYS:
            w[k] = g.constant(np.eye(d) if k.startswith("W") else np.zeros(d))
        return w

    def test_identical_values_pass_through(self):
        g = Graph()
        rng = np.random.default_rng(3)
        d = 4
        weights = {k: g.constant(rng.normal(size=(d, d)) if k.startswith("W") else rng.normal(size=d))
                   for k in mc.ATTN_KEYS}
        q = g.constant(rng.normal(size=(3, d)))
        k = g.constant(rng.normal(size=(5, d)))
        row = rng.normal(size=d)
        v = g.constant(np.tile(row, (5, 1)))
        out = mc.multi_head_attention(q, k, v, 2, weights)
        w = {name: t.value for name, t in weights.items()}
        expected = (row @ w["Wv"] + w["bv"]) @ w["Wo"] + w["bo"]
        np.testing.assert_allclose(out.value, np.tile(expected, (3, 1)), atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        g = Graph()
        rng = np.random.default_rng(4)
        weights = {k: g.constant(rng.normal(size=(6, 6)) if k.startswith("W") else np.zeros(6))
                   for k in mc.ATTN_KEYS}
        x = g.constant(rng.normal(size=(2, 4, 6)))
        _, attn = mc.multi_head_attention(x, x, x, 3, weights, return_weights=True)
        np.testing.assert_allclose(attn.value.sum(axis=-1), 1.0, atol=1e-12)

    def test_single_head_hand_computation(self):
        g = Graph()
        q = np.array([[1.0, 0.0], [0.5, 2.0]])
        _, attn = mc.multi_head_attention(g.constant(q), g.constant(q), g.constant(q), 1,
                                          self.identity_weights(g, 2), return_weights=True)
        # q q^T = [[1, 0.5], [0.5, 4.25]], scaled by 1/sqrt(2)
        s = np.array([[1.0, 0.5], [0.5, 4.25]]) / math.sqrt(2.0)
        row0 = [math.exp(s[0, 0]) / (math.exp(s[0, 0]) + math.exp(s[0, 1])),
                math.exp(s[0, 1]) / (math.exp(s[0, 0]) + math.exp(s[0, 1]))]
        row1 = [math.exp(s[1, 0]) / (math.exp(s[1, 0]) + math.exp(s[1, 1])),
                math.exp(s[1, 1]) / (math.exp(s[1, 0]) + math.exp(s[1, 1]))]
        np.testing.assert_allclose(attn.value[0], [row0, row1], rtol=1e-13)

    def test_heads_must_divide_width(self):
        g = Graph()
        x = g.constant(np.ones((2, 6)))
        with pytest.raises(mc.ConfigError):
            mc.multi_head_attention(x, x, x, 4, self.identity_weights(g, 6))


class TestBackward:
    def test_sum_gives_ones(self):
        g = Graph()
        x = g.leaf(np.random.default_rng(0).normal(size=(3, 4)))
        grads = g.backward(mc.sum_(x))
        np.testing.assert_array_equal(grads.of(x), np.ones((3, 4)))

    def test_stop_gradient_factor(self):
        g = Graph()
        xv = np.array([1.5, -2.0, 3.0])
        x = g.leaf(xv)
        grads = g.backward(mc.sum_(mc.stop_gradient(x) * x))
        np.testing.assert_array_equal(grads.of(x), xv)

    def test_stop_gradient_is_forward_identity(self):
        g = Graph()
        x = g.leaf(np.arange(5.0))
        sg = mc.stop_gradient(x)
        np.testing.assert_array_equal(sg.value, x.value)
        assert not sg.requires_grad

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.leaf(np.ones(3))
        with pytest.raises(mc.ContractError):
            g.backward(x * 2.0)

    def test_every_reachable_node_gets_a_slot(self):
        g = Graph()
        x = g.leaf(np.ones((2, 2)))
        h = mc.gelu(x * 3.0)
        loss = mc.mean(h)
        grads = g.backward(loss)
        assert all(grads.populated(t) for t in (x, h, loss))

    def test_topological_order_is_insertion_order(self):
        g = Graph()
        x = g.leaf(np.ones(2))
        y = mc.exp(x)
        z = mc.sum_(y * x)
        assert x.index < y.index < z.index
        assert all(p < i for i, n in enumerate(g.nodes) for p in n.parents)


# ---------------------------------------------------------------- gradient suite

def _rand(rng, *shape):
    return rng.normal(size=shape)


GRAD_CASES = {
    "add": (lambda a, b: mc.sum_(mc.square(a + b)), [(3, 4), (1, 4)]),
    "sub": (lambda a, b: mc.sum_(mc.square(a - b)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: mc.sum_(a * b * a), [(2, 5), (5,)]),
    "div": (lambda a, b: mc.sum_(a / (mc.square(b) + 1.0)), [(3, 3), (3, 3)]),
    "exp": (lambda a: mc.sum_(mc.exp(a * 0.5)), [(4, 3)]),
    "log": (lambda a: mc.sum_(mc.log(mc.square(a) + 0.5)), [(4, 3)]),
    "sigmoid": (lambda a: mc.sum_(mc.square(mc.sigmoid(a))), [(4, 3)]),
    "softplus": (lambda a: mc.sum_(mc.square(mc.softplus(a))), [(4, 3)]),
    "gelu": (lambda a: mc.sum_(mc.square(mc.gelu(a))), [(4, 3)]),
    "matmul": (lambda a, b: mc.sum_(mc.square(mc.matmul(a, b))), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: mc.sum_(mc.square(mc.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "softmax": (lambda a, w: mc.sum_(mc.softmax(a) * w), [(3, 5), (3, 5)]),
    "layernorm": (lambda x, g, b, w: mc.sum_(mc.layernorm(x, g, b) * w), [(3, 8), (8,), (8,), (3, 8)]),
    "l2_normalize": (lambda x, w: mc.sum_(mc.l2_normalize(x) * w), [(3, 6), (3, 6)]),
    "mean_axis": (lambda a: mc.sum_(mc.square(mc.mean(a, axis=1))), [(3, 4)]),
    "reshape_swap": (lambda a, w: mc.sum_(mc.swapaxes(mc.reshape(a, (2, 3, 2)), 0, 2) * w),
                     [(3, 4), (2, 3, 2)]),
    "concat_take": (lambda a, b: mc.sum_(mc.square(mc.take(mc.concat([a, b], axis=1), 1, axis=1))),
                    [(2, 1, 3), (2, 2, 3)]),
    "broadcast": (lambda a, w: mc.sum_(mc.broadcast_to(a, (4, 3)) * w), [(1, 3), (4, 3)]),
    "clip": (lambda a: mc.sum_(mc.square(mc.clip(a, -10.0, 10.0))), [(3, 4)]),
    "attention": (lambda q, k, v, *w: mc.sum_(mc.square(
        mc.multi_head_attention(q, k, v, 2, dict(zip(mc.ATTN_KEYS, w))))),
        [(3, 4), (5, 4), (5, 4), (4, 4), (4,), (4, 4), (4,), (4, 4), (4,), (4, 4), (4,)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    fn, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(20):
        inputs = [_rand(rng, *s) for s in shapes]
        worst = max(worst, mc.gradcheck(fn, inputs))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_gradcheck_detects_a_wrong_rule():
    def bad_square(a):
        return a.graph.record(a.value ** 2, (a,), lambda g: (g * a.value,))  # missing factor 2
    err = mc.gradcheck(lambda a: mc.sum_(bad_square(a)), [np.array([1.0, 2.0])])
    assert err > 0.1


# ---------------------------------------------------------------- parameters / optimiser

def test_paramset_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    ps = ParamSet([("a.W", rng.normal(size=(3, 4))), ("a.b", rng.normal(size=4)),
                   ("tiny", np.array([np.nextafter(0, 1), -0.0, 1e308]))])
    jpath, bpath = ps.save(tmp_path / "ckpt")
    manifest = __import__("json").loads(jpath.read_text())
    assert [e["name"] for e in manifest["tensors"]] == ["a.W", "a.b", "tiny"]
    assert [e["offset"] for e in manifest["tensors"]] == [0, 96, 128]
    assert bpath.stat().st_size == 8 * (12 + 4 + 3)
    back = ParamSet.load(tmp_path / "ckpt")
    assert back.bitwise_equal(ps)
    assert back.digest() == ps.digest()


def test_paramset_binary_is_little_endian():
    manifest, blob = ParamSet([("x", np.array([1.0]))]).to_bytes()
    assert manifest["dtype"] == "float64-le"
    assert blob == bytes([0, 0, 0, 0, 0, 0, 0xF0, 0x3F])


def test_adam_first_step_moves_by_lr():
    ps = ParamSet([("w", np.array([1.0, -1.0, 0.0]))])
    opt = mc.Adam(lr=0.1)
    opt.step(ps, {"w": np.array([2.0, -3.0, 0.0])})
    np.testing.assert_allclose(ps["w"], [0.9, -0.9, 0.0], atol=1e-8)


def test_adam_minimises_quadratic():
    ps = ParamSet([("w", np.array([3.0, -2.0]))])
    opt = mc.Adam(lr=0.05)
    for _ in range(500):
        opt.step(ps, {"w": 2.0 * ps["w"]})
    assert np.all(np.abs(ps["w"]) < 1e-2)


def test_forward_is_deterministic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 8))
    w = {k: (rng.normal(size=(8, 8)) if k.startswith("W") else rng.normal(size=8)) for k in mc.ATTN_KEYS}

    def run():
        g = Graph()
        t = g.constant(x)
        return mc.multi_head_attention(t, t, t, 2, {k: g.constant(v) for k, v in w.items()}).value

    assert run().tobytes() == run().tobytes()


def test_tensors_are_read_only():
    t = const(np.ones(3))
    with pytest.raises(ValueError):
        t.value[0] = 2.0


def test_mixing_graphs_is_an_error():
    with pytest.raises(mc.ContractError):
        mc.add(Graph().leaf(np.ones(2)), Graph().leaf(np.ones(2)))
