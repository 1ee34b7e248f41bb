"""Unit tests for the autodiff core: op contracts, gradients, optimizer,
checkpoint round-trips, determinism."""

import numpy as np
import pytest

from daf.errors import (
    CheckpointMismatchError,
    ConfigurationError,
    ContractError,
    ShapeMismatchError,
)
from daf.numerics import (
    Adam,
    ParamStore,
    SequenceBuffer,
    Tensor,
    backward,
    concat,
    constant,
    conv1d,
    einsum2,
    linear_seq,
    load_into,
    load_params,
    masked_softmax,
    matmul,
    mlp_forward,
    narrow,
    no_grad,
    save_params,
)

from oracles import check_gradients

rng = np.random.default_rng(20240811)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = matmul(constant([[1.0, 0.0], [0.0, 1.0]]), constant([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[3.0], [4.0]])

    def test_hand_product(self):
        out = matmul(constant([[1.0, 2.0]]), constant([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))


class TestConv1d:
    def test_identity_kernel(self):
        x = constant([[1.0, 2.0, 3.0]])
        w = constant([[[0.0, 1.0, 0.0]]])
        out = conv1d(x, w, constant([0.0]))
        assert np.allclose(out.data, [[1.0, 2.0, 3.0]])

    def test_box_kernel_zero_padding(self):
        out = conv1d(constant([[1.0, 2.0, 3.0]]), constant([[[1.0, 1.0, 1.0]]]), constant([0.0]))
        assert np.allclose(out.data, [[3.0, 6.0, 5.0]])

    def test_zero_input_gives_bias(self):
        out = conv1d(constant([[0.0, 0.0, 0.0]]), constant([[[0.5, -1.0, 2.0]]]), constant([7.0]))
        assert np.allclose(out.data, [[7.0, 7.0, 7.0]])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError, match="odd"):
            conv1d(constant([[1.0, 2.0]]), constant(np.ones((1, 1, 4))), constant([0.0]))

    def test_same_length_any_odd_kernel(self):
        for s in (1, 3, 5, 7):
            x = constant(rng.normal(size=(2, 9)))
            out = conv1d(x, constant(rng.normal(size=(3, 2, s))), constant(np.zeros(3)))
            assert out.shape == (3, 9)


class TestMlpForward:
    def test_identity_layer(self):
        x = rng.normal(size=(3, 5))
        out = mlp_forward(constant(x), [(constant(np.eye(3)), constant(np.zeros(3)))])
        assert np.allclose(out.data, x)

    def test_zero_weight_gives_constant(self):
        x = constant(rng.normal(size=(3, 5)))
        out = mlp_forward(x, [(constant(np.zeros((2, 3))), constant([4.0, -1.0]))])
        assert np.allclose(out.data, np.array([[4.0], [-1.0]]) * np.ones((2, 5)))

    def test_two_layers_hand_composed(self):
        x = 0.4
        out = mlp_forward(
            constant([[x]]),
            [
                (constant([[2.0]]), constant([1.0])),
                (constant([[-3.0]]), constant([0.5])),
            ],
        )
        expected = -3.0 * max(0.0, 2.0 * x + 1.0) + 0.5
        assert np.allclose(out.data, [[expected]])

    def test_chain_break_is_config_error(self):
        with pytest.raises(ConfigurationError):
            mlp_forward(
                constant(np.ones((3, 2))),
                [
                    (constant(np.ones((4, 3))), constant(np.zeros(4))),
                    (constant(np.ones((2, 5))), constant(np.zeros(2))),
                ],
            )


class TestBackward:
    def test_sum_gradient_is_ones(self):
        p = leaf(rng.normal(size=(4,)))
        backward(p.sum())
        assert np.array_equal(p.grad, np.ones(4))

    def test_sum_of_squares(self):
        p = leaf([1.0, -2.0])
        backward(p.square().sum())
        assert np.allclose(p.grad, [2.0, -4.0])

    def test_non_scalar_root_rejected(self):
        p = leaf([1.0, 2.0])
        with pytest.raises(ContractError, match="scalar"):
            backward(p + 0.0)

    def test_two_losses_accumulate_like_their_sum(self):
        v = rng.normal(size=(3, 3))
        p1 = leaf(v)
        backward(p1.square().sum())
        backward((p1 * 2.0).sum())
        p2 = leaf(v)
        backward(p2.square().sum() + (p2 * 2.0).sum())
        assert np.allclose(p1.grad, p2.grad)

    def test_shared_subexpression_visited_once(self):
        p = leaf([3.0])
        y = p * 2.0
        backward((y + y).sum())
        assert np.allclose(p.grad, [4.0])


class TestOptimizer:
    def test_zero_grad_leaves_params_unchanged(self):
        p = leaf([1.0, 2.0])
        p.grad = np.zeros(2)
        opt = Adam({"p": p}, lr=0.1)
        opt.step()
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_descend_reduces_value(self):
        p = leaf([1.0])
        p.grad = np.array([1.0])
        Adam({"p": p}, lr=0.1).step("descend")
        assert p.data[0] < 1.0

    def test_ascend_increases_value(self):
        p = leaf([0.0])
        backward(p.sum())  # d/dp of p = 1
        Adam({"p": p}, lr=0.1).step("ascend")
        assert p.data[0] > 0.0

    def test_missing_grad_is_contract_error(self):
        p = leaf([1.0])
        with pytest.raises(ContractError, match="without gradients"):
            Adam({"p": p}, lr=0.1).step()

    def test_step_counter_and_grad_clearing(self):
        p = leaf([1.0])
        opt = Adam({"p": p}, lr=0.1)
        for expected in (1, 2, 3):
            p.grad = np.array([0.5])
            opt.step()
            assert opt.t == expected
            assert p.grad is None


class TestGradientsAgainstFiniteDifferences:
    """Each op checked on several random instances (the full 100-instance
    sweep runs in the acceptance suite)."""

    N = 12

    def test_pointwise_and_reductions(self):
        for _ in range(self.N):
            a = rng.uniform(-1, 1, size=(2, 3))
            b = rng.uniform(-1, 1, size=(2, 3))
            w = rng.normal(size=(2, 3))
            check_gradients(lambda ts, w=w: ((ts[0] * ts[1] + ts[0] - ts[1]) * constant(w)).sum(), [a, b])
            check_gradients(lambda ts, w=w: ((ts[0].square() * 0.5) * constant(w)).sum(), [a])
            check_gradients(lambda ts: ts[0].mean() + (-ts[0]).sum() * 0.25, [a])

    def test_nonlinearities(self):
        for _ in range(self.N):
            a = rng.uniform(-1, 1, size=(6,))
            a[np.abs(a) < 0.05] = 0.1  # keep away from the relu kink
            pos = rng.uniform(0.2, 2.0, size=(5,))
            c = rng.uniform(-1, 1, size=(5,))
            c[np.abs(np.abs(c) - 0.8) < 0.05] = 0.0  # keep away from clamp edges
            w = rng.normal(size=6)
            check_gradients(lambda ts, w=w: (ts[0].relu() * constant(w)).sum(), [a])
            check_gradients(lambda ts: ts[0].sigmoid().sum() + ts[0].exp().mean(), [a])
            check_gradients(lambda ts: ts[0].log().sum(), [pos])
            check_gradients(lambda ts: ts[0].clamp(-0.8, 0.8).square().sum(), [c])

    def test_matmul_linear_conv(self):
        for _ in range(self.N):
            a = rng.uniform(-1, 1, size=(2, 3))
            b = rng.uniform(-1, 1, size=(3, 2))
            check_gradients(lambda ts: matmul(ts[0], ts[1]).square().sum(), [a, b])
            x = rng.uniform(-1, 1, size=(2, 3, 4))
            w = rng.uniform(-1, 1, size=(2, 3))
            bias = rng.uniform(-1, 1, size=(2,))
            check_gradients(lambda ts: linear_seq(ts[0], ts[1], ts[2]).square().sum(), [x, w, bias])
            xc = rng.uniform(-1, 1, size=(2, 2, 5))
            wc = rng.uniform(-1, 1, size=(3, 2, 3))
            bc = rng.uniform(-1, 1, size=(3,))
            check_gradients(lambda ts: conv1d(ts[0], ts[1], ts[2]).square().sum(), [xc, wc, bc])

    def test_attention_contractions_and_softmax(self):
        for _ in range(self.N):
            q = rng.uniform(-1, 1, size=(2, 3, 4))
            k = rng.uniform(-1, 1, size=(2, 3, 4))
            v = rng.uniform(-1, 1, size=(2, 3, 4))
            mask = np.eye(4, dtype=bool)
            def attn(ts):
                scores = einsum2("bdt,bds->bts", ts[0], ts[1])
                alpha = masked_softmax(scores, mask)
                return einsum2("bts,bhs->bht", alpha, ts[2]).square().sum()
            check_gradients(attn, [q, k, v])
            check_gradients(
                lambda ts: masked_softmax(ts[0].reshape(6, 4)).square().sum(),
                [rng.uniform(-1, 1, size=(24,))],
            )

    def test_shape_ops(self):
        for _ in range(self.N):
            a = rng.uniform(-1, 1, size=(2, 4))
            b = rng.uniform(-1, 1, size=(2, 2))
            check_gradients(
                lambda ts: (concat([ts[0], ts[1]], axis=1).square()).sum(), [a, b]
            )
            check_gradients(lambda ts: narrow(ts[0], 1, 1, 2).square().sum(), [a])
            check_gradients(lambda ts: ts[0].reshape(8).square().sum(), [a])


class TestDeterminism:
    def test_same_ops_same_bits(self):
        def run():
            r = np.random.default_rng(7)
            x = Tensor(r.normal(size=(3, 4)), requires_grad=True)
            w = Tensor(r.normal(size=(2, 3)), requires_grad=True)
            out = linear_seq(x, w, None).relu().sum()
            backward(out)
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


class TestNoGrad:
    def test_no_graph_recorded(self):
        p = leaf(np.ones(3))
        with no_grad():
            out = (p * 2.0).sum()
        assert out._parents == ()
        with pytest.raises(ContractError):
            # nothing reachable; root grad exists but p never touched
            backward(out + constant(np.array([np.nan])))

    def test_finiteness_enforced_on_leaves(self):
        with pytest.raises(ContractError, match="finite"):
            Tensor([np.inf, 1.0])


class TestSequenceBuffer:
    def test_matches_concat_values_and_grads(self):
        blocks = [rng.normal(size=(2, 3, n)) for n in (4, 1, 2)]
        # buffered version
        leaves_a = [Tensor(b.copy(), requires_grad=True) for b in blocks]
        buf = SequenceBuffer(2, 3, 7)
        for t in leaves_a:
            buf.append(t)
        out_a = (buf.view(0, 7).square()).sum() + buf.view(2, 5).sum()
        backward(out_a)
        # concat version
        leaves_b = [Tensor(b.copy(), requires_grad=True) for b in blocks]
        full = concat(leaves_b, axis=2)
        out_b = (full.square()).sum() + narrow(full, 2, 2, 3).sum()
        backward(out_b)
        assert np.allclose(out_a.data, out_b.data)
        for ta, tb in zip(leaves_a, leaves_b):
            assert np.allclose(ta.grad, tb.grad)

    def test_unread_block_gets_no_gradient(self):
        a = Tensor(np.ones((1, 1, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 1, 2)), requires_grad=True)
        buf = SequenceBuffer(1, 1, 4)
        buf.append(a)
        out = buf.view(0, 2).sum()
        buf.append(b)
        backward(out)
        assert np.allclose(a.grad, np.ones((1, 1, 2)))
        assert b.grad is None


class TestCheckpoint:
    def _store(self):
        store = ParamStore()
        store.add("layer.w", rng.normal(size=(3, 4)))
        store.add("layer.b", rng.normal(size=(3,)))
        store.add("scalar", np.array([np.pi]))
        return store

    def test_bit_exact_round_trip(self, tmp_path):
        store = self._store()
        path = tmp_path / "model.ckpt"
        save_params(store, path)
        loaded = load_params(path)
        assert loaded.names() == store.names()
        assert loaded.to_bytes() == store.to_bytes()

    def test_load_into_validates_shapes(self, tmp_path):
        store = self._store()
        path = tmp_path / "model.ckpt"
        save_params(store, path)
        other = ParamStore()
        other.add("layer.w", np.zeros((3, 4)))
        with pytest.raises(CheckpointMismatchError):
            load_into(other, path)

    def test_manifest_is_utf8_json_first_line(self, tmp_path):
        import json

        store = self._store()
        path = tmp_path / "model.ckpt"
        save_params(store, path)
        header = path.read_bytes().split(b"\n", 1)[0]
        manifest = json.loads(header.decode("utf-8"))
        assert [p["name"] for p in manifest["params"]] == store.names()
        assert all(
            {"name", "shape", "offset"} <= set(p.keys()) for p in manifest["params"]
        )
