import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vln3d import tensor as T
from vln3d.errors import BadMagicError, ConfigurationError, ContractViolation, TruncatedFileError
from vln3d.nn import (
    AdamW,
    AdamWState,
    Linear,
    LSTMCell,
    MultiHeadAttention,
    PsiBlock,
    adamw_step,
    load_checkpoint,
    save_checkpoint,
)
from vln3d.tensor import Tensor, backward


def test_sum_grad_is_ones():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_square_grad():
    x = Tensor(2.0, requires_grad=True)
    backward(x * x)
    assert x.grad == 4.0


def test_grads_accumulate_until_zeroed():
    x = Tensor(3.0, requires_grad=True)
    backward(x * 2.0)
    backward(x * 2.0)
    assert x.grad == 4.0
    x.zero_grad()
    assert x.grad == 0.0


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        backward(x * 2.0)


def test_shared_node_visited_once():
    x = Tensor(1.5, requires_grad=True)
    y = x * x
    z = y + y  # y used twice
    backward(z)
    assert x.grad == pytest.approx(4 * 1.5)


def _central_diff(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        o = flat[j]
        flat[j] = o + h
        fp = f()
        flat[j] = o - h
        fm = f()
        flat[j] = o
        gflat[j] = (fp - fm) / (2 * h)
    return g


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    l1, l2 = Linear(5, 7, rng), Linear(7, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)))

    def loss():
        return T.tanh(l2(T.gelu(l1(x)))).sum()

    params = l1.parameters() + l2.parameters()
    T.zero_grad(params)
    backward(loss())
    with T.no_grad():
        for p in params:
            num = _central_diff(lambda: loss().item(), p.data)
            rel = np.abs(p.grad - num) / (np.abs(p.grad) + np.abs(num) + 1e-12)
            # coordinates with both grads ~0 are noise-dominated; check those absolutely
            big = (np.abs(num) > 1e-6)
            assert np.all(rel[big] < 1e-6)
            assert np.all(np.abs(p.grad - num)[~big] < 1e-9)


def test_broadcast_add_grad():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    backward((a + b).sum())
    assert b.grad.tolist() == [3.0] * 4


# -- attention ----------------------------------------------------------------------------

def _dense_attention_reference(Q, K, V, heads, p):
    """Straight-line per-head loop; shares nothing with the library path."""
    nq, d = Q.shape
    dh = d // heads
    q = Q @ p["wq"] + p["bq"]
    k = K @ p["wk"]
    v = V @ p["wv"] + p["bv"]
    ctx = np.zeros((nq, d))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(nq):
            s = [float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(dh) for j in range(K.shape[0])]
            m = max(s)
            w = [math.exp(x - m) for x in s]
            tot = sum(w)
            for j in range(K.shape[0]):
                ctx[i, sl] += (w[j] / tot) * v[j, sl]
    return ctx @ p["wo"] + p["bo"]


def _random_mha(d, heads, seed):
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(d, heads, rng)
    for _, prm in mha.named_parameters():
        prm.data[...] = rng.normal(size=prm.shape)
    return mha, rng


def test_attention_matches_dense_reference():
    mha, rng = _random_mha(4, 2, 11)
    Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    out = mha(Tensor(Q), Tensor(K), Tensor(V)).data
    ref = _dense_attention_reference(Q, K, V, 2, {n: p.data for n, p in mha.named_parameters()})
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_attention_single_key_returns_projected_value():
    mha, rng = _random_mha(8, 4, 1)
    Q, K, V = rng.normal(size=(2, 8)), rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    out = mha(Tensor(Q), Tensor(K), Tensor(V)).data
    expect = (V @ mha.wv.data + mha.bv.data) @ mha.wo.data + mha.bo.data
    np.testing.assert_allclose(out, np.repeat(expect, 2, axis=0), atol=1e-12)


def test_attention_identical_keys_uniform_weights():
    mha, rng = _random_mha(8, 2, 2)
    K = np.repeat(rng.normal(size=(1, 8)), 6, axis=0)
    _, w = mha(Tensor(rng.normal(size=(3, 8))), Tensor(K), Tensor(rng.normal(size=(6, 8))), return_weights=True)
    np.testing.assert_allclose(w.data, 1.0 / 6.0, atol=1e-12)


def test_attention_weight_rows_sum_to_one():
    mha, rng = _random_mha(8, 4, 5)
    _, w = mha(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(7, 8))), Tensor(rng.normal(size=(7, 8))), return_weights=True)
    assert np.all(np.abs(w.data.sum(-1) - 1.0) < 1e-9)
    assert np.all((w.data >= 0) & (w.data <= 1))


def test_attention_head_divisibility():
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(6, 4)


def test_attention_key_mask_ignores_padding():
    mha, rng = _random_mha(4, 2, 9)
    Q, K, V = rng.normal(size=(1, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    short = mha(Tensor(Q), Tensor(K[:2]), Tensor(V[:2])).data
    K2, V2 = K.copy(), V.copy()
    K2[2], V2[2] = 100.0, -100.0
    masked = mha(Tensor(Q), Tensor(K2), Tensor(V2), key_mask=np.array([True, True, False])).data
    np.testing.assert_allclose(masked, short, atol=1e-12)


# -- psi / gelu ---------------------------------------------------------------------------

def _gelu_scalar(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def test_gelu_zero():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_psi_zero_weights_is_residual():
    psi = PsiBlock(4)
    r = np.array([0.3, -1.0, 2.0, 5.0])
    out = psi(Tensor(np.ones(4)), Tensor(r)).data
    assert out.tolist() == r.tolist()


def test_psi_matches_scalar_reference():
    rng = np.random.default_rng(4)
    psi = PsiBlock(4, rng)
    for prm in psi.parameters():
        prm.data[...] = rng.normal(size=prm.shape)
    x, r = rng.normal(size=4), rng.normal(size=4)
    w1, b1, w2, b2 = psi.fc1.weight.data, psi.fc1.bias.data, psi.fc2.weight.data, psi.fc2.bias.data
    hid = [_gelu_scalar(sum(x[i] * w1[i, j] for i in range(4)) + b1[j]) for j in range(4)]
    ref = [sum(hid[i] * w2[i, j] for i in range(4)) + b2[j] + r[j] for j in range(4)]
    np.testing.assert_allclose(psi(Tensor(x), Tensor(r)).data, ref, atol=1e-12)


def test_psi_width_mismatch():
    with pytest.raises(ContractViolation):
        PsiBlock(4)(Tensor(np.zeros(4)), Tensor(np.zeros(3)))


# -- lstm ---------------------------------------------------------------------------------

def test_lstm_zero_weights_halves_cell():
    cell = LSTMCell(3, 4)
    c = np.array([1.0, -2.0, 0.5, 4.0])
    h2, c2 = cell(Tensor(np.ones(3)), Tensor(np.ones(4)), Tensor(c))
    np.testing.assert_allclose(c2.data, 0.5 * c, atol=0)
    np.testing.assert_allclose(h2.data, 0.5 * np.tanh(0.5 * c), atol=1e-15)


def test_lstm_zero_everything():
    h2, c2 = LSTMCell(2, 4)(Tensor(np.zeros(2)), Tensor(np.zeros(4)), Tensor(np.zeros(4)))
    assert not h2.data.any() and not c2.data.any()


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_lstm_matches_scalar_reference():
    rng = np.random.default_rng(8)
    di, dh = 3, 4
    cell = LSTMCell(di, dh, rng)
    cell.bias.data[...] = rng.normal(size=4 * dh)
    x, h, c = rng.normal(size=di), rng.normal(size=dh), rng.normal(size=dh)
    Wx, Wh, b = cell.w_x.data, cell.w_h.data, cell.bias.data
    pre = [sum(x[i] * Wx[i, j] for i in range(di)) + sum(h[i] * Wh[i, j] for i in range(dh)) + b[j] for j in range(4 * dh)]
    c_ref, h_ref = [], []
    for j in range(dh):
        ig, fg, gg, og = _sig(pre[j]), _sig(pre[dh + j]), math.tanh(pre[2 * dh + j]), _sig(pre[3 * dh + j])
        cj = fg * c[j] + ig * gg
        c_ref.append(cj)
        h_ref.append(og * math.tanh(cj))
    h2, c2 = cell(Tensor(x), Tensor(h), Tensor(c))
    np.testing.assert_allclose(c2.data, c_ref, atol=1e-12)
    np.testing.assert_allclose(h2.data, h_ref, atol=1e-12)
    assert np.all(np.abs(h2.data) < 1)


def test_lstm_shape_mismatch():
    with pytest.raises(ContractViolation):
        LSTMCell(3, 4)(Tensor(np.zeros(2)), Tensor(np.zeros(4)), Tensor(np.zeros(4)))


# -- cross entropy ------------------------------------------------------------------------

def test_cross_entropy_uniform_two_classes():
    assert T.cross_entropy(Tensor(np.zeros((5, 2))), [0, 1, 1, 0, 1]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_large_margin():
    logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    assert T.cross_entropy(Tensor(logits), [0, 1]).item() < 1e-12


def test_cross_entropy_matches_naive():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(6, 4)) * 3
    tgt = rng.integers(0, 4, size=6)
    ref = 0.0
    for row, t in zip(logits, tgt):
        ref += -(row[t] - math.log(sum(math.exp(v) for v in row)))
    assert T.cross_entropy(Tensor(logits), tgt).item() == pytest.approx(ref / 6, rel=1e-12)


def test_cross_entropy_bad_target():
    with pytest.raises(ContractViolation):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.integers(0, 5))
def test_cross_entropy_nonnegative_and_softmax_simplex(row, t):
    t = t % len(row)
    logits = Tensor(np.array([row]))
    assert T.cross_entropy(logits, [t]).item() >= 0.0
    p = T.softmax(logits).data
    assert np.all((p >= 0) & (p <= 1))
    assert abs(p.sum() - 1.0) < 1e-9


# -- adamw --------------------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]


def test_adamw_first_step_is_lr_sign():
    p = Tensor(np.array(0.5), requires_grad=True)
    p.grad[...] = 1.0
    state = AdamWState(lr=0.1, weight_decay=0.0)
    adamw_step([p], state)
    assert p.data == pytest.approx(0.5 - 0.1, abs=1e-6)
    assert state.step == 1


def test_adamw_lr_zero_bit_identical():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=5), requires_grad=True)
    before = p.data.copy()
    p.grad[...] = rng.normal(size=5)
    adamw_step([p], AdamWState(lr=0.0, weight_decay=0.5))
    assert p.data.tobytes() == before.tobytes()


def test_adamw_missing_grad():
    p = Tensor(1.0, requires_grad=True)
    p.grad = None
    with pytest.raises(ContractViolation):
        adamw_step([p], AdamWState())


def test_adamw_convex_quadratic_decreases():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    A = A @ A.T + np.eye(4)
    x = Tensor(rng.normal(size=4) * 3, requires_grad=True)
    opt = AdamW([x], lr=0.05, weight_decay=0.0)
    losses = []
    for _ in range(100):
        opt.zero_grad()
        loss = (x @ Tensor(A) @ x) * 0.5
        losses.append(loss.item())
        backward(loss)
        opt.step()
    windows = [np.mean(losses[i:i + 10]) for i in range(0, 100, 10)]
    assert all(b < a for a, b in zip(windows, windows[1:]))


# -- grad_check ---------------------------------------------------------------------------

def test_grad_check_linear_exact():
    w = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    x = Tensor(np.array([3.0, 1.0, -4.0]))
    assert T.grad_check(lambda: (w * x).sum(), [w]) < 1e-10


def test_grad_check_composite_blocks():
    rng = np.random.default_rng(6)
    mha = MultiHeadAttention(8, 2, rng)
    psi = PsiBlock(8, rng)
    cell = LSTMCell(8, 8, rng)
    q, kv = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(5, 8)))
    h, c = Tensor(rng.normal(size=8) * 0.5), Tensor(rng.normal(size=8) * 0.5)

    def f():
        a = mha(q, kv, kv)
        v = psi(a, q)
        h2, c2 = cell(v[0], h, c)
        return (h2 * h2).sum() + c2.sum() + T.cross_entropy(v, [1, 3])

    params = mha.parameters() + psi.parameters() + cell.parameters()
    assert T.grad_check(f, params, max_coords=8) < 1e-4


def test_forward_backward_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        lin = Linear(6, 3, rng)
        x = Tensor(rng.normal(size=(4, 6)))
        loss = T.cross_entropy(lin(x), [0, 1, 2, 0])
        backward(loss)
        return loss.data.tobytes(), lin.weight.grad.tobytes()

    assert run() == run()


# -- checkpoint ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    state = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "scalar": np.array(1.5)}
    path = tmp_path / "w.vnwt"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        assert back[k].tobytes() == state[k].tobytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "w.vnwt"
    save_checkpoint(path, {"x": np.arange(4.0)})
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "trunc").write_bytes(raw[:-3])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(tmp_path / "trunc")
