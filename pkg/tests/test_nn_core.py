import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locaframe import nn
from locaframe.errors import DisconnectedGraph, ShapeMismatch, UnknownParam


def test_linear_identity():
    p = nn.ParamStore()
    p.add("lin.weight", np.eye(4))
    p.add("lin.bias", np.zeros(4))
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(nn.linear(p, "lin", nn.Tensor(x)).data, x)


def test_linear_shape_and_unknown_param():
    p = nn.ParamStore()
    nn.init_linear(p, "lin", 3, 2, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        nn.linear(p, "lin", nn.Tensor(np.zeros((1, 4))))
    with pytest.raises(UnknownParam):
        nn.linear(p, "other", nn.Tensor(np.zeros((1, 3))))
    with pytest.raises(UnknownParam):
        nn.mlp(p, "missing", nn.Tensor(np.zeros((1, 3))))


def test_mlp_hidden_spec_check():
    p = nn.ParamStore()
    nn.init_mlp(p, "m", [3, 5, 4, 2], np.random.default_rng(0))
    out = nn.mlp(p, "m", nn.Tensor(np.ones((2, 3))), hidden_spec=[5, 4])
    assert out.shape == (2, 2)
    with pytest.raises(ShapeMismatch):
        nn.mlp(p, "m", nn.Tensor(np.ones((2, 3))), hidden_spec=[5])


def test_softmax_single_edge_segment():
    logits = nn.Tensor(np.array([[3.7, -1.0], [0.2, 0.4], [5.0, 5.0]]))
    out = nn.softmax(logits, np.array([0, 1, 1]), 2).data
    assert np.array_equal(out[0], [1.0, 1.0])
    assert np.allclose(out[1] + out[2], 1.0, atol=1e-15)


def test_softmax_segment_oracle():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((9, 3)) * 10
    ids = np.array([0, 0, 1, 1, 1, 3, 3, 3, 3])
    got = nn.softmax(nn.Tensor(logits), ids, 4).data
    for s in (0, 1, 3):
        rows = logits[ids == s]
        e = np.exp(rows - rows.max(0))
        assert np.allclose(got[ids == s], e / e.sum(0), atol=1e-15)


def test_layernorm_statistics():
    x = np.random.default_rng(2).standard_normal((5, 16)) * 3 + 2
    y = nn.layernorm(None, None, nn.Tensor(x)).data
    assert np.max(np.abs(y.mean(1))) < 1e-6
    assert np.max(np.abs(y.var(1) - 1)) < 1e-4  # eps = 1e-5 shrinks the variance slightly
    p = nn.ParamStore()
    nn.init_layernorm(p, "ln", 16)
    assert np.array_equal(nn.layernorm(p, "ln", nn.Tensor(x)).data, y)


def test_backward_quadratic_exact():
    p = nn.ParamStore()
    w = p.add("w", np.array([1.0, -2.0, 0.5]))
    with nn.Tape() as tape:
        loss = nn.tsum(w * w)
    nn.backward(tape, loss, p)
    assert np.array_equal(p.grads("w"), 2 * p.values("w"))


def test_constant_loss_gives_zero_grads_and_warns():
    p = nn.ParamStore()
    p.add("w", np.ones(3))
    with nn.Tape() as tape:
        loss = nn.tsum(nn.Tensor(np.ones(2)))
    with pytest.warns(DisconnectedGraph):
        nn.backward(tape, loss, p)
    assert np.array_equal(p.grads("w"), np.zeros(3))


def test_no_warning_for_connected_params():
    p = nn.ParamStore()
    w = p.add("w", np.ones(3))
    p.add("frozen", np.ones(3), learnable=False)
    with nn.Tape() as tape:
        loss = nn.tsum(w * 2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        nn.backward(tape, loss, p)


def test_shared_use_accumulates():
    p = nn.ParamStore()
    w = p.add("w", np.array([3.0]))
    with nn.Tape() as tape:
        loss = nn.tsum(w * w * w + w)
    nn.backward(tape, loss, p)
    assert np.allclose(p.grads("w"), 3 * 9 + 1)


OPS = {
    "add_broadcast": lambda a, b: nn.tsum((a + b[0]) * (a - b[1])),
    "mul_div": lambda a, b: nn.tsum(a * b / (b * b + 2.0)),
    "pow_exp_log": lambda a, b: nn.tsum(nn.power(nn.exp(a * 0.3) + 1.0, 1.5) + nn.log(b * b + 1.0)),
    "sqrt_sin": lambda a, b: nn.tsum(nn.sqrt(a * a + 1.0) * nn.sin(b)),
    "silu_abs": lambda a, b: nn.tsum(nn.silu(a) * nn.abs_(b + 3.0)),
    "matmul": lambda a, b: nn.tsum(nn.matmul(a, nn.reshape(b, (3, 4)))),
    "reshape_mean": lambda a, b: nn.mean(nn.reshape(a, (12,)) * nn.reshape(b, (12,))),
    "concat_getitem": lambda a, b: nn.tsum(nn.concat([a, b], axis=0)[np.array([0, 5, 5, 7])] ** 2),
    "sum_axis": lambda a, b: nn.tsum(nn.tsum(a, axis=0, keepdims=True) * b),
    "gather_segment": lambda a, b: nn.tsum(nn.segment_sum(nn.gather(a, np.array([2, 0, 0, 3, 1])), np.array([0, 1, 1, 2, 2]), 3) ** 2),
    "segment_unsorted": lambda a, b: nn.tsum(nn.segment_sum(a, np.array([2, 0, 2, 1]), 3) * b[:3]),
    "segment_softmax": lambda a, b: nn.tsum(nn.softmax(a, np.array([0, 0, 1, 1]), 2) * b),
    "softmax_rows": lambda a, b: nn.tsum(nn.softmax(a) * b),
    "smooth_l1": lambda a, b: nn.smooth_l1(a * 2.0, b),
    "mse": lambda a, b: nn.mse(a, b),
    "where": lambda a, b: nn.tsum(nn.where_const(np.array([[True, False, True]] * 4), a * a, b * 3.0)),
    "linear_map": lambda a, b: nn.tsum(nn.linear_map(a, lambda x: x @ ROT.T, lambda g: g @ ROT) * b),
}
ROT = np.linalg.qr(np.random.default_rng(99).standard_normal((3, 3)))[0]


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients(op):
    rng = np.random.default_rng(abs(hash(op)) % 2**32)
    p = nn.ParamStore()
    a = p.add("a", rng.standard_normal((4, 3)))
    b = p.add("b", rng.standard_normal((4, 3)))
    rep = nn.grad_check(lambda: OPS[op](p["a"], p["b"]), p, max_entries=None)
    assert rep.max_rel_error < 1e-6, rep.per_param


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_mlp_layernorm_gradients(seed, depth):
    rng = np.random.default_rng(seed)
    p = nn.ParamStore()
    sizes = [5] + [int(rng.integers(2, 7)) for _ in range(depth)]
    nn.init_mlp(p, "m", sizes, rng)
    nn.init_layernorm(p, "ln", 5)
    p["ln.scale"].data[:] = rng.uniform(0.5, 2, 5)
    x = rng.standard_normal((3, 5))
    t = rng.standard_normal((3, sizes[-1]))
    rep = nn.grad_check(lambda: nn.smooth_l1(nn.mlp(p, "m", nn.layernorm(p, "ln", nn.Tensor(x))), t), p)
    assert rep.max_rel_error < 1e-6, rep.per_param


def test_segment_sum_paths_agree():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 4))
    ids = np.sort(rng.integers(0, 10, 50))
    sorted_sum = nn.segment_sum_np(x, ids, 12)
    perm = rng.permutation(50)
    assert np.allclose(nn.segment_sum_np(x[perm], ids[perm], 12), sorted_sum, atol=1e-13)
    oracle = np.stack([x[ids == k].sum(0) for k in range(12)])
    assert np.allclose(sorted_sum, oracle, atol=1e-13)
    assert np.array_equal(nn.segment_sum_np(np.zeros((0, 4)), np.zeros(0, dtype=int), 3), np.zeros((3, 4)))


def test_smooth_l1_values():
    t = nn.Tensor(np.zeros(4))
    assert nn.smooth_l1(nn.Tensor(np.zeros(4)), t).data == 0.0
    assert nn.smooth_l1(nn.Tensor(np.full(4, 0.5)), t).data == pytest.approx(0.125, abs=1e-15)
    assert nn.smooth_l1(nn.Tensor(np.full(4, -2.0)), t).data == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(ShapeMismatch):
        nn.smooth_l1(nn.Tensor(np.zeros(3)), t)
    assert nn.mse(nn.Tensor(np.full(4, 2.0)), t).data == pytest.approx(4.0)


def test_adamw_zero_grad_is_identity():
    p = nn.ParamStore()
    p.add("w", np.array([1.0, -3.0]))
    before = p.values("w").copy()
    nn.adamw_step(p, lr=1e-2, weight_decay=0.0)
    assert np.array_equal(p.values("w"), before)


def test_adamw_descends_and_defaults():
    p = nn.ParamStore()
    w = p.add("w", np.array([1.0]))
    with nn.Tape() as tape:
        loss = nn.tsum(w * w)
    nn.backward(tape, loss, p)
    nn.adamw_step(p)
    assert abs(p.values("w")[0]) < 1.0
    import inspect

    sig = inspect.signature(nn.adamw_step)
    assert sig.parameters["lr"].default == 5e-4
    assert sig.parameters["weight_decay"].default == 5e-3
    assert "m" in p.state("w") and p.step_count == 1


def test_adamw_frozen_params_untouched():
    p = nn.ParamStore()
    p.add("frozen", np.ones(2), learnable=False)
    p["frozen"].grad = np.ones(2)
    nn.adamw_step(p, lr=0.1)
    assert np.array_equal(p.values("frozen"), np.ones(2))


def test_clip_grad_norm():
    p = nn.ParamStore()
    p.add("a", np.zeros(2))
    p.add("b", np.zeros(1))
    p["a"].grad = np.array([3.0, 0.0])
    p["b"].grad = np.array([4.0])
    assert nn.clip_grad_norm(p, 0.5) == pytest.approx(5.0)
    total = np.sqrt(np.sum(p.grads("a") ** 2) + np.sum(p.grads("b") ** 2))
    assert total == pytest.approx(0.5, rel=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    p = nn.ParamStore()
    nn.init_mlp(p, "m", [3, 4, 2], np.random.default_rng(4))
    p.add("frozen", np.arange(6.0).reshape(2, 3), learnable=False)
    p.step_count = 17
    path = tmp_path / "ckpt.json"
    p.save(path)
    q = nn.ParamStore.load(path)
    assert q.names() == p.names() and q.step_count == 17
    for k in p.names():
        assert np.array_equal(q.values(k), p.values(k))
        assert q.is_learnable(k) == p.is_learnable(k)
    with pytest.raises(ValueError):
        nn.ParamStore.from_dict({"format": "other"})


def test_forward_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = nn.ParamStore()
        nn.init_mlp(p, "m", [6, 8, 3], rng)
        return nn.mlp(p, "m", nn.Tensor(rng.standard_normal((10, 6)))).data

    assert np.array_equal(run(), run())


def test_grad_check_flags_wrong_backward(rng):
    p = nn.ParamStore()
    p.add("a", rng.standard_normal(4))

    def bad_square(x):
        return nn._make(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

    rep = nn.grad_check(lambda: nn.tsum(bad_square(p["a"])), p, max_entries=None)
    assert not rep.passed
    assert rep.max_rel_error > 0.4


def test_grad_check_accepts_zero_gradient(rng):
    # softmax ignores a constant shift, so the gradient is exactly zero
    p = nn.ParamStore()
    p.add("shift", np.zeros(1))
    x = rng.standard_normal(5)
    w = rng.standard_normal(5)
    rep = nn.grad_check(lambda: nn.tsum(nn.softmax(nn.Tensor(x) + p["shift"]) * w), p, max_entries=None)
    assert rep.passed
