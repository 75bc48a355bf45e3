import math

import numpy as np
import pytest

from dagcomm.errors import CheckpointError, ContractError, DimensionError, NumericError
from dagcomm.numkit import (MAGIC, MlpParams, grad_check, init_mlp, init_optim, load_params, mlp_backward,
                            mlp_forward, optim_step, params_from_named, params_to_named, save_params, softmax)


def single_layer(w, b, output="identity"):
    return MlpParams([np.asarray(w, dtype=float)], [np.asarray(b, dtype=float)], output)


def test_zero_network_outputs_zeros():
    params = init_mlp([3, 4, 2], np.random.default_rng(0)).zeros_like()
    out, _ = mlp_forward(params, np.array([0.3, -1.0, 2.0]))
    assert np.array_equal(out, np.zeros(2))


def test_identity_layer():
    params = single_layer(np.eye(2), np.zeros(2))
    out, _ = mlp_forward(params, np.array([1.0, 2.0]))
    assert out.tolist() == [1.0, 2.0]


def test_two_three_one_tanh_net_matches_hand_evaluation():
    params = init_mlp([2, 3, 1], np.random.default_rng(0), output="tanh")
    x = [0.5, -0.5]
    W0, b0, W1, b1 = params.arrays()
    hidden = []
    for j in range(3):
        hidden.append(math.tanh(x[0] * W0[0, j] + x[1] * W0[1, j] + b0[j]))
    expected = math.tanh(sum(hidden[j] * W1[j, 0] for j in range(3)) + b1[0])
    out, _ = mlp_forward(params, np.array(x))
    assert out[0] == pytest.approx(expected, abs=1e-12)


def test_input_width_mismatch():
    params = init_mlp([3, 2], np.random.default_rng(0))
    with pytest.raises(DimensionError):
        mlp_forward(params, np.zeros(4))


def test_non_finite_output_raises():
    params = single_layer([[1e308], [1e308]], [0.0])
    with pytest.raises(NumericError):
        mlp_forward(params, np.array([10.0, 10.0]))


def test_identity_backward_gives_weight_row():
    w = np.array([[0.7], [-1.3]])
    params = single_layer(w, [0.0])
    _, cache = mlp_forward(params, np.array([2.0, 3.0]))
    _, input_grad = mlp_backward(params, cache, np.array([1.0]))
    assert input_grad.tolist() == pytest.approx(w[:, 0].tolist())


def test_zero_upstream_gives_zero_grads():
    params = init_mlp([4, 5, 2], np.random.default_rng(1), output="softmax")
    _, cache = mlp_forward(params, np.ones(4))
    grads, input_grad = mlp_backward(params, cache, np.zeros(2))
    assert all(not a.any() for a in grads.arrays())
    assert not input_grad.any()


def test_stale_cache_rejected():
    small = init_mlp([4, 2], np.random.default_rng(0))
    big = init_mlp([4, 5, 2], np.random.default_rng(0))
    _, cache = mlp_forward(small, np.ones(4))
    with pytest.raises(ContractError):
        mlp_backward(big, cache, np.ones(2))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("sizes,output", [([4, 5, 2], "identity"), ([3, 4, 2], "tanh"),
                                          ([4, 5, 3], "softmax"), ([6, 8, 4, 1], "identity")])
def test_grad_check_passes(seed, sizes, output):
    rng = np.random.default_rng(seed)
    params = init_mlp(sizes, rng, output=output)
    x = rng.normal(size=sizes[0])
    assert grad_check(params, x, eps=1e-5) < 1e-4


def test_grad_check_batched_input():
    rng = np.random.default_rng(3)
    params = init_mlp([3, 4, 2], rng, output="tanh")
    assert grad_check(params, rng.normal(size=(5, 3)), eps=1e-5) < 1e-4


# (obs_dim, action slots) of pp, pcp and tj with the default 32-wide hidden state,
# 16-wide messages and the 64-wide critic over five agents.
POLICY_SHAPES = [
    pytest.param(sizes, output, id=name)
    for env, obs_dim, slots in (("pp", 29, 5), ("pcp", 40, 6), ("tj", 35, 2))
    for name, sizes, output in (
        (f"{env}-encoder", [obs_dim, 32], "tanh"),
        (f"{env}-update", [32 + 16 + slots, 32], "tanh"),
        (f"{env}-actor", [32, slots], "softmax"),
    )
] + [
    pytest.param([32, 16], "identity", id="msg_head"),
    pytest.param([5 * 32, 64, 5], "identity", id="critic"),
]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("sizes,output", POLICY_SHAPES)
def test_grad_check_on_policy_shapes(seed, sizes, output):
    rng = np.random.default_rng(seed)
    params = init_mlp(sizes, rng, output=output)
    assert grad_check(params, rng.normal(size=(4, sizes[0])), eps=1e-5) < 1e-4


def test_grad_check_linear_net_is_exact():
    rng = np.random.default_rng(0)
    params = init_mlp([3, 2], rng, output="identity")
    assert grad_check(params, rng.normal(size=3), eps=1e-5) < 1e-8


def test_grad_check_detects_corrupted_backward():
    rng = np.random.default_rng(0)
    params = init_mlp([3, 4, 2], rng, output="tanh")

    def broken(p, cache, upstream):
        grads, input_grad = mlp_backward(p, cache, upstream)
        arrays = [a.copy() for a in grads.arrays()]
        arrays[0][0, 0] *= 2.0
        return grads.with_arrays(arrays), input_grad

    assert grad_check(params, np.array([0.4, -0.2, 0.9]), eps=1e-5, backward=broken) > 1e-2


def test_grad_check_eps_range():
    params = init_mlp([2, 2], np.random.default_rng(0))
    with pytest.raises(ContractError):
        grad_check(params, np.ones(2), eps=1e-2)


def test_zero_grads_leave_params_unchanged():
    params = init_mlp([3, 2], np.random.default_rng(0))
    state = init_optim(params)
    new, new_state = optim_step(params, params.zeros_like(), state)
    for a, b in zip(params.arrays(), new.arrays()):
        assert np.array_equal(a, b)
    assert new_state.step == 1


def test_sgd_step():
    params = single_layer([[0.0]], [0.0])
    grads = single_layer([[1.0]], [0.0])
    new, _ = optim_step(params, grads, init_optim(params, lr=0.1, mode="sgd"))
    assert new.weights[0][0, 0] == pytest.approx(-0.1)


def test_adam_shrinks_quadratic():
    params = single_layer([[1.0]], [0.0])
    state = init_optim(params, lr=0.1)
    previous = 1.0
    for _ in range(3):
        x = params.weights[0][0, 0]
        params, state = optim_step(params, single_layer([[2.0 * x]], [0.0]), state)
        current = abs(params.weights[0][0, 0])
        assert current < previous
        previous = current
    assert state.step == 3


def test_optim_step_is_functional():
    params = init_mlp([2, 2], np.random.default_rng(0))
    before = [a.copy() for a in params.arrays()]
    state = init_optim(params)
    optim_step(params, params.copy(), state)
    for a, b in zip(before, params.arrays()):
        assert np.array_equal(a, b)
    assert state.step == 0


def test_non_finite_gradient_names_layer():
    params = init_mlp([2, 3, 2], np.random.default_rng(0))
    arrays = [np.zeros_like(a) for a in params.arrays()]
    arrays[2][0, 0] = np.nan
    with pytest.raises(NumericError) as info:
        optim_step(params, params.with_arrays(arrays), init_optim(params))
    assert info.value.layer == 1


def test_softmax_examples():
    assert softmax(np.array([0.0, 0.0])).tolist() == pytest.approx([0.5, 0.5])
    big = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0)
    assert softmax(np.log([1.0, 2.0, 3.0])).tolist() == pytest.approx([1 / 6, 2 / 6, 3 / 6], abs=1e-12)


def test_softmax_sum_and_permutation():
    v = np.random.default_rng(0).normal(size=7)
    perm = np.random.default_rng(1).permutation(7)
    assert softmax(v).sum() == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(softmax(v[perm]), softmax(v)[perm])


def test_softmax_empty():
    with pytest.raises(ContractError):
        softmax(np.array([]))


def test_forward_backward_repeatable():
    rng = np.random.default_rng(5)
    params = init_mlp([4, 6, 3], rng, output="softmax")
    x = rng.normal(size=(2, 4))
    out1, cache1 = mlp_forward(params, x)
    out2, cache2 = mlp_forward(params, x)
    assert out1.tobytes() == out2.tobytes()
    g1, _ = mlp_backward(params, cache1, np.ones_like(out1))
    g2, _ = mlp_backward(params, cache2, np.ones_like(out2))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1.arrays(), g2.arrays()))


def test_checkpoint_file_roundtrip(tmp_path):
    params = init_mlp([3, 4, 2], np.random.default_rng(0), output="softmax")
    path = tmp_path / "net.bin"
    save_params(path, params_to_named("actor/0", params))
    assert path.read_bytes()[:8] == MAGIC
    restored = params_from_named("actor/0", load_params(path), "softmax")
    for a, b in zip(params.arrays(), restored.arrays()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_params(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "net.bin"
    save_params(path, params_to_named("enc", init_mlp([3, 4], np.random.default_rng(0))))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_params(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "absent.bin")
