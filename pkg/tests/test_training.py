import numpy as np
import pytest
from pydantic import ValidationError

from dagcomm import metrics
from dagcomm.comms import CommLedger
from dagcomm.envs import make_env
from dagcomm.errors import CheckpointError, ContractError, NumericError
from dagcomm.numkit import mlp_backward, mlp_forward, optim_step, init_optim
from dagcomm.policy import build_policies, joint_forward
from dagcomm.topology import Dag
from dagcomm.training import (CommPlan, EpisodeTrace, TrainConfig, compute_loss, discounted_returns, evaluate,
                              fixed_plan, init_policies, load_checkpoint, rollout, rollout_threads,
                              save_checkpoint, train)


def small_config(**overrides):
    values = dict(env="tj", epochs=2, batches_per_epoch=1, episodes_per_batch=4, eval_episodes=0,
                  hidden=8, msg_width=4, critic_hidden=8, threads=1)
    values.update(overrides)
    return TrainConfig(**values)


def synthetic_trace(plan, seed=0, n=2, T=3, obs_dim=4, n_actions=3):
    rng = np.random.default_rng(seed)
    return EpisodeTrace(
        obs=rng.normal(size=(n, T, obs_dim)),
        actions=rng.integers(0, n_actions, size=(n, T)),
        log_probs=np.zeros((n, T)),
        rewards=rng.normal(size=(n, T)),
        payloads=np.zeros((n, T, 4)),
        active=np.ones((n, T), dtype=bool),
        fresh=np.zeros((n, T), dtype=bool),
        plan=plan,
        ledger=CommLedger(),
        success=False,
        length=T,
    )


def synthetic_policies(seed=0):
    return build_policies(4, [0, 0], [3], np.random.default_rng(seed), hidden=5, msg_width=4, critic_hidden=6)


def test_discounted_returns():
    rewards = np.array([[1.0, 1.0, 1.0]])
    assert discounted_returns(rewards, 0.5).tolist() == [[1.75, 1.5, 1.0]]
    cut = np.array([[True, False, False]])
    assert discounted_returns(rewards, 0.5, cut).tolist() == [[1.5, 1.0, 1.0]]


def test_config_rejects_unknown_and_incomplete():
    with pytest.raises(ValidationError):
        TrainConfig(epochz=3)
    with pytest.raises(ValidationError):
        TrainConfig(topology="shuffled")
    with pytest.raises(ValidationError):
        TrainConfig(lambda_iei=-1.0)
    assert TrainConfig().gamma == 0.99


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("DAGCOMM_THREADS", "6")
    assert rollout_threads(TrainConfig()) == 6
    assert rollout_threads(TrainConfig(threads=2)) == 2


def test_fixed_plans():
    assert fixed_plan(TrainConfig(topology="broadcast"), 5).broadcast
    assert fixed_plan(TrainConfig(topology="none"), 5).dag.n_edges == 0
    assert fixed_plan(TrainConfig(topology="fc-d2"), 5).dag.depth == 2
    assert fixed_plan(TrainConfig(topology="learned"), 5) is None
    shuffled = fixed_plan(TrainConfig(topology="shuffled", fixed_edges=[(0, 1), (1, 2)]), 5).dag
    assert shuffled.n_edges == 2 and shuffled.depth == 2


def test_policy_groups():
    pcp = make_env("pcp")
    shared = init_policies(small_config(env="pcp"), pcp)
    assert len(shared.nets["actor"]) == 2
    assert shared.n_actions == [5, 6]
    separate = init_policies(small_config(env="pcp", share_weights=False), pcp)
    assert len(separate.nets["actor"]) == 5
    assert separate.n_actions == [5, 5, 5, 6, 6]


def test_rollout_without_communication():
    env = make_env("pp", max_steps=6)
    policies = init_policies(small_config(env="pp"), env)
    trace = rollout(env, policies, CommPlan(Dag.empty(5)), seed=0)
    assert trace.ledger.total == 0
    assert trace.obs.shape == (5, trace.length, env.obs_dim)
    assert trace.values.shape == (trace.length, 5)


def test_broadcast_tj_ledger_total():
    env = make_env("tj")
    policies = init_policies(small_config(), env)
    trace = rollout(env, policies, CommPlan(None, broadcast=True), seed=3)
    assert trace.length == 20
    assert trace.ledger.total == 400


def test_rollout_deterministic():
    env = make_env("tj")
    policies = init_policies(small_config(), env)
    plan = CommPlan(Dag.from_edges(5, [(0, 1), (1, 2), (0, 3)]))
    a = rollout(env, policies, plan, seed=11)
    b = rollout(env, policies, plan, seed=11)
    for key in ("obs", "actions", "log_probs", "rewards", "payloads", "values"):
        assert getattr(a, key).tobytes() == getattr(b, key).tobytes()
    assert a.ledger.records == b.ledger.records


def test_rollout_payloads_match_replay():
    env = make_env("tj")
    policies = init_policies(small_config(), env)
    plan = CommPlan(Dag.from_edges(5, [(0, 2), (1, 2), (2, 4)]))
    trace = rollout(env, policies, plan, seed=5)
    jp = joint_forward(policies, trace.obs, plan.dag, plan.broadcast, trace.actions)
    assert np.allclose(np.stack(jp.prop.payloads), trace.payloads)
    chosen = np.stack([np.log(p[np.arange(trace.length), trace.actions[a]]) for a, p in enumerate(jp.probs)])
    assert np.allclose(chosen, trace.log_probs)


def test_loss_without_regularizers_is_plain_actor_critic():
    plan = CommPlan(None, broadcast=True)
    traces = [synthetic_trace(plan, seed=s) for s in range(3)]
    policies = synthetic_policies()
    plain = compute_loss(traces, policies, TrainConfig())
    expected = plain.parts["actor"] + plain.parts["value"] - 0.01 * plain.parts["entropy"]
    assert plain.loss == pytest.approx(expected, abs=1e-12)
    regularized = compute_loss(traces, policies, TrainConfig(lambda_iei=0.01, lambda_sei=0.02))
    assert regularized.loss - plain.loss == pytest.approx(0.01 * plain.iei + 0.02 * plain.sei, abs=1e-12)


@pytest.mark.parametrize("plan", [CommPlan(Dag.from_edges(2, [(0, 1)])), CommPlan(None, broadcast=True)])
@pytest.mark.parametrize("seed", range(10))
def test_full_loss_gradient(plan, seed):
    config = TrainConfig(lambda_iei=0.05, lambda_sei=0.05, entropy_bonus=0.02)
    traces = [synthetic_trace(plan, seed=seed), synthetic_trace(plan, seed=seed + 50)]
    policies = synthetic_policies(seed)
    rng = np.random.default_rng(seed + 100)
    advantages = [rng.normal(size=(2, 3)) for _ in traces]
    result = compute_loss(traces, policies, config, advantages=advantages)

    bundles = policies.bundles()
    eps = 1e-6
    for name, net in bundles.items():
        for k, array in enumerate(net.arrays()):
            for idx in np.ndindex(array.shape):
                values = []
                for sign in (1, -1):
                    arrays = [a.copy() for a in net.arrays()]
                    arrays[k][idx] += sign * eps
                    changed = dict(bundles)
                    changed[name] = net.with_arrays(arrays)
                    values.append(compute_loss(traces, policies.with_bundles(changed), config,
                                               advantages=advantages).loss)
                numeric = (values[0] - values[1]) / (2 * eps)
                analytic = result.grads[name].arrays()[k][idx]
                assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8), f"{name}[{k}]{idx}"


def test_one_hot_payloads_have_zero_iei():
    payload = np.zeros((4, 6, 4))
    payload[..., 1] = 2.0
    iei_value = metrics.iei(payload.reshape(-1, 4))
    assert iei_value == pytest.approx(0.0, abs=1e-12)


def test_iei_regularizer_alone_lowers_entropy():
    rng = np.random.default_rng(0)
    policies = synthetic_policies(1)
    head = policies.nets["msg_head"][0]
    hiddens = rng.normal(size=(30, 5))
    state = init_optim(head, lr=0.003, mode="sgd")
    previous = None
    for _ in range(25):
        payloads, cache = mlp_forward(head, hiddens)
        value = metrics.iei(payloads)
        if previous is not None:
            assert value < previous
        previous = value
        grads, _ = mlp_backward(head, cache, metrics.iei_grad(payloads))
        head, state = optim_step(head, grads, state)


def test_non_finite_term_is_named():
    plan = CommPlan(None, broadcast=True)
    trace = synthetic_trace(plan)
    trace.rewards[0, 1] = np.nan
    with pytest.raises(NumericError) as info:
        compute_loss([trace], synthetic_policies(), TrainConfig(), advantages=[np.zeros((2, 3))])
    assert info.value.term == "value"


def test_empty_batch_rejected():
    with pytest.raises(ContractError):
        compute_loss([], synthetic_policies(), TrainConfig())


def test_zero_epochs_returns_initial_parameters():
    config = small_config(epochs=0)
    result = train(config)
    assert result.records == []
    initial = init_policies(config, make_env("tj"))
    for name, net in initial.bundles().items():
        for a, b in zip(net.arrays(), result.policies.bundles()[name].arrays()):
            assert np.array_equal(a, b)


def test_train_emits_one_record_per_epoch():
    result = train(small_config(epochs=3))
    assert [r.epoch for r in result.records] == [1, 2, 3]
    for record in result.records:
        assert record.avg_steps == 20.0
        assert record.c_comm == 400.0


def test_training_independent_of_thread_count():
    single = train(small_config(threads=1))
    pooled = train(small_config(threads=4))
    assert [r.row() for r in single.records] == [r.row() for r in pooled.records]


def test_regularizer_changes_nothing_before_first_update():
    off = train(small_config())
    on = train(small_config(lambda_iei=0.5, lambda_sei=0.5))
    first_off, first_on = off.records[0], on.records[0]
    for name in ("success_rate", "avg_steps", "c_comm", "iei", "sei"):
        assert getattr(first_off, name) == getattr(first_on, name)
    assert off.records[1].iei != on.records[1].iei


def test_learned_topology_training():
    result = train(small_config(env="pp", max_steps=8, topology="learned"))
    assert result.learner is not None
    assert result.plan.dag is not None and not result.plan.broadcast


def test_periodic_checkpoints():
    seen = []
    train(small_config(epochs=4, checkpoint_every=2), checkpoint_fn=lambda e, p, l: seen.append(e))
    assert seen == [2, 4]


def test_evaluate_repeatable_and_ledger_identity():
    env = make_env("pp", max_steps=10)
    policies = init_policies(small_config(env="pp"), env)
    plan = CommPlan(None, broadcast=True)
    first = evaluate(policies, plan, env, n=3, seed=2)
    again = evaluate(policies, plan, env, n=3, seed=2)
    assert first == again
    assert first.c_comm == pytest.approx(first.avg_steps * 20)
    assert first.epoch == 0 and first.loss == 0.0


def test_checkpoint_roundtrip(tmp_path):
    config = small_config(env="pp", max_steps=8, topology="learned", epochs=1)
    result = train(config)
    path = tmp_path / "final.bin"
    save_checkpoint(path, result.policies, result.learner, {"note": "x"})
    policies, learner, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert np.array_equal(learner.edge_logits, result.learner.edge_logits)
    for name, net in result.policies.bundles().items():
        restored = policies.bundles()[name]
        assert restored.output == net.output
        assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), restored.arrays()))


def test_checkpoint_without_sidecar(tmp_path):
    policies = synthetic_policies()
    path = tmp_path / "final.bin"
    save_checkpoint(path, policies)
    (tmp_path / "final.bin.json").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
