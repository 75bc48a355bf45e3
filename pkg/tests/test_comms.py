import numpy as np
import pandas as pd
import pytest

from dagcomm.comms import (CommLedger, Message, action_summary, aggregate, count_comm, degree_table,
                           encode_message, propagate, propagate_backward)
from dagcomm.errors import ContractError
from dagcomm.numkit import MlpParams, init_mlp, mlp_backward, mlp_forward
from dagcomm.topology import Dag

H, M, SLOTS = 6, 4, 3


def make_nets(n, seed=0):
    rng = np.random.default_rng(seed)
    updates = [init_mlp([H + M + SLOTS, H], rng, output="tanh") for _ in range(n)]
    heads = [init_mlp([H, M], rng) for _ in range(n)]
    return updates, heads


def make_hiddens(n, T=1, seed=1):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(T, H)) for _ in range(n)]


def test_encode_zero():
    head = init_mlp([H, M], np.random.default_rng(0)).zeros_like()
    assert not encode_message(np.zeros(H), head).any()


def test_encode_identity_head_is_prefix():
    head = MlpParams([np.eye(H)[:, :M]], [np.zeros(M)])
    hidden = np.arange(H, dtype=float)
    assert encode_message(hidden, head).tolist() == hidden[:M].tolist()


def test_encode_gradient_wrt_hidden():
    rng = np.random.default_rng(2)
    head = init_mlp([H, 8, M], rng)
    hidden = rng.normal(size=H)
    upstream = rng.normal(size=M)
    _, cache = mlp_forward(head, hidden)
    _, analytic = mlp_backward(head, cache, upstream)
    eps = 1e-5
    for i in range(H):
        d = np.zeros(H)
        d[i] = eps
        numeric = (upstream @ encode_message(hidden + d, head) - upstream @ encode_message(hidden - d, head)) / (2 * eps)
        assert analytic[i] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_aggregate_examples():
    v = np.array([1.0, -2.0, 0.5])
    assert aggregate([Message(0, 0, v)]).tolist() == v.tolist()
    assert not aggregate([v, -v]).any()
    vectors = [np.array([1.0, 2.0]), np.array([3.0, 0.0]), np.array([-1.0, 4.0])]
    assert aggregate(vectors).tolist() == pytest.approx([1.0, 2.0])
    assert aggregate([], width=5).tolist() == [0.0] * 5


def test_aggregate_rejects_mixed_widths():
    with pytest.raises(ContractError):
        aggregate([np.zeros(2), np.zeros(3)])
    with pytest.raises(ContractError):
        aggregate([np.zeros(2)], mode="max")


def test_action_summary():
    summary = action_summary([np.array([0, 2]), np.array([0, -1])], n_slots=3, n_steps=2)
    assert summary.tolist() == [[1.0, 0.0, 0.0], [0.0, 0.0, 0.5]]


def test_empty_dag_matches_no_communication():
    n = 3
    updates, heads = make_nets(n)
    hiddens = make_hiddens(n)
    ledger = CommLedger()
    prop, _ = propagate(Dag.empty(n), hiddens, np.full((n, 1), -1), updates, heads, SLOTS, ledger)
    assert ledger.total == 0
    for a in range(n):
        x = np.concatenate([hiddens[a], np.zeros((1, M)), np.zeros((1, SLOTS))], axis=1)
        expected, _ = mlp_forward(updates[a], x)
        assert np.array_equal(prop.agents[a].enriched, expected)


def test_chain_transitive_dependency():
    n = 3
    dag = Dag.from_edges(n, [(0, 1), (1, 2)])
    updates, heads = make_nets(n)
    hiddens = make_hiddens(n)
    ledger = CommLedger()
    prop, _ = propagate(dag, hiddens, np.full((n, 1), -1), updates, heads, SLOTS, ledger)
    assert ledger.total == 2
    changed = [h.copy() for h in hiddens]
    changed[0] += 0.5
    prop2, _ = propagate(dag, changed, np.full((n, 1), -1), updates, heads, SLOTS)
    assert not np.allclose(prop.agents[2].enriched, prop2.agents[2].enriched)


@pytest.mark.parametrize("T", [1, 4])
def test_broadcast_ledger_count(T):
    n = 5
    updates, heads = make_nets(n)
    ledger = CommLedger()
    prop, _ = propagate(None, make_hiddens(n, T), np.full((n, T), -1), updates, heads, SLOTS, ledger,
                        broadcast=True)
    assert ledger.total == 20 * T
    assert set(ledger.per_step().values()) == {20}
    assert prop.n_rounds == 1


def test_dag_ledger_count_and_round_monotonicity():
    n = 5
    dag = Dag.from_edges(n, [(0, 2), (1, 2), (2, 3), (0, 4), (3, 4)])
    updates, heads = make_nets(n)
    ledger = CommLedger()
    propagate(dag, make_hiddens(n, T=3), np.full((n, 3), -1), updates, heads, SLOTS, ledger, step=10)
    assert ledger.total == dag.n_edges * 3
    assert sorted(ledger.per_step()) == [(0, 10), (0, 11), (0, 12)]
    for _, _, r, s, t in ledger.records:
        assert dag.round_of[s] < dag.round_of[t] == r


def test_causality_with_silent_upstream():
    # Silent message heads only cut the message channel; with no shared actions
    # the receiver is then indistinguishable from an isolated agent.
    n = 3
    dag = Dag.from_edges(n, [(0, 2), (1, 2)])
    updates, heads = make_nets(n)
    silent = [h.zeros_like() for h in heads]
    hiddens = make_hiddens(n)
    with_comm, _ = propagate(dag, hiddens, np.full((n, 1), -1), updates, silent, SLOTS)
    without, _ = propagate(Dag.empty(n), hiddens, np.full((n, 1), -1), updates, silent, SLOTS)
    assert np.array_equal(with_comm.agents[2].enriched, without.agents[2].enriched)


def test_silent_upstream_still_shares_actions():
    n = 3
    dag = Dag.from_edges(n, [(0, 2), (1, 2)])
    updates, heads = make_nets(n)
    silent = [h.zeros_like() for h in heads]
    hiddens = make_hiddens(n)
    actions = np.array([[1], [2], [-1]])
    with_comm, _ = propagate(dag, hiddens, actions, updates, silent, SLOTS)
    without, _ = propagate(Dag.empty(n), hiddens, actions, updates, silent, SLOTS)
    assert not np.allclose(with_comm.agents[2].enriched, without.agents[2].enriched)

    summary = action_summary([np.array([1]), np.array([2])], SLOTS, 1)
    assert summary.tolist() == [[0.0, 0.5, 0.5]]
    x = np.concatenate([hiddens[2], np.zeros((1, M)), summary], axis=1)
    expected, _ = mlp_forward(updates[2], x)
    assert np.allclose(with_comm.agents[2].enriched, expected)


def test_actions_selected_round_by_round():
    n = 3
    dag = Dag.from_edges(n, [(0, 1), (1, 2)])
    updates, heads = make_nets(n)
    calls = []

    def select(round_, agents, prop):
        calls.append((round_, list(agents)))
        return {a: np.array([a % SLOTS]) for a in agents}

    prop, actions = propagate(dag, make_hiddens(n), np.full((n, 1), -1), updates, heads, SLOTS,
                              select_actions=select)
    assert calls == [(0, [0]), (1, [1]), (2, [2])]
    assert actions[:, 0].tolist() == [0, 1, 2]
    assert prop.agents[1].act.tolist() == [[1.0, 0.0, 0.0]]
    assert prop.agents[2].act.tolist() == [[0.0, 1.0, 0.0]]


def test_agent_count_mismatch():
    updates, heads = make_nets(3)
    with pytest.raises(ContractError):
        propagate(Dag.empty(4), make_hiddens(3), np.full((3, 1), -1), updates, heads, SLOTS)


def _scalar(prop, c, d):
    return sum(float(np.sum(ci * a.enriched)) + float(np.sum(di * a.payload)) for a, ci, di in zip(prop.agents, c, d))


@pytest.mark.parametrize("broadcast", [False, True])
@pytest.mark.parametrize("seed", range(10))
def test_propagate_backward_matches_finite_differences(broadcast, seed):
    n, T = 4, 2
    dag = Dag.from_edges(n, [(0, 1), (0, 2), (1, 3), (2, 3)])
    updates, heads = make_nets(n, seed)
    hiddens = make_hiddens(n, T, seed + 10)
    actions = np.random.default_rng(seed).integers(0, SLOTS, size=(n, T))
    rng = np.random.default_rng(seed + 20)
    c = [rng.normal(size=(T, H)) for _ in range(n)]
    d = [rng.normal(size=(T, M)) for _ in range(n)]

    def run(hs, upd, hd):
        return propagate(dag, hs, actions, upd, hd, SLOTS, broadcast=broadcast)[0]

    prop = run(hiddens, updates, heads)
    g_hidden, upd_grads, msg_grads = propagate_backward(prop, c, d, updates, heads)
    eps = 1e-6
    for agent in range(n):
        for idx in np.ndindex(hiddens[agent].shape):
            plus = [h.copy() for h in hiddens]
            minus = [h.copy() for h in hiddens]
            plus[agent][idx] += eps
            minus[agent][idx] -= eps
            numeric = (_scalar(run(plus, updates, heads), c, d)
                       - _scalar(run(minus, updates, heads), c, d)) / (2 * eps)
            assert g_hidden[agent][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    for agent in range(n):
        for nets, grads, which in ((heads, msg_grads, "msg"), (updates, upd_grads, "update")):
            for k, array in enumerate(nets[agent].arrays()):
                for idx in np.ndindex(array.shape):
                    shifted = []
                    for sign in (1, -1):
                        arrays = [a.copy() for a in nets[agent].arrays()]
                        arrays[k][idx] += sign * eps
                        changed = list(nets)
                        changed[agent] = nets[agent].with_arrays(arrays)
                        if which == "msg":
                            shifted.append(_scalar(run(hiddens, updates, changed), c, d))
                        else:
                            shifted.append(_scalar(run(hiddens, changed, heads), c, d))
                    numeric = (shifted[0] - shifted[1]) / (2 * eps)
                    analytic = grads[agent].arrays()[k][idx]
                    assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8), f"{which}{agent}[{k}]{idx}"


def test_count_comm():
    ledger = CommLedger()
    assert count_comm(ledger, 3) == 0
    for k in range(200):
        ledger.record(k % 2, k, 1, 0, 1)
    assert count_comm(ledger, 2) == 100
    with pytest.raises(ContractError):
        count_comm(ledger, 0)


def test_ledger_csv_and_degrees(tmp_path):
    ledger = CommLedger()
    for rec in [(0, 0, 1, 0, 1), (0, 0, 1, 0, 2), (0, 0, 2, 1, 2), (1, 3, 1, 0, 1)]:
        ledger.record(*rec)
    path = tmp_path / "ledger.csv"
    ledger.write_csv(path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == CommLedger.COLUMNS
    assert len(frame) == 4
    table = degree_table(frame)
    assert table.to_dict("records") == [
        {"agent": 0, "sent": 3, "received": 0},
        {"agent": 1, "sent": 1, "received": 2},
        {"agent": 2, "sent": 0, "received": 2},
    ]


def test_empty_ledger_csv_has_header(tmp_path):
    path = tmp_path / "ledger.csv"
    CommLedger().write_csv(path)
    assert path.read_text().strip() == "episode,step,round,sender,receiver"
