"""
Message passing between agents.

In DAG mode agents are processed round by round: an agent in round r averages
the payloads of its in-neighbours (all in earlier rounds), mean-pools the
one-hot actions those neighbours already took, and feeds
[own hidden | aggregate | action summary] through its update network. Its
outgoing payload is the message head applied to the enriched hidden, so
information travels transitively along paths. Round-0 agents see zero
aggregates, which is also exactly what every agent sees without communication.

The broadcast baseline (CommNet style) runs one simultaneous round: every agent
encodes a payload from its local hidden and receives the mean of everybody
else's.

All arrays carry a leading time axis (T, width) so the same code serves single
environment steps during rollouts (T = 1) and whole episodes during the loss.
"""

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dagcomm.errors import ContractError, DimensionError
from dagcomm.numkit import MlpCache, MlpParams, mlp_backward, mlp_forward
from dagcomm.topology import Dag

DEFAULT_WIDTH = 16


@dataclass
class Message:
    sender: int
    round: int
    payload: np.ndarray


class CommLedger:
    """Every point-to-point transmission, one (episode, step, round, sender, receiver) row each."""

    COLUMNS = ["episode", "step", "round", "sender", "receiver"]

    def __init__(self):
        self.records = []

    def record(self, episode: int, step: int, round_: int, sender: int, receiver: int) -> None:
        self.records.append((episode, step, round_, sender, receiver))

    def extend(self, other: "CommLedger", episode: Optional[int] = None) -> None:
        if episode is None:
            self.records.extend(other.records)
        else:
            self.records.extend((episode,) + rec[1:] for rec in other.records)

    @property
    def total(self) -> int:
        return len(self.records)

    def per_step(self) -> Dict[tuple, int]:
        return dict(Counter((rec[0], rec[1]) for rec in self.records))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=self.COLUMNS)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def count_comm(ledger: CommLedger, n_episodes: int) -> float:
    """Average number of transmissions per episode (C_comm)."""
    if n_episodes <= 0:
        raise ContractError(f"need at least one episode to average over, got {n_episodes}")
    return ledger.total / n_episodes


def degree_table(ledger_frame: pd.DataFrame) -> pd.DataFrame:
    """Per-agent number of transmissions sent and received, busiest senders first."""
    sent, received = Counter(), Counter()
    for sender, receiver in zip(ledger_frame["sender"], ledger_frame["receiver"]):
        sent[int(sender)] += 1
        received[int(receiver)] += 1
    agents = sorted(set(sent) | set(received))
    table = pd.DataFrame({
        "agent": agents,
        "sent": [sent.get(a, 0) for a in agents],
        "received": [received.get(a, 0) for a in agents],
    })
    return table.sort_values(["sent", "agent"], ascending=[False, True]).reset_index(drop=True)


def encode_message(hidden: np.ndarray, msg_head: MlpParams) -> np.ndarray:
    """Payload of a message: the message head applied to an (enriched) hidden state."""
    payload, _ = mlp_forward(msg_head, hidden)
    return payload


def aggregate(incoming: Sequence, mode: str = "mean", width: int = DEFAULT_WIDTH) -> np.ndarray:
    """
    Combine incoming payloads (Message objects or raw arrays). An empty inbox gives zeros.
    """
    if mode != "mean":
        raise ContractError(f"unknown aggregation mode '{mode}'")
    payloads = [m.payload if isinstance(m, Message) else np.asarray(m, dtype=np.float64) for m in incoming]
    if not payloads:
        return np.zeros(width)
    shapes = {p.shape for p in payloads}
    if len(shapes) != 1:
        raise ContractError(f"payload widths differ: {sorted(shapes)}")
    return np.mean(payloads, axis=0)


def action_summary(actions: Sequence[np.ndarray], n_slots: int, n_steps: int) -> np.ndarray:
    """Mean-pooled one-hot of the given (T,) action arrays; -1 entries encode as zeros."""
    out = np.zeros((n_steps, n_slots))
    if not len(actions):
        return out
    rows = np.arange(n_steps)
    for acts in actions:
        acts = np.asarray(acts)
        known = acts >= 0
        out[rows[known], acts[known]] += 1.0
    return out / len(actions)


@dataclass
class AgentPass:
    """Forward record of one agent for one propagation."""

    hidden: np.ndarray
    agg: np.ndarray
    act: np.ndarray
    enriched: np.ndarray
    payload: np.ndarray
    round: int
    upd_cache: MlpCache
    msg_cache: MlpCache
    # broadcast mode only: the local pass that produced the payload
    local_cache: Optional[MlpCache] = None


@dataclass
class Propagation:
    broadcast: bool
    dag: Optional[Dag]
    agents: List[AgentPass] = field(default_factory=list)
    order: List[int] = field(default_factory=list)
    n_rounds: int = 0

    @property
    def enriched(self) -> List[np.ndarray]:
        return [a.enriched for a in self.agents]

    @property
    def payloads(self) -> List[np.ndarray]:
        return [a.payload for a in self.agents]

    def senders(self) -> List[int]:
        if self.broadcast:
            return list(range(len(self.agents))) if len(self.agents) > 1 else []
        return self.dag.senders()


def _check_inputs(n, hiddens, update_nets, msg_heads, actions):
    if len(hiddens) != n or len(update_nets) != n or len(msg_heads) != n:
        raise ContractError(f"topology has {n} agents but got {len(hiddens)} hiddens, "
                            f"{len(update_nets)} update networks and {len(msg_heads)} message heads")
    if actions.shape[0] != n:
        raise ContractError(f"topology has {n} agents but actions cover {actions.shape[0]}")
    widths = {h.shape for h in hiddens}
    if len(widths) != 1 or hiddens[0].ndim != 2:
        raise DimensionError(f"hiddens must share one (T, H) shape, got {sorted(widths)}")


def propagate(dag: Optional[Dag], hiddens: Sequence[np.ndarray], actions: np.ndarray,
              update_nets: Sequence[MlpParams], msg_heads: Sequence[MlpParams], n_action_slots: int,
              ledger: Optional[CommLedger] = None, *, broadcast: bool = False,
              select_actions: Optional[Callable] = None, episode: int = 0, step: int = 0) -> Tuple[Propagation, np.ndarray]:
    """
    Run one step of communication for every agent.

    Args:
        dag: communication DAG (ignored when broadcast=True)
        hiddens: per-agent encoder outputs, each (T, H)
        actions: (n, T) int array of actions; entries of agents not yet acted are
            filled by select_actions, -1 means "no action shared"
        update_nets / msg_heads: per-agent networks (shared objects for shared weights)
        n_action_slots: width of the one-hot action summary
        ledger: receives one record per traversed edge (per step of the batch)
        broadcast: run the simultaneous broadcast baseline instead of the DAG
        select_actions: callback(round, agents, propagation) -> {agent: (T,) actions},
            called after each round, before later rounds read those actions

    Returns:
        (propagation, actions): enriched hiddens, payloads and caches for the backward
        pass, plus the completed (n, T) action array
    """
    n = len(hiddens) if broadcast else dag.n
    actions = np.array(actions, dtype=np.int64, copy=True)
    _check_inputs(n, hiddens, update_nets, msg_heads, actions)
    T, H = hiddens[0].shape
    M = msg_heads[0].n_out
    zeros_agg = np.zeros((T, M))
    zeros_act = np.zeros((T, n_action_slots))
    prop = Propagation(broadcast=broadcast, dag=None if broadcast else dag, agents=[None] * n)

    def run(agent, agg, act, round_):
        x = np.concatenate([hiddens[agent], agg, act], axis=1)
        z, upd_cache = mlp_forward(update_nets[agent], x)
        m, msg_cache = mlp_forward(msg_heads[agent], z)
        return AgentPass(hiddens[agent], agg, act, z, m, round_, upd_cache, msg_cache)

    def select(round_, agents):
        if select_actions is None or not agents:
            return
        chosen = select_actions(round_, agents, prop)
        for agent in agents:
            actions[agent] = chosen[agent]

    if broadcast:
        local = [run(a, zeros_agg, zeros_act, 0) for a in range(n)]
        for i in range(n):
            others = [local[j].payload for j in range(n) if j != i]
            agg = np.mean(others, axis=0) if others else zeros_agg
            x = np.concatenate([hiddens[i], agg, zeros_act], axis=1)
            z, upd_cache = mlp_forward(update_nets[i], x)
            prop.agents[i] = AgentPass(hiddens[i], agg, zeros_act, z, local[i].payload, 1 if others else 0,
                                       upd_cache, local[i].msg_cache, local_cache=local[i].upd_cache)
            if ledger is not None:
                for j in range(n):
                    if j != i:
                        for t in range(T):
                            ledger.record(episode, step + t, 1, j, i)
        prop.order = list(range(n))
        prop.n_rounds = 1 if n > 1 else 0
        select(prop.n_rounds, list(range(n)))
        return prop, actions

    for r in range(dag.depth + 1):
        members = dag.agents_in_round(r)
        for agent in members:
            preds = dag.in_neighbors(agent)
            if preds:
                agg = np.mean([prop.agents[p].payload for p in preds], axis=0)
                act = action_summary([actions[p] for p in preds], n_action_slots, T)
            else:
                agg, act = zeros_agg, zeros_act
            prop.agents[agent] = run(agent, agg, act, r)
            prop.order.append(agent)
            if ledger is not None:
                for p in preds:
                    for t in range(T):
                        ledger.record(episode, step + t, r, p, agent)
        select(r, members)
    prop.n_rounds = dag.depth
    return prop, actions


def propagate_backward(prop: Propagation, grad_enriched: Sequence[np.ndarray],
                       grad_payload: Sequence[Optional[np.ndarray]],
                       update_nets: Sequence[MlpParams], msg_heads: Sequence[MlpParams]):
    """
    Backward pass of propagate.

    Args:
        grad_enriched: d loss / d enriched hidden per agent, (T, H)
        grad_payload: d loss / d outgoing payload per agent (T, M) or None

    Returns:
        (grad_hiddens, update_grads, msg_grads), per agent
    """
    n = len(prop.agents)
    H = prop.agents[0].hidden.shape[1]
    M = prop.agents[0].payload.shape[1]
    g_payload = [np.zeros_like(a.payload) if g is None else np.array(g, dtype=np.float64)
                 for a, g in zip(prop.agents, grad_payload)]
    g_hidden = [np.zeros_like(a.hidden) for a in prop.agents]
    upd_grads: List[List[MlpParams]] = [[] for _ in range(n)]
    msg_grads: List[Optional[MlpParams]] = [None] * n

    if prop.broadcast:
        for i, rec in enumerate(prop.agents):
            gu, gx = mlp_backward(update_nets[i], rec.upd_cache, grad_enriched[i])
            upd_grads[i].append(gu)
            g_hidden[i] += gx[:, :H]
            others = [j for j in range(n) if j != i]
            for j in others:
                g_payload[j] += gx[:, H:H + M] / len(others)
        for i, rec in enumerate(prop.agents):
            gm, gz0 = mlp_backward(msg_heads[i], rec.msg_cache, g_payload[i])
            msg_grads[i] = gm
            gu0, gx0 = mlp_backward(update_nets[i], rec.local_cache, gz0)
            upd_grads[i].append(gu0)
            g_hidden[i] += gx0[:, :H]
        return g_hidden, [_sum_params(g) for g in upd_grads], msg_grads

    for agent in reversed(prop.order):
        rec = prop.agents[agent]
        gm, gz = mlp_backward(msg_heads[agent], rec.msg_cache, g_payload[agent])
        msg_grads[agent] = gm
        gu, gx = mlp_backward(update_nets[agent], rec.upd_cache, grad_enriched[agent] + gz)
        upd_grads[agent].append(gu)
        g_hidden[agent] += gx[:, :H]
        preds = prop.dag.in_neighbors(agent)
        for p in preds:
            g_payload[p] += gx[:, H:H + M] / len(preds)
    return g_hidden, [_sum_params(g) for g in upd_grads], msg_grads


def _sum_params(grads: List[MlpParams]) -> MlpParams:
    total = grads[0].arrays()
    for g in grads[1:]:
        total = [a + b for a, b in zip(total, g.arrays())]
    return grads[0].with_arrays(total)
