"""
Agent networks and the joint forward/backward pass over one episode.

Per weight-sharing group there is an encoder (observation -> hidden), a
message head (hidden -> payload), an update network ([hidden | aggregate |
action summary] -> enriched hidden) and an actor head (enriched hidden ->
action probabilities). One centralized critic reads the concatenation of all
enriched hiddens and outputs one value per agent; it is used in training only.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from dagcomm.comms import Propagation, propagate, propagate_backward
from dagcomm.errors import ContractError
from dagcomm.numkit import MlpCache, MlpParams, init_mlp, mlp_backward, mlp_forward
from dagcomm.topology import Dag

KINDS = ("encoder", "msg_head", "update", "actor")


@dataclass
class PolicySet:
    groups: List[int]
    n_actions: List[int]
    nets: Dict[str, List[MlpParams]]
    critic: MlpParams
    action_slots: int

    @property
    def n_agents(self) -> int:
        return len(self.groups)

    @property
    def hidden(self) -> int:
        return self.nets["encoder"][0].n_out

    @property
    def msg_width(self) -> int:
        return self.nets["msg_head"][0].n_out

    def agent_nets(self, kind: str) -> List[MlpParams]:
        return [self.nets[kind][g] for g in self.groups]

    def bundles(self) -> Dict[str, MlpParams]:
        out = {f"{kind}/{g}": net for kind in KINDS for g, net in enumerate(self.nets[kind])}
        out["critic"] = self.critic
        return out

    def with_bundles(self, bundles: Dict[str, MlpParams]) -> "PolicySet":
        nets = {kind: [bundles[f"{kind}/{g}"] for g in range(len(self.nets[kind]))] for kind in KINDS}
        return PolicySet(list(self.groups), list(self.n_actions), nets, bundles["critic"], self.action_slots)


def build_policies(obs_dim: int, agent_groups: Sequence[int], group_actions: Sequence[int],
                   rng: np.random.Generator, hidden: int = 32, msg_width: int = 16,
                   critic_hidden: int = 64, share_weights: bool = True) -> PolicySet:
    """
    Initialize all networks.

    Args:
        obs_dim: observation length
        agent_groups: weight-sharing group of every agent
        group_actions: action count of every group
        share_weights: False gives every agent its own group
    """
    groups = list(agent_groups)
    n_actions = list(group_actions)
    if not share_weights:
        n_actions = [group_actions[g] for g in groups]
        groups = list(range(len(groups)))
    if max(groups) + 1 != len(n_actions):
        raise ContractError(f"{len(n_actions)} action counts for {max(groups) + 1} groups")
    slots = max(n_actions)
    nets = {kind: [] for kind in KINDS}
    for g in range(len(n_actions)):
        nets["encoder"].append(init_mlp([obs_dim, hidden], rng, output="tanh"))
        nets["msg_head"].append(init_mlp([hidden, msg_width], rng, output="identity"))
        nets["update"].append(init_mlp([hidden + msg_width + slots, hidden], rng, output="tanh"))
        nets["actor"].append(init_mlp([hidden, n_actions[g]], rng, output="softmax"))
    critic = init_mlp([len(groups) * hidden, critic_hidden, len(groups)], rng, output="identity")
    return PolicySet(groups, n_actions, nets, critic, slots)


@dataclass
class JointPass:
    enc_caches: List[MlpCache]
    prop: Propagation
    actor_caches: List[MlpCache]
    probs: List[np.ndarray]
    critic_cache: Optional[MlpCache] = None
    values: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None


def encode(policies: PolicySet, obs: np.ndarray):
    """obs: (n, T, obs_dim) -> per-agent hiddens and caches."""
    hiddens, caches = [], []
    for agent, enc in enumerate(policies.agent_nets("encoder")):
        h, c = mlp_forward(enc, obs[agent])
        hiddens.append(h)
        caches.append(c)
    return hiddens, caches


def critic_forward(policies: PolicySet, enriched: Sequence[np.ndarray]):
    """Per-agent value estimates (T, n) from the concatenated enriched hiddens."""
    return mlp_forward(policies.critic, np.concatenate(enriched, axis=1))


def joint_forward(policies: PolicySet, obs: np.ndarray, dag: Optional[Dag], broadcast: bool,
                  actions: np.ndarray, with_critic: bool = True) -> JointPass:
    """Replay a whole episode (T steps at once) with the recorded actions."""
    hiddens, enc_caches = encode(policies, obs)
    prop, actions = propagate(dag, hiddens, actions, policies.agent_nets("update"),
                              policies.agent_nets("msg_head"), policies.action_slots, broadcast=broadcast)
    probs, actor_caches = [], []
    for agent, actor in enumerate(policies.agent_nets("actor")):
        p, c = mlp_forward(actor, prop.agents[agent].enriched)
        probs.append(p)
        actor_caches.append(c)
    jp = JointPass(enc_caches, prop, actor_caches, probs, actions=actions)
    if with_critic:
        jp.values, jp.critic_cache = critic_forward(policies, prop.enriched)
    return jp


def joint_backward(policies: PolicySet, jp: JointPass, g_probs: Sequence[np.ndarray],
                   g_values: Optional[np.ndarray], g_payloads: Sequence[Optional[np.ndarray]]) -> Dict[str, MlpParams]:
    """
    Backpropagate gradients on action probabilities, critic values and outgoing
    payloads into every network; per-agent gradients are summed per group.
    """
    n = policies.n_agents
    H = policies.hidden
    grads = {name: [a.copy() for a in net.zeros_like().arrays()] for name, net in policies.bundles().items()}

    def add(name, g: MlpParams):
        grads[name] = [a + b for a, b in zip(grads[name], g.arrays())]

    g_enriched = [np.zeros_like(a.enriched) for a in jp.prop.agents]
    if g_values is not None and jp.critic_cache is not None:
        g_crit, g_in = mlp_backward(policies.critic, jp.critic_cache, np.asarray(g_values))
        add("critic", g_crit)
        for agent in range(n):
            g_enriched[agent] += g_in[:, agent * H:(agent + 1) * H]

    for agent, actor in enumerate(policies.agent_nets("actor")):
        g_act, g_z = mlp_backward(actor, jp.actor_caches[agent], g_probs[agent])
        add(f"actor/{policies.groups[agent]}", g_act)
        g_enriched[agent] += g_z

    g_hidden, upd_grads, msg_grads = propagate_backward(jp.prop, g_enriched, g_payloads,
                                                        policies.agent_nets("update"),
                                                        policies.agent_nets("msg_head"))
    for agent, enc in enumerate(policies.agent_nets("encoder")):
        g = policies.groups[agent]
        g_enc, _ = mlp_backward(enc, jp.enc_caches[agent], g_hidden[agent])
        add(f"encoder/{g}", g_enc)
        add(f"update/{g}", upd_grads[agent])
        add(f"msg_head/{g}", msg_grads[agent])

    bundles = policies.bundles()
    return {name: bundles[name].with_arrays(arrays) for name, arrays in grads.items()}
