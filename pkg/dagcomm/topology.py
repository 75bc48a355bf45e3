"""
Communication topologies as directed acyclic graphs over agents.

adj[i][j] = True means agent i sends to agent j. Besides validation and the
order/depth/round analysis, this module holds the generators used by the
ablations (layered fully-connected DAGs, shuffled orders) and the learnable
distribution over DAGs (priority scores + masked edge logits).
"""

import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from dagcomm.errors import ContractError
from dagcomm.numkit import OptimState, init_optim, optim_step


class AcyclicityReport(NamedTuple):
    order: Optional[List[int]]
    cycle: Optional[List[int]]

    @property
    def acyclic(self) -> bool:
        return self.cycle is None


def _as_adj(adj) -> np.ndarray:
    adj = np.asarray(adj, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ContractError(f"adjacency must be a square matrix, got shape {adj.shape}")
    if np.any(np.diag(adj)):
        raise ContractError(f"self-loops on agents {np.flatnonzero(np.diag(adj)).tolist()}")
    return adj


def _to_digraph(adj: np.ndarray) -> nx.DiGraph:
    G = nx.DiGraph()
    G.add_nodes_from(range(adj.shape[0]))
    G.add_edges_from(zip(*(idx.tolist() for idx in np.nonzero(adj))))
    return G


def validate_acyclic(adj) -> AcyclicityReport:
    """
    Check that a communication graph is acyclic.

    Returns:
        AcyclicityReport with a topological order (lowest agent index first among
        ready agents) when acyclic, otherwise the sorted vertex set of one cycle
    """
    G = _to_digraph(_as_adj(adj))
    try:
        cycle_edges = nx.find_cycle(G)
    except nx.NetworkXNoCycle:
        return AcyclicityReport(order=list(nx.lexicographical_topological_sort(G)), cycle=None)
    return AcyclicityReport(order=None, cycle=sorted({u for u, _ in cycle_edges}))


def depth(adj) -> int:
    """
    DAG depth d = k - 1 where k is the nilpotent index of the boolean adjacency matrix
    (smallest k with A^k = O), found by repeated boolean matrix products.
    """
    A = _as_adj(adj).astype(np.int64)
    n = A.shape[0]
    power = A.copy()
    k = 1
    while power.any():
        if k >= max(n, 1):
            raise ContractError("adjacency powers never vanish: the graph has a cycle")
        power = ((power @ A) > 0).astype(np.int64)
        k += 1
    return k - 1


def longest_path_oracle(adj) -> int:
    """Longest directed path length computed by networkx, independent of depth()."""
    G = _to_digraph(_as_adj(adj))
    if not nx.is_directed_acyclic_graph(G):
        raise ContractError("longest path is undefined on a cyclic graph")
    return nx.dag_longest_path_length(G)


@dataclass(frozen=True)
class Dag:
    """Immutable communication DAG with its derived order, depth and round layering."""

    adj: np.ndarray
    topo_order: Tuple[int, ...] = field(init=False)
    depth: int = field(init=False)
    round_of: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        adj = _as_adj(self.adj).copy()
        adj.setflags(write=False)
        report = validate_acyclic(adj)
        if not report.acyclic:
            raise ContractError(f"communication graph has a cycle through agents {report.cycle}")
        round_of = [0] * adj.shape[0]
        for j in report.order:
            preds = np.flatnonzero(adj[:, j])
            if preds.size:
                round_of[j] = 1 + max(round_of[i] for i in preds)
        object.__setattr__(self, "adj", adj)
        object.__setattr__(self, "topo_order", tuple(report.order))
        object.__setattr__(self, "depth", depth(adj))
        object.__setattr__(self, "round_of", tuple(round_of))

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[Sequence[int]]) -> "Dag":
        adj = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ContractError(f"edge ({i}, {j}) outside agents 0..{n - 1}")
            adj[i, j] = True
        return cls(adj)

    @classmethod
    def empty(cls, n: int) -> "Dag":
        return cls(np.zeros((n, n), dtype=bool))

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adj))]

    @property
    def n_edges(self) -> int:
        return int(self.adj.sum())

    def in_neighbors(self, j: int) -> List[int]:
        return np.flatnonzero(self.adj[:, j]).tolist()

    def out_neighbors(self, i: int) -> List[int]:
        return np.flatnonzero(self.adj[i]).tolist()

    def agents_in_round(self, r: int) -> List[int]:
        return [a for a in range(self.n) if self.round_of[a] == r]

    def senders(self) -> List[int]:
        return np.flatnonzero(self.adj.any(axis=1)).tolist()

    def __eq__(self, other):
        return isinstance(other, Dag) and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash(self.adj.tobytes())


def rounds(dag: Dag) -> Tuple[int, ...]:
    """Round index per agent: 0 for sources, 1 + max over predecessors otherwise."""
    return dag.round_of


def relabel(dag: Dag, perm: Sequence[int]) -> Dag:
    """Move agent i's position to agent perm[i]: edge (i, j) becomes (perm[i], perm[j])."""
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(dag.n)):
        raise ContractError(f"{perm.tolist()} is not a permutation of 0..{dag.n - 1}")
    adj = np.zeros_like(dag.adj)
    adj[np.ix_(perm, perm)] = dag.adj
    return Dag(adj)


def shuffle_order(dag: Dag, seed) -> Dag:
    """
    Keep the sparsity pattern but hand the positions to a random reassignment of agents.
    A non-identity permutation is drawn whenever n >= 2.
    """
    rng = np.random.default_rng(seed)
    perm = np.arange(dag.n)
    while dag.n >= 2 and np.array_equal(perm, np.arange(dag.n)):
        perm = rng.permutation(dag.n)
    return relabel(dag, perm)


def gen_layered_fc(n: int, d: int, seed) -> Dag:
    """
    Fully-connected DAG of exact depth d: agents are split (seeded, near-evenly) into
    d + 1 ordered layers and every agent sends to every agent of every later layer.
    """
    if not 1 <= d <= n - 1:
        raise ContractError(f"depth {d} impossible with {n} agents (need 1 <= d <= {n - 1})")
    rng = np.random.default_rng(seed)
    agents = rng.permutation(n)
    sizes = np.full(d + 1, n // (d + 1))
    sizes[rng.choice(d + 1, size=n % (d + 1), replace=False)] += 1
    layer_of = np.repeat(np.arange(d + 1), sizes)
    adj = np.zeros((n, n), dtype=bool)
    for a in range(n):
        for b in range(n):
            if layer_of[a] < layer_of[b]:
                adj[agents[a], agents[b]] = True
    return Dag(adj)


def random_dag(n: int, p: float, seed) -> Dag:
    """Random DAG: a random agent order, each forward pair kept with probability p."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    adj = np.zeros((n, n), dtype=bool)
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < p:
                adj[order[a], order[b]] = True
    return Dag(adj)


def dag_to_json(dag: Dag) -> dict:
    return {"n": dag.n, "edges": [list(e) for e in dag.edges],
            "depth": dag.depth, "topo_order": list(dag.topo_order), "round_of": list(dag.round_of)}


def dag_from_json(payload) -> Dag:
    """Rebuild a Dag from {n, edges}; derived fields, when present, must match."""
    if isinstance(payload, str):
        payload = json.loads(payload)
    try:
        dag = Dag.from_edges(int(payload["n"]), payload["edges"])
    except (KeyError, TypeError, ValueError) as e:
        raise ContractError(f"malformed DAG record: {e}") from e
    for key in ("depth", "topo_order", "round_of"):
        if key in payload:
            stored = payload[key]
            derived = getattr(dag, key)
            if (list(derived) if isinstance(derived, tuple) else derived) != stored:
                raise ContractError(f"stored {key} {stored} disagrees with recomputed {derived}")
    return dag


# ---------------------------------------------------------------------------
# Learned topology: a distribution over DAGs
# ---------------------------------------------------------------------------

@dataclass
class TopoLearnerParams:
    """Priority score per agent, edge logit per ordered pair and a fixed temperature."""

    priorities: np.ndarray
    edge_logits: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        n = self.priorities.shape[0]
        if self.edge_logits.shape != (n, n):
            raise ContractError(f"edge logits {self.edge_logits.shape} do not match {n} agents")

    @property
    def n(self) -> int:
        return self.priorities.shape[0]

    def arrays(self) -> List[np.ndarray]:
        return [self.priorities, self.edge_logits]

    def with_arrays(self, arrays) -> "TopoLearnerParams":
        return TopoLearnerParams(arrays[0], arrays[1], self.temperature)

    def layer_of(self, k: int) -> int:
        return k


class TopologySample(NamedTuple):
    dag: Dag
    log_prob: float
    order: Tuple[int, ...]


@dataclass
class LearnerState:
    """Optimizer state and running-mean return baseline of the topology learner."""

    optim: OptimState
    baseline: float = 0.0
    n_seen: int = 0


def init_learner(n: int, temperature: float = 1.0, init_logit: float = 0.0) -> TopoLearnerParams:
    return TopoLearnerParams(np.zeros(n), np.full((n, n), float(init_logit)), temperature)


def init_learner_state(learner: TopoLearnerParams, lr: float = 0.05) -> LearnerState:
    return LearnerState(optim=init_optim(learner, lr=lr))


def _priority_order(keys: np.ndarray) -> Tuple[int, ...]:
    # higher key first, lower agent index on ties
    return tuple(int(a) for a in np.lexsort((np.arange(keys.shape[0]), -keys)))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _order_log_prob(scores: np.ndarray, order: Sequence[int]) -> float:
    order = list(order)
    total = 0.0
    for k in range(len(order)):
        remaining = scores[order[k:]]
        total += scores[order[k]] - np.logaddexp.reduce(remaining)
    return float(total)


def _edge_log_prob(learner: TopoLearnerParams, order: Sequence[int], adj: np.ndarray) -> float:
    total = 0.0
    for a, i in enumerate(order):
        for j in order[a + 1:]:
            e = learner.edge_logits[i, j]
            total += _log_sigmoid(e) if adj[i, j] else _log_sigmoid(-e)
    return float(total)


def sample_topology(learner: TopoLearnerParams, seed) -> TopologySample:
    """
    Draw a DAG: a total order from the priorities perturbed by temperature-scaled
    Gumbel noise, then each forward pair (i before j) independently with
    probability sigmoid(e_ij). Acyclic by construction.

    Returns:
        TopologySample(dag, joint log-probability of order and edges, order)
    """
    n = learner.n
    if n < 2:
        raise ContractError(f"topology learning needs at least 2 agents, got {n}")
    rng = np.random.default_rng(seed)
    keys = learner.priorities + learner.temperature * rng.gumbel(size=n)
    order = _priority_order(keys)
    adj = np.zeros((n, n), dtype=bool)
    for a, i in enumerate(order):
        for j in order[a + 1:]:
            p = 1.0 / (1.0 + np.exp(-learner.edge_logits[i, j]))
            adj[i, j] = rng.random() < p
    dag = Dag(adj)
    scores = learner.priorities / learner.temperature
    log_prob = _order_log_prob(scores, order) + _edge_log_prob(learner, order, adj)
    return TopologySample(dag, log_prob, order)


def topology_log_prob(learner: TopoLearnerParams, sample: TopologySample) -> float:
    scores = learner.priorities / learner.temperature
    return _order_log_prob(scores, sample.order) + _edge_log_prob(learner, sample.order, sample.dag.adj)


def grad_log_prob(learner: TopoLearnerParams, sample: TopologySample) -> TopoLearnerParams:
    """Gradient of the sample's log-probability w.r.t. priorities and edge logits."""
    n = learner.n
    order = list(sample.order)
    scores = learner.priorities / learner.temperature
    g_p = np.zeros(n)
    for k in range(n):
        remaining = order[k:]
        w = np.exp(scores[remaining] - np.logaddexp.reduce(scores[remaining]))
        g_p[order[k]] += 1.0
        g_p[remaining] -= w
    g_p /= learner.temperature

    g_e = np.zeros((n, n))
    for a, i in enumerate(order):
        for j in order[a + 1:]:
            p = 1.0 / (1.0 + np.exp(-learner.edge_logits[i, j]))
            g_e[i, j] = float(sample.dag.adj[i, j]) - p
    return TopoLearnerParams(g_p, g_e, learner.temperature)


def learner_update(learner: TopoLearnerParams, samples: Sequence[TopologySample],
                   returns: Sequence[float], state: LearnerState) -> Tuple[TopoLearnerParams, LearnerState]:
    """
    Score-function step: ascend mean((R - b) * grad log p) with the optimizer in
    state, where b is the running mean of all returns seen before this batch
    (the batch mean on the very first call). The running mean is then updated.
    """
    if not samples or len(samples) != len(returns):
        raise ContractError(f"need one return per sampled topology, got {len(samples)} samples "
                            f"and {len(returns)} returns")
    returns = np.asarray(returns, dtype=np.float64)
    baseline = state.baseline if state.n_seen else float(returns.mean())
    g_p = np.zeros(learner.n)
    g_e = np.zeros((learner.n, learner.n))
    for sample, ret in zip(samples, returns):
        g = grad_log_prob(learner, sample)
        g_p += (ret - baseline) * g.priorities
        g_e += (ret - baseline) * g.edge_logits
    # optim_step descends, so hand it the negated ascent direction
    grads = TopoLearnerParams(-g_p / len(samples), -g_e / len(samples), learner.temperature)
    learner, optim = optim_step(learner, grads, state.optim)
    n_seen = state.n_seen + len(returns)
    running = state.baseline + (returns.sum() - len(returns) * state.baseline) / n_seen
    return learner, LearnerState(optim=optim, baseline=float(running), n_seen=n_seen)


def mode_topology(learner: TopoLearnerParams) -> Dag:
    """Most probable DAG: noise-free priority order, edges whose logit is positive."""
    order = _priority_order(learner.priorities)
    adj = np.zeros((learner.n, learner.n), dtype=bool)
    for a, i in enumerate(order):
        for j in order[a + 1:]:
            adj[i, j] = learner.edge_logits[i, j] > 0
    return Dag(adj)
