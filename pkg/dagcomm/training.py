"""
Centralized-training / decentralized-execution loop.

Rollouts run every agent's encoder, the communication rounds and the actor
heads one environment step at a time. The loss replays each recorded episode
in one batched pass (the recorded actions are fed back as the shared action
summaries), so gradients flow through the same propagation the agents used.

Loss = advantage actor-critic with a centralized per-agent critic, minus an
entropy bonus, plus the optional IEI/SEI regularizers on the outgoing payloads.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from dagcomm import metrics
from dagcomm.comms import CommLedger, count_comm, propagate
from dagcomm.envs import GridEnv, make_env
from dagcomm.errors import CheckpointError, ContractError, NumericError
from dagcomm.numkit import (init_optim, load_params, mlp_forward, optim_step, params_from_named,
                            params_to_named, save_params)
from dagcomm.policy import KINDS, PolicySet, build_policies, critic_forward, encode, joint_backward, joint_forward
from dagcomm.topology import (Dag, TopoLearnerParams, dag_to_json, gen_layered_fc,
                              init_learner, init_learner_state, learner_update, mode_topology,
                              sample_topology, shuffle_order)

logger = logging.getLogger(__name__)

TOPOLOGY_MODES = ("learned", "fc-d1", "fc-d2", "fc-d4", "shuffled", "fixed", "broadcast", "none")

OUTPUTS = {"encoder": "tanh", "msg_head": "identity", "update": "tanh", "actor": "softmax", "critic": "identity"}

THREADS_ENV = "DAGCOMM_THREADS"


class TrainConfig(BaseModel):
    """Everything one training run depends on. Unknown fields are rejected."""

    model_config = ConfigDict(extra="forbid")

    env: Literal["pp", "pcp", "tj"] = "tj"
    grid_size: Optional[int] = Field(default=None, gt=0)
    n_agents: Optional[int] = Field(default=None, gt=0)
    vision: Optional[int] = Field(default=None, ge=0)
    max_steps: Optional[int] = Field(default=None, gt=0)
    n_capture: Optional[int] = Field(default=None, ge=0)
    p_arrive: Optional[float] = Field(default=None, ge=0.0, le=1.0)

    topology: Literal["learned", "fc-d1", "fc-d2", "fc-d4", "shuffled", "fixed", "broadcast", "none"] = "broadcast"
    fixed_edges: Optional[List[Tuple[int, int]]] = None
    shuffle_seed: int = 0
    temperature: float = Field(default=1.0, gt=0.0)
    topology_lr: float = Field(default=0.05, gt=0.0)

    epochs: int = Field(default=200, ge=0)
    batches_per_epoch: int = Field(default=2, gt=0)
    episodes_per_batch: int = Field(default=100, gt=0)
    lambda_iei: float = Field(default=0.0, ge=0.0)
    lambda_sei: float = Field(default=0.0, ge=0.0)
    gamma: float = Field(default=0.99, ge=0.0, le=1.0)
    entropy_bonus: float = Field(default=0.01, ge=0.0)
    value_coef: float = Field(default=0.5, ge=0.0)
    lr: float = Field(default=1e-3, gt=0.0)
    hidden: int = Field(default=32, gt=0)
    msg_width: int = Field(default=16, gt=0)
    critic_hidden: int = Field(default=64, gt=0)
    share_weights: bool = True
    seed: int = Field(default=0, ge=0)
    eval_episodes: int = Field(default=100, ge=0)
    checkpoint_every: int = Field(default=0, ge=0)
    threads: Optional[int] = Field(default=None, gt=0)
    max_nonfinite: int = Field(default=3, gt=0)

    @model_validator(mode="after")
    def _edges_for_fixed_modes(self):
        if self.topology in ("shuffled", "fixed") and self.fixed_edges is None:
            raise ValueError(f"topology '{self.topology}' needs fixed_edges")
        return self

    def env_overrides(self) -> dict:
        keys = ("grid_size", "n_agents", "vision", "max_steps", "n_capture", "p_arrive")
        out = {k: getattr(self, k) for k in keys if getattr(self, k) is not None}
        if self.env == "tj" and "n_agents" in out:
            out["n_max"] = out["n_agents"]
        return out


def build_env(config: TrainConfig) -> GridEnv:
    return make_env(config.env, **config.env_overrides())


def rollout_threads(config: TrainConfig) -> int:
    """Rollout parallelism: the config value, else DAGCOMM_THREADS, else 1."""
    if config.threads is not None:
        return config.threads
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ContractError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")


def episode_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Communication plans
# ---------------------------------------------------------------------------

class CommPlan(NamedTuple):
    """Topology one episode communicates over: a DAG, or the broadcast baseline."""

    dag: Optional[Dag]
    broadcast: bool = False

    def senders(self, n: int) -> List[int]:
        if self.broadcast:
            return list(range(n)) if n > 1 else []
        return self.dag.senders()

    def describe(self) -> dict:
        if self.broadcast:
            return {"mode": "broadcast"}
        return {"mode": "dag", **dag_to_json(self.dag)}


def fixed_plan(config: TrainConfig, n: int) -> Optional[CommPlan]:
    """The plan of every non-learned mode; None in learned mode (sampled per episode)."""
    mode = config.topology
    if mode == "learned":
        return None
    if mode == "broadcast":
        return CommPlan(None, broadcast=True)
    if mode == "none":
        return CommPlan(Dag.empty(n))
    if mode.startswith("fc-d"):
        return CommPlan(gen_layered_fc(n, int(mode[len("fc-d"):]), config.seed))
    dag = Dag.from_edges(n, config.fixed_edges)
    if mode == "shuffled":
        dag = shuffle_order(dag, config.shuffle_seed)
    return CommPlan(dag)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

@dataclass
class EpisodeTrace:
    """One episode, agent-major: arrays are (n, T, ...) unless noted."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    payloads: np.ndarray
    active: np.ndarray
    fresh: np.ndarray           # slot holds a car that entered this step
    plan: CommPlan
    ledger: CommLedger
    success: bool
    length: int
    values: Optional[np.ndarray] = None   # (T, n)
    collisions: int = 0

    @property
    def n_agents(self) -> int:
        return self.obs.shape[0]

    def senders(self) -> List[int]:
        return self.plan.senders(self.n_agents)

    def team_return(self) -> float:
        return float(self.rewards.sum() / self.n_agents)

    def continues(self) -> np.ndarray:
        """(n, T) mask: the same car keeps the slot into the next step."""
        cont = np.zeros_like(self.active)
        cont[:, :-1] = self.active[:, 1:] & ~self.fresh[:, 1:]
        return cont


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    return int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"), probs.shape[0] - 1))


def rollout(env: GridEnv, policies: PolicySet, plan: CommPlan, seed, *, greedy: bool = False,
            with_critic: bool = True, episode: int = 0) -> EpisodeTrace:
    """
    Play one episode. Agents act round by round: an agent's action is drawn as soon
    as its round has run, so later rounds see it in their action summaries.

    Args:
        plan: topology for this episode
        seed: int or SeedSequence; fixes both the environment and the action draws
        greedy: argmax instead of sampling (evaluation)
        with_critic: also record the centralized critic's values

    Returns:
        EpisodeTrace
    """
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_seq, act_seq = seq.spawn(2)
    rng = np.random.default_rng(act_seq)
    state = env.reset(env_seq)
    n = env.n_agents
    if policies.n_agents != n:
        raise ContractError(f"policies cover {policies.n_agents} agents, environment has {n}")
    actors = policies.agent_nets("actor")
    updates = policies.agent_nets("update")
    heads = policies.agent_nets("msg_head")
    ledger = CommLedger()
    rows = {k: [] for k in ("obs", "actions", "log_probs", "rewards", "payloads", "active", "fresh", "values")}
    collisions = 0

    while True:
        obs = env.observe_all(state)
        active = state.active.copy()
        fresh = active & (state.tau == 0) if state.tau is not None else np.zeros(n, dtype=bool)
        hiddens, _ = encode(policies, obs[:, None, :])
        log_probs = np.zeros(n)

        def select(round_, agents, prop):
            chosen = {}
            for a in agents:
                p = mlp_forward(actors[a], prop.agents[a].enriched)[0][0]
                act = int(np.argmax(p)) if greedy else _sample(p, rng)
                log_probs[a] = np.log(max(p[act], 1e-300))
                chosen[a] = np.array([act])
            return chosen

        prop, actions = propagate(plan.dag, hiddens, np.full((n, 1), -1), updates, heads,
                                  policies.action_slots, ledger, broadcast=plan.broadcast,
                                  select_actions=select, episode=episode, step=state.step)
        if with_critic:
            rows["values"].append(critic_forward(policies, prop.enriched)[0][0])
        result = env.step(state, actions[:, 0])

        rows["obs"].append(obs)
        rows["actions"].append(actions[:, 0])
        rows["log_probs"].append(log_probs)
        rows["rewards"].append(result.rewards)
        rows["payloads"].append(np.stack([p[0] for p in prop.payloads]))
        rows["active"].append(active)
        rows["fresh"].append(fresh)
        collisions += result.info.get("collisions", 0)
        state = result.state
        if result.done:
            break

    def agent_major(key):
        return np.stack(rows[key], axis=1)

    return EpisodeTrace(obs=agent_major("obs"), actions=agent_major("actions"),
                        log_probs=agent_major("log_probs"), rewards=agent_major("rewards"),
                        payloads=agent_major("payloads"), active=agent_major("active"),
                        fresh=agent_major("fresh"), plan=plan, ledger=ledger, success=bool(result.success),
                        length=state.step, values=np.stack(rows["values"]) if with_critic else None,
                        collisions=collisions)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def discounted_returns(rewards: np.ndarray, gamma: float, continues: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-agent discounted returns of an (n, T) reward array. continues[i, t] = False
    cuts the sum after step t (slot handed to a new car, or end of episode).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if continues is None:
        continues = np.ones_like(rewards, dtype=bool)
        continues[:, -1] = False
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        running = rewards[:, t] + gamma * running * continues[:, t]
        out[:, t] = running
    return out


def normalized_advantages(traces: Sequence[EpisodeTrace], returns: Sequence[np.ndarray],
                          values: Sequence[np.ndarray]) -> List[np.ndarray]:
    """(G - V) per trace, normalized to zero mean / unit variance over the active samples of the batch."""
    raw = [G - V.T for G, V in zip(returns, values)]
    pooled = np.concatenate([a[tr.active] for a, tr in zip(raw, traces)])
    if pooled.size == 0:
        return [np.zeros_like(a) for a in raw]
    mean, std = pooled.mean(), pooled.std()
    return [np.where(tr.active, (a - mean) / (std + 1e-8), 0.0) for a, tr in zip(raw, traces)]


def sender_payload_stats(payloads: Sequence[np.ndarray], senders: Sequence[Sequence[int]]):
    """
    IEI over every outgoing payload row and SEI over each agent's mean payload.

    Args:
        payloads: per trace (n, T, M)
        senders: per trace the agents whose payloads were transmitted

    Returns:
        (iei, sei, rows, means, counts): rows lists (trace, agent) in the order used
        by the IEI matrix; means/counts are indexed by agent (count 0 means no data)
    """
    rows = [(k, a) for k, s in enumerate(senders) for a in s]
    if not rows:
        return 0.0, 0.0, rows, None, None
    n, M = payloads[0].shape[0], payloads[0].shape[2]
    matrix = np.concatenate([payloads[k][a] for k, a in rows])
    sums, counts = np.zeros((n, M)), np.zeros(n)
    for k, a in rows:
        sums[a] += payloads[k][a].sum(axis=0)
        counts[a] += payloads[k][a].shape[0]
    seen = counts > 0
    means = np.where(seen[:, None], sums / np.maximum(counts, 1)[:, None], 0.0)
    iei_value = metrics.iei(matrix)
    sei_value = metrics.sei(means[seen]) if seen.sum() >= 2 else 0.0
    return iei_value, sei_value, rows, means, counts


@dataclass
class LossResult:
    loss: float
    grads: Dict[str, object]
    parts: Dict[str, float] = field(default_factory=dict)
    iei: float = 0.0
    sei: float = 0.0


def _check_finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise NumericError(f"loss term '{name}' is not finite ({value})", term=name)
    return value


def compute_loss(traces: Sequence[EpisodeTrace], policies: PolicySet, config: TrainConfig,
                 advantages: Optional[Sequence[np.ndarray]] = None) -> LossResult:
    """
    Actor-critic loss of a batch of episodes and its gradient for every parameter bundle.

    Advantages are treated as constants. They are computed from the critic's
    current values unless given, which makes the returned loss an exact function
    of the parameters (finite-difference checks pass fixed advantages).

    Raises:
        NumericError: naming the first non-finite term
    """
    if not traces:
        raise ContractError("compute_loss needs at least one episode")
    passes = [joint_forward(policies, tr.obs, tr.plan.dag, tr.plan.broadcast, tr.actions) for tr in traces]
    returns = [discounted_returns(tr.rewards, config.gamma, tr.continues()) for tr in traces]
    if advantages is None:
        advantages = normalized_advantages(traces, returns, [jp.values for jp in passes])
    n_samples = max(1, int(sum(tr.active.sum() for tr in traces)))

    actor_loss = value_loss = entropy = 0.0
    g_probs, g_values = [], []
    for tr, jp, G, adv in zip(traces, passes, returns, advantages):
        per_agent = []
        for agent, probs in enumerate(jp.probs):
            mask = tr.active[agent]
            T = probs.shape[0]
            safe = np.clip(probs, 1e-12, 1.0)
            log_p = np.log(safe)
            taken = log_p[np.arange(T), tr.actions[agent]]
            actor_loss -= float(np.sum(mask * adv[agent] * taken))
            entropy -= float(np.sum(mask[:, None] * probs * log_p))

            g = config.entropy_bonus * (log_p + 1.0)
            g[np.arange(T), tr.actions[agent]] -= adv[agent] / safe[np.arange(T), tr.actions[agent]]
            per_agent.append(g * mask[:, None] / n_samples)
        g_probs.append(per_agent)
        diff = (jp.values.T - G) * tr.active
        value_loss += float(np.sum(diff ** 2))
        g_values.append((config.value_coef * 2.0 * diff / n_samples).T)

    actor_loss /= n_samples
    value_loss = config.value_coef * value_loss / n_samples
    entropy /= n_samples

    payloads = [np.stack(jp.prop.payloads) for jp in passes]
    iei_value, sei_value, rows, means, counts = sender_payload_stats(payloads, [tr.senders() for tr in traces])
    g_payloads = [[None] * tr.n_agents for tr in traces]
    if rows and (config.lambda_iei > 0 or config.lambda_sei > 0):
        T_of = [p.shape[1] for p in payloads]
        g_rows = np.zeros((sum(T_of[k] for k, _ in rows), payloads[0].shape[2]))
        if config.lambda_iei > 0:
            g_rows += config.lambda_iei * metrics.iei_grad(np.concatenate([payloads[k][a] for k, a in rows]))
        g_means = None
        seen = counts > 0
        if config.lambda_sei > 0 and seen.sum() >= 2:
            g_means = np.zeros_like(means)
            g_means[seen] = config.lambda_sei * metrics.sei_grad(means[seen])
        offset = 0
        for k, a in rows:
            g = g_rows[offset:offset + T_of[k]].copy()
            if g_means is not None:
                g += g_means[a] / counts[a]
            g_payloads[k][a] = g
            offset += T_of[k]

    parts = {
        "actor": _check_finite("actor", actor_loss),
        "value": _check_finite("value", value_loss),
        "entropy": _check_finite("entropy", entropy),
        "iei": _check_finite("iei", iei_value),
        "sei": _check_finite("sei", sei_value),
    }
    loss = (actor_loss + value_loss - config.entropy_bonus * entropy
            + config.lambda_iei * iei_value + config.lambda_sei * sei_value)

    grads = None
    for jp, gp, gv, gm in zip(passes, g_probs, g_values, g_payloads):
        g = joint_backward(policies, jp, gp, gv, gm)
        grads = g if grads is None else {
            name: grads[name].with_arrays([a + b for a, b in zip(grads[name].arrays(), g[name].arrays())])
            for name in grads}
    return LossResult(float(_check_finite("total", loss)), grads, parts, iei_value, sei_value)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    policies: PolicySet
    learner: Optional[TopoLearnerParams]
    records: List[metrics.MetricsRecord]
    plan: CommPlan
    convergence_epoch: Optional[int] = None


def init_policies(config: TrainConfig, env: GridEnv) -> PolicySet:
    rng = np.random.default_rng(config.seed)
    groups = env.agent_groups
    group_actions = [env.n_actions(groups.index(g)) for g in range(max(groups) + 1)]
    return build_policies(env.obs_dim, groups, group_actions, rng, hidden=config.hidden,
                          msg_width=config.msg_width, critic_hidden=config.critic_hidden,
                          share_weights=config.share_weights)


def eval_plan(config: TrainConfig, n: int, learner: Optional[TopoLearnerParams]) -> CommPlan:
    """Topology used at evaluation: the fixed plan, or the learner's mode DAG."""
    plan = fixed_plan(config, n)
    if plan is None:
        if learner is None:
            raise ContractError("learned topology mode needs a topology learner")
        plan = CommPlan(mode_topology(learner))
    return plan


def _run_batch(env, policies, plans, seeds, episodes, threads) -> List[EpisodeTrace]:
    def one(i):
        return rollout(env, policies, plans[i], seeds[i], episode=episodes[i])

    if threads <= 1:
        return [one(i) for i in range(len(seeds))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(seeds))))


def train(config: TrainConfig, progress: bool = False,
          checkpoint_fn: Optional[Callable[[int, PolicySet, Optional[TopoLearnerParams]], None]] = None) -> TrainResult:
    """
    Run epochs x batches x episodes of rollouts and updates.

    Policies are updated after every batch, and in learned mode so is the
    topology learner (one sampled DAG per episode, rewarded with the episode's
    team return). One MetricsRecord per epoch summarizes that epoch's episodes.

    Args:
        config: TrainConfig
        progress: show a tqdm bar over epochs
        checkpoint_fn: called as (epoch, policies, learner) every
            config.checkpoint_every epochs

    Raises:
        NumericError: when config.max_nonfinite consecutive batches fail, or a
            whole epoch produced no finite update
    """
    env = build_env(config)
    n = env.n_agents
    policies = init_policies(config, env)
    optims = {name: init_optim(net, lr=config.lr) for name, net in policies.bundles().items()}
    plan = fixed_plan(config, n)
    learner, learner_state = None, None
    if plan is None:
        learner = init_learner(n, temperature=config.temperature)
        learner_state = init_learner_state(learner, lr=config.topology_lr)
    threads = rollout_threads(config)
    logger.info(f"Training {config.env} with topology '{config.topology}' for {config.epochs} epochs "
                f"({config.batches_per_epoch} x {config.episodes_per_batch} episodes, {threads} threads)")

    records: List[metrics.MetricsRecord] = []
    failures = 0
    epochs = tqdm(range(1, config.epochs + 1), desc="Training", disable=not progress)
    for epoch in epochs:
        successes, lengths, losses, ieis, seis = [], [], [], [], []
        comm = 0
        for batch in range(config.batches_per_epoch):
            count = config.episodes_per_batch
            seeds = [episode_seed(config.seed, epoch, batch, k) for k in range(count)]
            samples = None
            if learner is not None:
                samples = [sample_topology(learner, episode_seed(config.seed, epoch, batch, k, 1))
                           for k in range(count)]
                plans = [CommPlan(s.dag) for s in samples]
            else:
                plans = [plan] * count
            base = (epoch - 1) * config.batches_per_epoch * count + batch * count
            traces = _run_batch(env, policies, plans, seeds, [base + k for k in range(count)], threads)

            successes.extend(tr.success for tr in traces)
            lengths.extend(tr.length for tr in traces)
            comm += sum(tr.ledger.total for tr in traces)
            try:
                result = compute_loss(traces, policies, config)
                bundles = policies.bundles()
                updated = {}
                for name, net in bundles.items():
                    updated[name], optims[name] = optim_step(net, result.grads[name], optims[name])
            except NumericError as e:
                failures += 1
                logger.warning(f"Epoch {epoch} batch {batch}: skipped update ({e})")
                if failures >= config.max_nonfinite:
                    raise
                continue
            failures = 0
            policies = policies.with_bundles(updated)
            losses.append(result.loss)
            ieis.append(result.iei)
            seis.append(result.sei)
            if learner is not None:
                learner, learner_state = learner_update(learner, samples, [tr.team_return() for tr in traces],
                                                        learner_state)

        if not losses:
            raise NumericError(f"epoch {epoch} produced no finite update", term="total")
        n_episodes = len(successes)
        rate = metrics.success_rate(successes)
        iei_value = float(np.mean(ieis))
        records.append(metrics.MetricsRecord(
            epoch=epoch, success_rate=rate,
            avg_steps=metrics.avg_steps(lengths, successes, env.config.max_steps),
            c_comm=comm / n_episodes, iei=iei_value, sei=float(np.mean(seis)),
            loss=float(np.mean(losses)), iei_per_success=metrics.iei_per_success(iei_value, rate)))
        epochs.set_postfix(success=f"{rate:.2f}")
        logger.debug(f"Epoch {epoch}: success {rate:.3f}, loss {records[-1].loss:.4f}")

        if checkpoint_fn is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint_fn(epoch, policies, learner)

    final_plan = eval_plan(config, n, learner)
    converged = metrics.convergence_epoch([r.success_rate for r in records])
    return TrainResult(policies, learner, records, final_plan, converged)


def evaluate(policies: PolicySet, plan: CommPlan, env: GridEnv, n: int = 100, seed: int = 0,
             progress: bool = False) -> metrics.MetricsRecord:
    """
    Greedy, critic-free evaluation over n independent episodes.

    Returns:
        MetricsRecord with epoch 0 and loss 0
    """
    if n <= 0:
        raise ContractError(f"evaluation needs at least one episode, got {n}")
    traces = []
    for k in tqdm(range(n), desc="Evaluating", disable=not progress):
        traces.append(rollout(env, policies, plan, episode_seed(seed, 0, 0, k), greedy=True,
                              with_critic=False, episode=k))
    successes = [tr.success for tr in traces]
    ledger = CommLedger()
    for tr in traces:
        ledger.extend(tr.ledger)
    iei_value, sei_value, *_ = sender_payload_stats([tr.payloads for tr in traces],
                                                    [tr.senders() for tr in traces])
    rate = metrics.success_rate(successes)
    return metrics.MetricsRecord(
        epoch=0, success_rate=rate,
        avg_steps=metrics.avg_steps([tr.length for tr in traces], successes, env.config.max_steps),
        c_comm=count_comm(ledger, n), iei=iei_value, sei=sei_value, loss=0.0,
        iei_per_success=metrics.iei_per_success(iei_value, rate))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, policies: PolicySet, learner: Optional[TopoLearnerParams] = None,
                    meta: Optional[dict] = None) -> None:
    """
    Write all parameter bundles (and the topology learner) as one DAGCOMM1 file,
    plus a <path>.json sidecar describing how to rebuild the PolicySet.
    """
    named = {}
    for name, net in policies.bundles().items():
        named.update(params_to_named(name, net))
    if learner is not None:
        named["topology/priorities"] = learner.priorities.reshape(1, -1)
        named["topology/edge_logits"] = learner.edge_logits
    save_params(path, named)
    sidecar = {
        "groups": list(policies.groups),
        "n_actions": list(policies.n_actions),
        "action_slots": policies.action_slots,
        "temperature": learner.temperature if learner is not None else None,
        "meta": meta or {},
    }
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> Tuple[PolicySet, Optional[TopoLearnerParams], dict]:
    """
    Returns:
        (policies, learner or None, meta dict stored at save time)

    Raises:
        CheckpointError: unreadable, truncated or inconsistent files
    """
    named = load_params(path)
    try:
        sidecar = json.loads(_sidecar(path).read_text())
        groups = [int(g) for g in sidecar["groups"]]
        n_actions = [int(a) for a in sidecar["n_actions"]]
        slots = int(sidecar["action_slots"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"cannot read checkpoint description {_sidecar(path)}: {e}") from e

    bundles = {f"{kind}/{g}": params_from_named(f"{kind}/{g}", named, OUTPUTS[kind])
               for kind in KINDS for g in range(len(n_actions))}
    bundles["critic"] = params_from_named("critic", named, OUTPUTS["critic"])
    nets = {kind: [bundles[f"{kind}/{g}"] for g in range(len(n_actions))] for kind in KINDS}
    policies = PolicySet(groups, n_actions, nets, bundles["critic"], slots)
    for g, net in enumerate(nets["actor"]):
        if net.n_out != n_actions[g]:
            raise CheckpointError(f"actor of group {g} has {net.n_out} outputs, expected {n_actions[g]}")

    learner = None
    if "topology/priorities" in named:
        try:
            learner = TopoLearnerParams(named["topology/priorities"].reshape(-1), named["topology/edge_logits"],
                                        float(sidecar.get("temperature") or 1.0))
        except (KeyError, ContractError) as e:
            raise CheckpointError(f"topology learner in {path} is inconsistent: {e}") from e
    return policies, learner, sidecar.get("meta", {})
