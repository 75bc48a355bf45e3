"""
Experiment orchestration and result files.

Every run owns one output directory:

    metrics.csv        one MetricsRecord per epoch (fixed column order)
    checkpoints/       DAGCOMM1 parameter files (+ .json sidecars)
    manifest.json      config, run id, final/eval metrics, convergence epoch
    topology.json      topology used at evaluation

Ablations train one run per variant in sub-directories and collect the final
numbers into comparison.csv.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from dagcomm import metrics
from dagcomm.comms import CommLedger
from dagcomm.config import RunConfig
from dagcomm.errors import CheckpointError, ConfigError
from dagcomm.training import (CommPlan, TrainResult, build_env, episode_seed, eval_plan, evaluate,
                              load_checkpoint, rollout, save_checkpoint, train)
from dagcomm.topology import dag_from_json

logger = logging.getLogger(__name__)

STUDIES = ("depth", "order", "loss")
ORDER_SHUFFLE_SEEDS = (1, 2, 3)
LAMBDA_ON = 0.01

COMPARISON_COLUMNS = ["variant", "topology", "lambda_iei", "lambda_sei", "seed", "epochs",
                      "success_rate", "avg_steps", "c_comm", "iei", "sei", "loss",
                      "eval_success_rate", "eval_avg_steps", "eval_c_comm", "eval_iei", "eval_sei",
                      "convergence_epoch", "depth"]


def run_id(run_config: RunConfig) -> str:
    """Content hash of the configuration: identical configs share a run id."""
    canonical = json.dumps(run_config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha1(canonical.encode("utf-8")).hexdigest()[:12]


def write_metrics_csv(records: List[metrics.MetricsRecord], path) -> None:
    frame = pd.DataFrame([r.row() for r in records], columns=list(metrics.MetricsRecord.COLUMNS))
    frame.to_csv(path, index=False)


def read_metrics_csv(path) -> List[metrics.MetricsRecord]:
    frame = pd.read_csv(path)
    return [metrics.MetricsRecord(**{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()})
            for row in frame.to_dict("records")]


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_training(run_config: RunConfig, out_dir=None, seed: Optional[int] = None,
                 progress: Optional[bool] = None) -> dict:
    """
    Train one configuration and write every result file.

    Args:
        run_config: validated RunConfig
        out_dir: overrides output.dir
        seed: overrides train.seed

    Returns:
        the manifest dict that was written
    """
    if seed is not None:
        run_config = run_config.model_copy(update={"train": run_config.train.model_copy(update={"seed": seed})})
    out = Path(out_dir if out_dir is not None else run_config.output.dir)
    run_config = run_config.model_copy(update={"output": run_config.output.model_copy(update={"dir": str(out)})})
    show = run_config.output.progress if progress is None else progress
    config = run_config.to_train_config()
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    meta = {"run_config": run_config.model_dump(mode="json")}

    def checkpoint(epoch, policies, learner):
        save_checkpoint(ckpt_dir / f"epoch_{epoch:05d}.bin", policies, learner, meta)

    logger.info(f"Run {run_id(run_config)} writing to {out}")
    result: TrainResult = train(config, progress=show, checkpoint_fn=checkpoint)
    write_metrics_csv(result.records, out / "metrics.csv")
    save_checkpoint(ckpt_dir / "final.bin", result.policies, result.learner, meta)
    _write_json(out / "topology.json", result.plan.describe())

    evaluation = None
    if config.eval_episodes > 0:
        env = build_env(config)
        evaluation = evaluate(result.policies, result.plan, env, n=config.eval_episodes,
                              seed=config.seed, progress=show)

    manifest = {
        "run_id": run_id(run_config),
        "config": run_config.model_dump(mode="json"),
        "seed": config.seed,
        "epochs": len(result.records),
        "final_metrics": result.records[-1].to_dict() if result.records else None,
        "eval": evaluation.to_dict() if evaluation is not None else None,
        "convergence_epoch": result.convergence_epoch,
        "topology": result.plan.describe(),
        "checkpoint": str(ckpt_dir / "final.bin"),
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _restore(checkpoint) -> Tuple[object, CommPlan, object, RunConfig]:
    policies, learner, meta = load_checkpoint(checkpoint)
    try:
        run_config = RunConfig(**meta["run_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint {checkpoint} carries no usable run configuration: {e}") from e
    config = run_config.to_train_config()
    env = build_env(config)
    if env.n_agents != policies.n_agents:
        raise CheckpointError(f"checkpoint has {policies.n_agents} agents, its environment {env.n_agents}")
    return policies, eval_plan(config, env.n_agents, learner), env, run_config


def run_eval(checkpoint, episodes: int = 100, seed: int = 0, out_path=None,
             progress: bool = False) -> metrics.MetricsRecord:
    """Greedy evaluation of a saved checkpoint; the record is written as JSON when out_path is given."""
    policies, plan, env, _ = _restore(checkpoint)
    record = evaluate(policies, plan, env, n=episodes, seed=seed, progress=progress)
    if out_path is not None:
        _write_json(out_path, record.to_dict())
    return record


def write_trace(checkpoint, episodes: int, out_dir, seed: int = 0) -> Tuple[Path, Path]:
    """
    Replay episodes greedily and dump one JSON line per environment step plus the
    full communication ledger.

    Returns:
        (trace.jsonl path, ledger.csv path)
    """
    policies, plan, env, _ = _restore(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path, ledger_path = out / "trace.jsonl", out / "ledger.csv"
    ledger = CommLedger()
    with open(trace_path, "w") as f:
        for k in range(episodes):
            tr = rollout(env, policies, plan, episode_seed(seed, 0, 0, k), greedy=True,
                         with_critic=False, episode=k)
            ledger.extend(tr.ledger)
            senders = tr.senders()
            per_step = tr.ledger.per_step()
            for t in range(tr.length):
                step_payloads = tr.payloads[senders, t] if senders else np.zeros((0, tr.payloads.shape[2]))
                line = {
                    "episode": k,
                    "step": t,
                    "actions": tr.actions[:, t].tolist(),
                    "rewards": tr.rewards[:, t].tolist(),
                    "active": tr.active[:, t].tolist(),
                    "comm": per_step.get((k, t), 0),
                    "iei": metrics.iei(step_payloads) if len(senders) else 0.0,
                    "done": t == tr.length - 1,
                    "success": tr.success if t == tr.length - 1 else None,
                }
                f.write(json.dumps(line) + "\n")
    ledger.write_csv(ledger_path)
    return trace_path, ledger_path


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def _variant(base: RunConfig, **topology_and_train) -> RunConfig:
    topo = {k: v for k, v in topology_and_train.items() if k in ("mode", "fixed_edges", "shuffle_seed")}
    tr = {k: v for k, v in topology_and_train.items() if k in ("lambda_iei", "lambda_sei")}
    return base.model_copy(update={
        "topology": base.topology.model_copy(update=topo),
        "train": base.train.model_copy(update=tr),
    })


def study_variants(study: str, base: RunConfig) -> Dict[str, RunConfig]:
    """Variants of a study that do not depend on another run's result."""
    if study == "depth":
        return {f"fc-d{d}": _variant(base, mode=f"fc-d{d}") for d in (1, 2, 4)}
    if study == "loss":
        return {"lambda-off": _variant(base, lambda_iei=0.0, lambda_sei=0.0),
                "lambda-on": _variant(base, lambda_iei=LAMBDA_ON, lambda_sei=LAMBDA_ON)}
    if study == "order":
        return {"learned": _variant(base, mode="learned")}
    raise ConfigError(f"unknown study '{study}' (expected one of {', '.join(STUDIES)})")


def _train_variant(job) -> dict:
    config_data, out_dir = job
    return run_training(RunConfig(**config_data), out_dir=out_dir, progress=False)


def _run_jobs(jobs: Dict[str, Tuple[RunConfig, Path]], workers: int) -> Dict[str, dict]:
    payload = [(cfg.model_dump(mode="json"), str(path)) for cfg, path in jobs.values()]
    if workers <= 1:
        manifests = [_train_variant(job) for job in tqdm(payload, desc="Variants")]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            manifests = list(pool.map(_train_variant, payload))
    return dict(zip(jobs.keys(), manifests))


def comparison_row(variant: str, manifest: dict) -> dict:
    cfg = manifest["config"]
    final = manifest["final_metrics"] or {}
    ev = manifest["eval"] or {}
    row = {
        "variant": variant,
        "topology": cfg["topology"]["mode"],
        "lambda_iei": cfg["train"]["lambda_iei"],
        "lambda_sei": cfg["train"]["lambda_sei"],
        "seed": manifest["seed"],
        "epochs": manifest["epochs"],
        "convergence_epoch": manifest["convergence_epoch"],
        "depth": manifest["topology"].get("depth"),
    }
    for name in ("success_rate", "avg_steps", "c_comm", "iei", "sei", "loss"):
        row[name] = final.get(name)
    for name in ("success_rate", "avg_steps", "c_comm", "iei", "sei"):
        row[f"eval_{name}"] = ev.get(name)
    return row


def run_ablation(study: str, base: RunConfig, out_dir=None, workers: int = 1) -> pd.DataFrame:
    """
    Train every variant of a study and write comparison.csv (one row per variant).

    depth: fixed fully-connected DAGs of depth 1, 2 and 4.
    order: the learned topology, then its mode DAG retrained with agents
        reassigned by each of the shuffle seeds.
    loss: regularizers off vs. on.
    """
    out = Path(out_dir if out_dir is not None else base.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = study_variants(study, base)
    logger.info(f"Ablation '{study}': {len(variants)} variant(s) in {out}")
    manifests = _run_jobs({name: (cfg, out / name) for name, cfg in variants.items()}, workers)

    if study == "order":
        learned = manifests["learned"]["topology"]
        edges = list(dag_from_json(learned).edges)
        if not edges:
            logger.warning("Learned topology has no edges; shuffled variants communicate over an empty DAG")
        shuffled = {f"shuffled-{s}": _variant(base, mode="shuffled", fixed_edges=edges, shuffle_seed=s)
                    for s in ORDER_SHUFFLE_SEEDS}
        manifests.update(_run_jobs({name: (cfg, out / name) for name, cfg in shuffled.items()}, workers))

    frame = pd.DataFrame([comparison_row(name, m) for name, m in manifests.items()], columns=COMPARISON_COLUMNS)
    frame.to_csv(out / "comparison.csv", index=False)
    return frame
