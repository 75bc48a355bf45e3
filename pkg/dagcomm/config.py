"""
Run configuration file: YAML with the sections env, topology, train, eval and
output. Every section is a pydantic model that rejects unknown keys; the
sections map onto one TrainConfig.
"""

import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from dagcomm.envs import make_config
from dagcomm.errors import ConfigError, ContractError
from dagcomm.training import TrainConfig

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvSection(_Section):
    name: Literal["pp", "pcp", "tj"] = Field(default="tj", description="environment: pp, pcp or tj")
    grid_size: Optional[int] = Field(default=None, gt=0, description="grid side length (null = environment default)")
    n_agents: Optional[int] = Field(default=None, gt=0, description="number of agents / car slots")
    vision: Optional[int] = Field(default=None, ge=0, description="vision radius in cells")
    max_steps: Optional[int] = Field(default=None, gt=0, description="episode step limit")
    n_capture: Optional[int] = Field(default=None, ge=0, description="pcp: number of capture agents")
    p_arrive: Optional[float] = Field(default=None, ge=0.0, le=1.0, description="tj: arrival probability per entry and step")


class TopologySection(_Section):
    mode: Literal["learned", "fc-d1", "fc-d2", "fc-d4", "shuffled", "fixed", "broadcast", "none"] = Field(
        default="broadcast", description="learned, fc-d1, fc-d2, fc-d4, shuffled, fixed, broadcast or none")
    fixed_edges: Optional[List[Tuple[int, int]]] = Field(
        default=None, description="[[sender, receiver], ...] for the fixed and shuffled modes")
    shuffle_seed: int = Field(default=0, description="agent reassignment seed of the shuffled mode")
    temperature: float = Field(default=1.0, gt=0.0, description="learned mode: Gumbel noise temperature")
    lr: float = Field(default=0.05, gt=0.0, description="learned mode: topology learner learning rate")


class TrainSection(_Section):
    epochs: int = Field(default=200, ge=0, description="training epochs")
    batches_per_epoch: int = Field(default=2, gt=0, description="updates per epoch")
    episodes_per_batch: int = Field(default=100, gt=0, description="episodes per update")
    lambda_iei: float = Field(default=0.0, ge=0.0, description="weight of the message entropy regularizer (0 = off)")
    lambda_sei: float = Field(default=0.0, ge=0.0, description="weight of the message similarity regularizer (0 = off)")
    gamma: float = Field(default=0.99, ge=0.0, le=1.0, description="discount factor")
    entropy_bonus: float = Field(default=0.01, ge=0.0, description="policy entropy bonus weight")
    value_coef: float = Field(default=0.5, ge=0.0, description="critic loss weight")
    lr: float = Field(default=1e-3, gt=0.0, description="Adam learning rate of all networks")
    hidden: int = Field(default=32, gt=0, description="hidden state width")
    msg_width: int = Field(default=16, gt=0, description="message payload width")
    critic_hidden: int = Field(default=64, gt=0, description="centralized critic hidden width")
    share_weights: bool = Field(default=True, description="share networks within each agent role")
    seed: int = Field(default=0, ge=0, description="run seed")
    checkpoint_every: int = Field(default=0, ge=0, description="extra checkpoint every k epochs (0 = final only)")
    threads: Optional[int] = Field(default=None, gt=0, description="rollout threads (null = DAGCOMM_THREADS or 1)")
    max_nonfinite: int = Field(default=3, gt=0, description="abort after this many consecutive non-finite batches")


class EvalSection(_Section):
    episodes: int = Field(default=100, ge=0, description="evaluation episodes after training (0 = skip)")


class OutputSection(_Section):
    dir: str = Field(default="runs/dagcomm", description="output directory")
    progress: bool = Field(default=True, description="show progress bars")


class RunConfig(_Section):
    env: EnvSection = Field(default_factory=EnvSection)
    topology: TopologySection = Field(default_factory=TopologySection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def to_train_config(self) -> TrainConfig:
        """Flatten the sections into a TrainConfig; invalid combinations raise ConfigError."""
        values = self.train.model_dump()
        values.update(
            env=self.env.name, grid_size=self.env.grid_size, n_agents=self.env.n_agents,
            vision=self.env.vision, max_steps=self.env.max_steps, n_capture=self.env.n_capture,
            p_arrive=self.env.p_arrive, topology=self.topology.mode,
            fixed_edges=self.topology.fixed_edges, shuffle_seed=self.topology.shuffle_seed,
            temperature=self.topology.temperature, topology_lr=self.topology.lr,
            eval_episodes=self.eval.episodes)
        try:
            return TrainConfig(**values)
        except ValidationError as e:
            raise ConfigError(_describe(e)) from e

    @classmethod
    def from_train_config(cls, config: TrainConfig, out_dir: str = "runs/dagcomm") -> "RunConfig":
        return cls(
            env=EnvSection(name=config.env, grid_size=config.grid_size, n_agents=config.n_agents,
                           vision=config.vision, max_steps=config.max_steps, n_capture=config.n_capture,
                           p_arrive=config.p_arrive),
            topology=TopologySection(mode=config.topology, fixed_edges=config.fixed_edges,
                                     shuffle_seed=config.shuffle_seed, temperature=config.temperature,
                                     lr=config.topology_lr),
            train=TrainSection(**{k: getattr(config, k) for k in TrainSection.model_fields}),
            eval=EvalSection(episodes=config.eval_episodes),
            output=OutputSection(dir=out_dir))


def _describe(error: ValidationError) -> str:
    problems = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "config"
        problems.append(f"{where}: {item['msg']}")
    return "invalid configuration: " + "; ".join(problems)


def parse_config(data) -> RunConfig:
    """Validate an already-parsed mapping (None means all defaults)."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"configuration must be a mapping of sections, got {type(data).__name__}")
    try:
        config = RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e
    train_config = config.to_train_config()
    try:
        make_config(train_config.env, **train_config.env_overrides())
    except ContractError as e:
        raise ConfigError(f"invalid env section: {e}") from e
    return config


def load_config(path) -> RunConfig:
    """
    Read and validate a YAML run configuration.

    Raises:
        ConfigError: missing/unreadable file, YAML syntax error or schema violation
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    logger.debug(f"Loaded configuration from {path}")
    return parse_config(data)


def _yaml_value(value) -> str:
    return yaml.safe_dump(value, default_flow_style=True).strip().removesuffix("...").strip()


def template_text() -> str:
    """YAML template listing every key with its default and a one-line description."""
    lines = ["# dagcomm run configuration", "# every key is optional; unknown keys are rejected", ""]
    for section, field in RunConfig.model_fields.items():
        model = field.annotation
        lines.append(f"{section}:")
        for key, info in model.model_fields.items():
            if info.description:
                lines.append(f"  # {info.description}")
            lines.append(f"  {key}: {_yaml_value(info.get_default(call_default_factory=True))}")
        lines.append("")
    return "\n".join(lines)


def write_template(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(template_text())
    return path
