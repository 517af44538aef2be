import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from advmark.errors import ConfigError, DomainError

logger = logging.getLogger()

LOG_FORMAT = "%(asctime)s | %(name)s [%(levelname)s] %(message)s"

# Campaign perturbation levels, in units of 1/255
DEFAULT_EPSILON_GRID_255 = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)

# Transformations swept by eval-robustness
DEFAULT_ROBUSTNESS_GRID: Tuple[Tuple[str, float], ...] = (
    tuple(("crop", r) for r in (1.0, 0.95, 0.9, 0.85, 0.8, 0.75))
    + tuple(("resize", r) for r in (1.0, 0.95, 0.9, 0.85, 0.8, 0.75))
    + tuple(("brightness", f) for f in (1.0, 1.5, 2.0, 2.5, 3.0, 3.5))
    + tuple(("contrast", f) for f in (1.0, 1.5, 2.0, 2.5, 3.0, 3.5))
    + tuple(("jpeg", q) for q in (100, 95, 90, 85, 80, 75))
)

M_INIT_CHOICES = ("uniform", "half")


@dataclass
class DatasetConfig:
    # 'toy' (procedural identities) or 'folder' (<identity>/<name>.png tree)
    kind: str = "toy"
    path: Optional[str] = None
    num_identities: int = 100
    # Training samples per identity. Evaluation pairs are drawn after these
    per_identity: int = 4
    image_size: int = 112
    seed: int = 0


@dataclass
class CodecConfig:
    message_bits: int = 48
    width: int = 32
    blocks: int = 4
    strength: float = 0.02
    lam: float = 1.0
    epochs: int = 30
    batch: int = 8
    lr: float = 0.01
    seed: int = 0
    train_images: int = 200
    heldout_images: int = 20
    image_size: int = 112


@dataclass
class EmbedderConfig:
    embedding_dim: int = 64
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    image_size: int = 112
    scale: float = 16.0
    epochs: int = 20
    batch: int = 16
    lr: float = 0.05
    seed: int = 0


@dataclass
class MatcherConfig:
    tau: float = 0.3

    def __post_init__(self):
        if not -1.0 < self.tau < 1.0:
            raise DomainError(f"tau must lie in (-1, 1), got {self.tau}")


@dataclass
class AttackConfig:
    """Joint perturbation/message search settings

    alpha (δ step) and beta (m step) are derived: ε/T and 1/T.
    """

    epsilon: float = 4.0 / 255.0
    steps: int = 10
    rounds: int = 3
    m_init: str = "uniform"
    seed: int = 0
    round_each_round: bool = False
    check_constraints: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise DomainError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise DomainError(f"steps (T) must be >= 1, got {self.steps}")
        if self.rounds < 1:
            raise DomainError(f"rounds (K) must be >= 1, got {self.rounds}")
        if self.m_init not in M_INIT_CHOICES:
            raise DomainError(
                f"m_init must be one of {', '.join(M_INIT_CHOICES)}, got '{self.m_init}'"
            )

    @property
    def alpha(self) -> float:
        return self.epsilon / self.steps

    @property
    def beta(self) -> float:
        return 1.0 / self.steps

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        values = asdict(self)
        values["epsilon"] = epsilon
        return AttackConfig(**values)

    def echo(self) -> Dict[str, Any]:
        values = asdict(self)
        values["alpha"] = self.alpha
        values["beta"] = self.beta
        return values


@dataclass
class RobustnessConfig:
    grid: Tuple[Tuple[str, float], ...] = DEFAULT_ROBUSTNESS_GRID
    num_images: int = 100
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)
    epsilon_grid: Tuple[float, ...] = tuple(e / 255.0 for e in DEFAULT_EPSILON_GRID_255)
    num_pairs: int = 100
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        grid = list(self.epsilon_grid)
        if not grid:
            raise DomainError("epsilon_grid must not be empty")
        if any(e < 0 for e in grid):
            raise DomainError("epsilon_grid values must be >= 0")
        if grid != sorted(grid):
            raise DomainError("epsilon_grid must be sorted ascending")
        if self.workers < 1:
            raise DomainError(f"workers must be >= 1, got {self.workers}")

    def echo(self) -> Dict[str, Any]:
        values = asdict(self)
        values["attack"] = self.attack.echo()
        values["epsilon_grid_255"] = [round(e * 255.0, 6) for e in self.epsilon_grid]
        return values


class Config(object):
    def __init__(self):
        self.config: Dict[str, Any] = {}
        self.experiment: ExperimentConfig = ExperimentConfig()

        self.log_level: str = "INFO"
        self.file_logging_enabled: bool = False
        self.file_logging_filepath: str = "advmark.log"
        self.console_logging_enabled: bool = True

    def read_config(self, filepath: str):
        """Load a YAML (or JSON) config file and configure logging from it"""
        if not os.path.isfile(filepath):
            raise ConfigError(f"Config file '{filepath}' does not exist")

        # JSON documents are valid YAML, so one loader covers both formats
        with open(filepath) as file_stream:
            try:
                loaded = yaml.safe_load(file_stream.read())
            except yaml.YAMLError as e:
                raise ConfigError(f"Config file '{filepath}' could not be parsed: {e}")

        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file '{filepath}' must contain a mapping")

        self.load_dict(loaded)
        self.setup_logging()

    def load_dict(self, values: Dict[str, Any]):
        """Populate every section from an already-parsed mapping"""
        self.config = values

        self.log_level = self._get_cfg(["logging", "level"], default="INFO", required=False)
        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError("logging.level must be one of DEBUG, INFO, WARNING, ERROR")
        self.file_logging_enabled = self._get_cfg(
            ["logging", "file_logging", "enabled"], default=False, required=False
        )
        self.file_logging_filepath = self._get_cfg(
            ["logging", "file_logging", "filepath"], default="advmark.log", required=False
        )
        self.console_logging_enabled = self._get_cfg(
            ["logging", "console_logging", "enabled"], default=True, required=False
        )

        seed = self._get_int(["seed"], 0)

        dataset = DatasetConfig(
            kind=self._get_choice(["dataset", "kind"], "toy", ("toy", "folder")),
            path=self._get_cfg(["dataset", "path"], required=False),
            num_identities=self._get_int(["dataset", "num_identities"], 100, minimum=2),
            per_identity=self._get_int(["dataset", "per_identity"], 4, minimum=2),
            image_size=self._get_int(["dataset", "image_size"], 112, minimum=8),
            seed=self._get_int(["dataset", "seed"], seed),
        )
        if dataset.kind == "folder" and not dataset.path:
            raise ConfigError("dataset.path is required when dataset.kind is 'folder'")

        codec = CodecConfig(
            message_bits=self._get_int(["codec", "message_bits"], 48, minimum=1),
            width=self._get_int(["codec", "width"], 32, minimum=1),
            blocks=self._get_int(["codec", "blocks"], 4, minimum=1),
            strength=self._get_float(["codec", "strength"], 0.02, minimum=0.0, strict=True),
            lam=self._get_float(["codec", "lambda"], 1.0, minimum=0.0),
            epochs=self._get_int(["codec", "epochs"], 30, minimum=1),
            batch=self._get_int(["codec", "batch"], 8, minimum=1),
            lr=self._get_float(["codec", "lr"], 0.01, minimum=0.0, strict=True),
            seed=self._get_int(["codec", "seed"], seed),
            train_images=self._get_int(["codec", "train_images"], 200, minimum=1),
            heldout_images=self._get_int(["codec", "heldout_images"], 20, minimum=1),
            image_size=self._get_int(["codec", "image_size"], 112, minimum=8),
        )

        widths = self._get_cfg(
            ["embedder", "widths"], default=[16, 32, 64, 64], required=False
        )
        if not isinstance(widths, list) or not widths or any(
            not isinstance(w, int) or w < 1 for w in widths
        ):
            raise ConfigError("embedder.widths must be a list of positive integers")
        embedder = EmbedderConfig(
            embedding_dim=self._get_int(["embedder", "embedding_dim"], 64, minimum=8),
            widths=tuple(widths),
            image_size=self._get_int(["embedder", "image_size"], 112, minimum=8),
            scale=self._get_float(["embedder", "scale"], 16.0, minimum=0.0, strict=True),
            epochs=self._get_int(["embedder", "epochs"], 20, minimum=1),
            batch=self._get_int(["embedder", "batch"], 16, minimum=1),
            lr=self._get_float(["embedder", "lr"], 0.05, minimum=0.0, strict=True),
            seed=self._get_int(["embedder", "seed"], seed),
        )

        try:
            attack = AttackConfig(
                epsilon=self._get_float(["attack", "epsilon"], 4.0, minimum=0.0) / 255.0,
                steps=self._get_int(["attack", "steps"], 10, minimum=1),
                rounds=self._get_int(["attack", "rounds"], 3, minimum=1),
                m_init=self._get_choice(["attack", "m_init"], "uniform", M_INIT_CHOICES),
                seed=self._get_int(["attack", "seed"], seed),
                round_each_round=self._get_bool(["attack", "round_each_round"], False),
                check_constraints=self._get_bool(["attack", "check_constraints"], True),
            )
            matcher = MatcherConfig(
                tau=self._get_float(["matcher", "tau"], 0.3),
            )
        except DomainError as e:
            raise ConfigError(e.msg)

        grid_values = self._get_cfg(["robustness", "grid"], required=False)
        grid = DEFAULT_ROBUSTNESS_GRID
        if grid_values is not None:
            grid = self._parse_robustness_grid(grid_values)
        robustness = RobustnessConfig(
            grid=grid,
            num_images=self._get_int(["robustness", "num_images"], 100, minimum=1),
            seed=self._get_int(["robustness", "seed"], seed),
        )

        epsilon_grid = self._get_cfg(
            ["experiment", "epsilon_grid"],
            default=list(DEFAULT_EPSILON_GRID_255),
            required=False,
        )
        if not isinstance(epsilon_grid, list) or any(
            not isinstance(e, (int, float)) or isinstance(e, bool) for e in epsilon_grid
        ):
            raise ConfigError(
                "experiment.epsilon_grid must be a list of numbers (units of 1/255)"
            )

        try:
            self.experiment = ExperimentConfig(
                dataset=dataset,
                codec=codec,
                embedder=embedder,
                attack=attack,
                matcher=matcher,
                robustness=robustness,
                epsilon_grid=tuple(float(e) / 255.0 for e in epsilon_grid),
                num_pairs=self._get_int(["experiment", "num_pairs"], 100, minimum=1),
                output_dir=self._get_cfg(["output_dir"], default="out", required=False),
                seed=seed,
                workers=self._get_int(["experiment", "workers"], 1, minimum=1),
            )
        except DomainError as e:
            raise ConfigError(f"experiment: {e.msg}")

    def apply_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None):
        """Command-line flags, which take precedence over the config file

        A seed given on the command line replaces every section's seed.
        """
        experiment = self.experiment
        if seed is not None:
            experiment.seed = seed
            for section in (
                experiment.dataset,
                experiment.codec,
                experiment.embedder,
                experiment.attack,
                experiment.robustness,
            ):
                section.seed = seed
        if output_dir is not None:
            experiment.output_dir = output_dir

    def setup_logging(self):
        formatter = logging.Formatter(LOG_FORMAT)
        logger.setLevel(self.log_level)

        # Replace handlers installed by an earlier call
        for handler in list(logger.handlers):
            if getattr(handler, "_advmark", False):
                logger.removeHandler(handler)

        if self.file_logging_enabled:
            handler = logging.FileHandler(self.file_logging_filepath)
            handler.setFormatter(formatter)
            handler._advmark = True
            logger.addHandler(handler)

        if self.console_logging_enabled:
            handler = logging.StreamHandler(sys.stdout)
            handler.setFormatter(formatter)
            handler._advmark = True
            logger.addHandler(handler)

    def _parse_robustness_grid(self, values: Any) -> Tuple[Tuple[str, float], ...]:
        """Parse a list of ``{kind: ..., values: [...]}`` entries"""
        from advmark.transforms import TRANSFORM_KINDS

        if not isinstance(values, list):
            raise ConfigError("robustness.grid must be a list")
        grid: List[Tuple[str, float]] = []
        for entry in values:
            if not isinstance(entry, dict) or "kind" not in entry:
                raise ConfigError("robustness.grid entries need a 'kind' and 'values'")
            kind = entry["kind"]
            if kind not in TRANSFORM_KINDS:
                raise ConfigError(f"robustness.grid: unknown transform kind '{kind}'")
            params = entry.get("values", [1.0])
            if not isinstance(params, list):
                raise ConfigError(f"robustness.grid: values of '{kind}' must be a list")
            grid.extend((kind, float(p)) for p in params)
        return tuple(grid)

    def _get_int(self, path: List[str], default: int, minimum: Optional[int] = None) -> int:
        value = self._get_cfg(path, default=default, required=False)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{'.'.join(path)} must be an integer")
        if minimum is not None and value < minimum:
            raise ConfigError(f"{'.'.join(path)} must be >= {minimum}")
        return value

    def _get_float(
        self,
        path: List[str],
        default: float,
        minimum: Optional[float] = None,
        strict: bool = False,
    ) -> float:
        value = self._get_cfg(path, default=default, required=False)
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{'.'.join(path)} must be a number")
        value = float(value)
        if minimum is not None and (value < minimum or (strict and value == minimum)):
            relation = ">" if strict else ">="
            raise ConfigError(f"{'.'.join(path)} must be {relation} {minimum}")
        return value

    def _get_bool(self, path: List[str], default: bool) -> bool:
        value = self._get_cfg(path, default=default, required=False)
        if not isinstance(value, bool):
            raise ConfigError(f"{'.'.join(path)} must be a boolean value")
        return value

    def _get_choice(self, path: List[str], default: str, choices) -> str:
        value = self._get_cfg(path, default=default, required=False)
        if value not in choices:
            raise ConfigError(f"{'.'.join(path)} must be one of {', '.join(choices)}")
        return value

    def _get_cfg(
        self,
        path: List[str],
        default: Any = None,
        required: bool = True,
    ) -> Any:
        """Get a config option from a path and option name, specifying whether it is
        required.

        Raises:
            ConfigError: If required is specified and the object is not found
                (and there is no default value provided), this error will be raised
        """
        # Sift through the config until we reach our option
        config = self.config
        for name in path:
            config = config.get(name) if isinstance(config, dict) else None

            # If at any point we don't get our expected option...
            if config is None:
                # Raise an error if it was required
                if required and default is None:
                    raise ConfigError(f"Config option {'.'.join(path)} is required")

                # or return the default value
                return default

        # We found the option. Return it
        return config


CONFIG: Config = Config()
