"""
Run configuration: an INI file with [paths], [model], [training], [rollout], [quantizer], [tokenizer] and [seeds]
sections, merged as built-in defaults < file < command-line flags.
"""
import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from rich.table import Table

from src.console import console
from src.errors import ConfigurationError
from src.map_codec import MAX_POINTS_PER_SEGMENT, MAX_SEGMENT_LENGTH, MAX_SEGMENTS
from src.model import ModelConfig
from src.rollout_engine import RolloutConfig
from src.sequence_builder import DEFAULT_KNN
from src.state_codec import RS_FIELDS, FieldRanges
from src.training import TrainConfig

SECTIONS = ("paths", "model", "training", "rollout", "quantizer", "tokenizer", "seeds")
DEFAULT_PATHS = {"corpus": "corpus", "outputs": "outputs", "checkpoint": "outputs/model.pt"}
_BOOLEANS = configparser.ConfigParser.BOOLEAN_STATES


@dataclass
class TokenizerConfig:
    segment_length: float = MAX_SEGMENT_LENGTH
    points_per_segment: int = MAX_POINTS_PER_SEGMENT
    max_segments: int = MAX_SEGMENTS
    max_agents: int = 128
    knn_k: int = DEFAULT_KNN

    def __post_init__(self):
        if self.segment_length <= 0:
            raise ConfigurationError(f"tokenizer.segment_length: must be > 0, got {self.segment_length}")
        for name in ("points_per_segment", "max_segments", "max_agents", "knn_k"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"tokenizer.{name}: must be >= 1, got {getattr(self, name)}")
        if self.points_per_segment != MAX_POINTS_PER_SEGMENT:
            raise ConfigurationError(f"tokenizer.points_per_segment: the point encoder expects "
                                     f"{MAX_POINTS_PER_SEGMENT}, got {self.points_per_segment}")


@dataclass
class RunConfig:
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    quantizer: FieldRanges = field(default_factory=FieldRanges)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    seed: int = 0

    def sections(self):
        """Flat {section: {key: value}} view, in file order."""
        quantizer = {name: getattr(self.quantizer, name) for name in RS_FIELDS}
        quantizer["num_bins"] = self.quantizer.num_bins
        return {
            "paths": dict(self.paths),
            "model": asdict(self.model),
            "training": asdict(self.training),
            "rollout": asdict(self.rollout),
            "quantizer": quantizer,
            "tokenizer": asdict(self.tokenizer),
            "seeds": {"global": self.seed},
        }


def _parse_mapping(section, key, raw):
    mapping = {}
    for item in str(raw).split(","):
        if not item.strip():
            continue
        name, sep, value = item.partition(":")
        if not sep:
            raise ConfigurationError(f"{section}.{key}: expected 'name: value' pairs, got '{raw}'")
        mapping[name.strip()] = value.strip()
    return mapping


def _convert(section, key, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return _BOOLEANS[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if text.lower() in ("", "none") and (default is None or isinstance(default, dict)):
            return None
        if isinstance(default, dict) or key in ("type_targets", "strategies"):
            return _parse_mapping(section, key, text) or None
        if default is None:
            return int(text)
    except (ValueError, KeyError) as e:
        raise ConfigurationError(f"{section}.{key}: cannot parse '{raw}'") from e
    return text


def _build(section, cls, values):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigurationError(f"{section}.{key}: unknown key")
        kwargs[key] = _convert(section, key, raw, getattr(defaults, key))
    return cls(**kwargs)


def read_config_file(path):
    """
    Read an INI file into {section: {key: raw string}}.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except (OSError, configparser.Error) as e:
        console.print(f"[error]Error reading config {path}: {e}[/error]", style="error")
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ConfigurationError(f"{unknown[0]}: unknown section, expected one of {SECTIONS}")
    return {name: dict(parser[name]) for name in parser.sections()}


def load_config(path=None, overrides=None):
    """
    Merge defaults, the config file and flag overrides.

    Parameters:
    - path (str or Path): INI file; None keeps the defaults.
    - overrides (dict): {"section.key": value} from command-line flags; None values are ignored.

    Returns:
    - RunConfig: The validated configuration.
    """
    raw = {name: {} for name in SECTIONS}
    if path is not None:
        for name, values in read_config_file(path).items():
            raw[name].update(values)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        name, _, key = dotted.partition(".")
        if name not in raw:
            raise ConfigurationError(f"{dotted}: unknown section")
        raw[name][key] = value

    for key in raw["paths"]:
        if key not in DEFAULT_PATHS:
            raise ConfigurationError(f"paths.{key}: unknown key")
    unknown_seeds = [key for key in raw["seeds"] if key != "global"]
    if unknown_seeds:
        raise ConfigurationError(f"seeds.{unknown_seeds[0]}: unknown key")
    seed = _convert("seeds", "global", raw["seeds"].get("global", "0"), 0)
    # components without their own seed follow the global one
    raw["training"].setdefault("seed", seed)
    raw["rollout"].setdefault("seed", seed)

    config = RunConfig(
        paths={**DEFAULT_PATHS, **{k: str(v) for k, v in raw["paths"].items()}},
        model=_build("model", ModelConfig, raw["model"]),
        training=_build("training", TrainConfig, raw["training"]),
        rollout=_build("rollout", RolloutConfig, raw["rollout"]),
        quantizer=FieldRanges.from_mapping(raw["quantizer"]),
        tokenizer=_build("tokenizer", TokenizerConfig, raw["tokenizer"]),
        seed=seed,
    )
    if config.quantizer.num_bins != config.model.rs_bins:
        raise ConfigurationError(f"quantizer.num_bins={config.quantizer.num_bins} differs from "
                                 f"model.rs_bins={config.model.rs_bins}")
    if config.tokenizer.max_segments > config.model.max_segments:
        raise ConfigurationError(f"tokenizer.max_segments={config.tokenizer.max_segments} exceeds "
                                 f"model.max_segments={config.model.max_segments}")
    if config.tokenizer.max_agents > config.model.max_agents:
        raise ConfigurationError(f"tokenizer.max_agents={config.tokenizer.max_agents} exceeds "
                                 f"model.max_agents={config.model.max_agents}")
    return config


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, dict):
        return ", ".join(f"{k}: {v}" for k, v in value.items())
    return "none" if value is None else str(value)


def print_config(config):
    """
    Display the merged configuration as a table.
    """
    table = Table(title="Configuration", show_lines=False)
    table.add_column("Section", justify="left", style="info")
    table.add_column("Key", justify="left")
    table.add_column("Value", justify="left", style="highlight")
    for name, values in config.sections().items():
        for key, value in values.items():
            table.add_row(name, key, _format(value))
    console.print(table)


def dump_config(config, path):
    """Write the merged configuration as an INI file that load_config reads back."""
    parser = configparser.ConfigParser()
    for name, values in config.sections().items():
        parser[name] = {key: _format(value) for key, value in values.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        parser.write(handle)
    console.print(f"[success]Configuration written to {path}.[/success]", style="success")
    return path
