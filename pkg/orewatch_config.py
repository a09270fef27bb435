"""Pipeline configuration: dataclass defaults plus a `key = value` file parser.

Keys carry a section prefix, for example:

    seed = 7
    scene.shadow_coverage = 0.3
    scene.atmosphere.sky_ratio = 0.2
    sae.finetune_samples = 5000
    cluster.k = 3
    train.arms = baseline, transfer, augment, combined

`#` starts a comment. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field

import numpy as np

from orewatch_cnn import CnnSpec, TrainOptions
from orewatch_errors import ConfigError, OrewatchError
from orewatch_illumination import AtmosphereSamplerParams
from orewatch_sae import AutoencoderSpec, SaeTrainConfig
from orewatch_spectral import WavelengthGrid
from orewatch_synth import CorpusSpec, SceneSpec

ARMS = {
    "baseline": (False, False),
    "transfer": (True, False),
    "augment": (False, True),
    "combined": (True, True),
}

# Fields that hold arrays or grids; they are set in code, not from the file
NOT_CONFIGURABLE = {"scene.grid", "scene.endmembers", "corpus.grid"}

TRUE_WORDS = ("true", "yes", "on", "1")
FALSE_WORDS = ("false", "no", "off", "0")


@dataclass(frozen=True)
class ClusterSection:
    k: int = 3
    restarts: int = 10
    max_iters: int = 300
    per_class: int = 200
    train_per_class: int = 180
    val_per_class: int = 20
    raw_baseline: bool = True


@dataclass(frozen=True)
class EncodeSection:
    render_index: int = 0
    render_all: bool = False


@dataclass(frozen=True)
class CnnSection:
    kernel_lengths: tuple = (30, 10, 10)
    channels: tuple = (16, 16, 16)
    hidden_sizes: tuple = (20, 20)
    grid_start_nm: float = 430.0
    grid_stop_nm: float = 860.0
    grid_step_nm: float = 2.0

    def spec(self, n_classes):
        grid = WavelengthGrid.arange(self.grid_start_nm, self.grid_stop_nm, self.grid_step_nm)
        return CnnSpec(
            kernel_lengths=tuple(self.kernel_lengths),
            channels=tuple(self.channels),
            fc_sizes=tuple(self.hidden_sizes) + (n_classes,),
            grid=grid,
        )


@dataclass(frozen=True)
class TrainSection:
    """CNN training settings and the ablation switches.

    `pretrained` x `augment` pick the single arm that runs when `arms` is empty.
    """

    epochs: int = 200
    batch_size: int = 60
    learning_rate: float = 0.01
    momentum: float = 0.9
    n_variants: int = 9
    selection: str = "best"
    freeze_batchnorm: bool = False
    eval_every: int = 1
    report_every: int = 20
    pretrained: bool = True
    augment: bool = True
    arms: tuple = ()
    pretrain_epochs: int = 30
    pretrain_learning_rate: float = 0.01
    test_limit: int = 120000

    def selected_arms(self):
        if not self.arms:
            for name, switches in ARMS.items():
                if switches == (self.pretrained, self.augment):
                    return [name]
        unknown = [arm for arm in self.arms if arm not in ARMS]
        if unknown:
            raise ConfigError(f"unknown training arms {unknown}; choose from {sorted(ARMS)}")
        return list(self.arms)

    def options(self, sampler, augment):
        return TrainOptions(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            augment=augment,
            n_variants=self.n_variants,
            sampler=sampler,
            selection=self.selection,
            freeze_batchnorm=self.freeze_batchnorm,
            eval_every=self.eval_every,
            report_every=self.report_every,
        )

    def pretrain_options(self, sampler):
        return dataclasses.replace(
            self.options(sampler, augment=False),
            epochs=self.pretrain_epochs,
            learning_rate=self.pretrain_learning_rate,
            selection="last",
            eval_every=max(1, self.pretrain_epochs),
        )


@dataclass(frozen=True)
class ClassifySection:
    chunk: int = 1024


@dataclass(frozen=True)
class PathsSection:
    """External inputs. An empty cube path means the synth stage provides the scene.

    A non-zero `panel_region` (row0, col0, row1, col1) marks the external cubes
    as raw radiance; synth then calibrates them against that panel.
    """

    cube: str = ""
    labels: str = ""
    second_cube: str = ""
    out: str = "output"
    panel_region: tuple = (0, 0, 0, 0)
    panel_reflectance: float = 0.99

    def __post_init__(self):
        if len(self.panel_region) != 4:
            raise ConfigError(f"panel region needs 4 values (row0, col0, row1, col1), got {self.panel_region}")

    @property
    def raw(self):
        return bool(self.cube) and any(self.panel_region)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    workers: int = 2
    scene: SceneSpec = field(default_factory=SceneSpec)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    sampler: AtmosphereSamplerParams = field(default_factory=AtmosphereSamplerParams)
    autoencoder: AutoencoderSpec = field(default_factory=AutoencoderSpec)
    sae: SaeTrainConfig = field(default_factory=SaeTrainConfig)
    encode: EncodeSection = field(default_factory=EncodeSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    cnn: CnnSection = field(default_factory=CnnSection)
    train: TrainSection = field(default_factory=TrainSection)
    classify: ClassifySection = field(default_factory=ClassifySection)
    paths: PathsSection = field(default_factory=PathsSection)

    def stage_seed(self, stage):
        return stage_seed(self.seed, stage)


def stage_seed(seed, stage):
    """Seed of one stage, derived from the global seed and the stage name."""
    sequence = np.random.SeedSequence([seed, zlib.crc32(stage.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


def _convert(key, text, current, declared):
    text = text.strip()
    optional = current is None or "Optional" in str(declared) or "None" in str(declared)
    if optional and text.lower() == "none":
        return None
    if isinstance(current, bool):
        word = text.lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise ConfigError(f"'{key}' expects true/false, got {text!r}")
    try:
        if isinstance(current, int) or (current is None and "int" in str(declared)):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            items = [v.strip() for v in text.strip("{}()[]").split(",") if v.strip()]
            kind = type(current[0]) if current else str
            return tuple(kind(v) for v in items)
        if isinstance(current, str):
            return text
    except ValueError:
        raise ConfigError(f"'{key}' cannot take the value {text!r}")
    raise ConfigError(f"'{key}' is not a configurable value")


def _set(obj, path, text, full_key):
    name, _, rest = path.partition(".")
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields:
        raise ConfigError(f"unknown configuration key '{full_key}'")
    current = getattr(obj, name)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"unknown configuration key '{full_key}'")
        value = _set(current, rest, text, full_key)
    else:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"'{full_key}' is a section, set one of its keys")
        value = _convert(full_key, text, current, fields[name].type)
    try:
        return dataclasses.replace(obj, **{name: value})
    except ConfigError:
        raise
    except (OrewatchError, TypeError, ValueError) as e:
        raise ConfigError(f"'{full_key} = {text}' is invalid: {e}")


def apply_setting(config, key, text):
    """Return a copy of `config` with one dotted key set from its text value."""
    key = key.strip().lower()
    if key in NOT_CONFIGURABLE:
        raise ConfigError(f"'{key}' cannot be set from a configuration file")
    return _set(config, key, text, key)


def parse_config_text(text, source="<config>"):
    """Parse `key = value` lines into an ordered list of (key, value) pairs."""
    settings = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        settings.append((key, value))
    return settings


def load_config(path=None, overrides=()):
    """Build a PipelineConfig from defaults, an optional file, then overrides.

    Args:
        path: Configuration file, or None for defaults only
        overrides: Iterable of "key=value" strings applied after the file

    Returns:
        PipelineConfig
    """
    config = PipelineConfig()
    settings = []
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                settings += parse_config_text(f.read(), path)
        except OSError as e:
            raise ConfigError(f"cannot read configuration {path}: {e}")
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override {override!r} is not key=value")
        key, value = override.split("=", 1)
        settings.append((key.strip(), value.strip()))
    for key, value in settings:
        config = apply_setting(config, key, value)
    return config


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        key = f"{prefix}{f.name}"
        if key in NOT_CONFIGURABLE:
            continue
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        elif isinstance(value, tuple):
            yield key, ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            yield key, str(value).lower()
        elif value is None:
            yield key, "none"
        else:
            yield key, str(value)


def dump_config(config):
    """Every configurable key and its value as `key = value` text."""
    return "\n".join(f"{key} = {value}" for key, value in _flatten(config)) + "\n"
