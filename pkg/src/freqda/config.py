"""Declarative experiment configuration.

One flat key-value document per experiment: ``section.key = value`` lines,
``#`` comments, unknown keys rejected. CLI flags override file values. The
resolved document is archived next to every command's outputs so any artifact
can be reproduced from (config, seed) alone.

Interval lengths are configured in epochs and converted to iterations via the
steps-per-epoch of the larger domain; both units are reported when a run
starts.
"""

import dataclasses
import os
from dataclasses import dataclass, field

from .data import (
    BASE_KINDS,
    DISTORTION_FAMILIES,
    DistortionSpec,
    concat_domains,
    generate_band_signal_domain,
    generate_domain,
    ingest_directory,
    steps_per_epoch,
)
from .model import ModelConfig
from .scheduler import SchedulerConfig
from .spectral import num_bands
from .training import TrainingConfig

OUTPUT_ROOT_ENV = "FREQDA_OUTPUT_ROOT"


@dataclass
class DomainSection:
    kind: str = "synthetic"            # synthetic | band-signal | directory
    families: str = "gaussian-blur"    # comma-separated mixture for synthetic
    base: str = "mixed"
    count: int = 240
    seed: int = 0
    size: int = 64
    levels: int = 5
    signal_row: int = 2                # band-signal cell
    signal_col: int = 3
    background: str = "noise"
    images: str = ""                   # directory kind
    scores_csv: str = ""
    score_min: float = 0.0
    score_max: float = 100.0
    higher_is_better: bool = True


@dataclass
class ModelSection:
    channels: int = 64
    blocks: int = 4
    crop_size: int = 64
    grid: int = 8
    hidden: int = 128
    disc_hidden: int = 128
    n_bins: int = 5
    regression_head: str = "distribution"
    grl_lambda: float = 1.0
    grl_ramp_iters: int = 0


@dataclass
class ScheduleSection:
    m: int = 10
    k: int = 3
    trajectory: str = "left-to-right"
    metric: str = "mmd"
    selection: str = "argmax"
    n_bands: int = 0                   # 0 = traverse all H*W - m + 1 bands
    interval_epochs: float = 0.6
    warmup_epochs: float = 10.0
    finetune_epochs: float = 17.0


@dataclass
class TrainSection:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    w_src: float = 1.0
    w_adv: float = 1.0
    w_target: float = 0.0
    regression_loss: str = "mse"
    target_loss: str = "entropy"


@dataclass
class SweepSection:
    channels: int = 16
    blocks: int = 4
    pretrain_iters: int = 0
    shared_extractor: bool = True
    per_cell_iters: int = 150
    seeds: str = "0,1,2"


@dataclass
class AblateSection:
    windows: str = "1,5,10,15"
    intervals: str = "0.2,0.6,1.0"     # epochs per movement interval
    band_counts: str = "11,31,55"


def _default_target():
    return DomainSection(families="additive-noise", seed=1)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = "experiment"
    source: DomainSection = field(default_factory=lambda: DomainSection(
        families="gaussian-blur,block-average"))
    target: DomainSection = field(default_factory=_default_target)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    # --- document mapping ----------------------------------------------------

    @classmethod
    def from_mapping(cls, mapping):
        cfg = cls()
        for dotted, raw in mapping.items():
            target, leaf, typ = cfg._locate(dotted)
            setattr(target, leaf, _coerce(raw, typ, dotted))
        return cfg

    def _locate(self, dotted):
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(getattr(obj, part, None)):
                raise KeyError(f"unknown config section {dotted!r}")
            obj = getattr(obj, part)
        leaf = parts[-1]
        fields = {f.name: f.type for f in dataclasses.fields(obj)}
        if leaf not in fields or dataclasses.is_dataclass(getattr(obj, leaf)):
            raise KeyError(f"unknown config key {dotted!r}")
        return obj, leaf, type(getattr(obj, leaf))

    def to_text(self):
        lines = []

        def emit(obj, prefix):
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                key = f"{prefix}{f.name}"
                if dataclasses.is_dataclass(value):
                    emit(value, key + ".")
                else:
                    lines.append(f"{key} = {value}")

        emit(self, "")
        return "\n".join(lines) + "\n"

    # --- construction of the runtime configs ----------------------------------

    def build_domain(self, section, role):
        if section.kind == "synthetic":
            families = [f.strip() for f in section.families.split(",") if f.strip()]
            if not families:
                raise ValueError(f"{role}: no distortion families configured")
            for fam in families:
                if fam not in DISTORTION_FAMILIES:
                    raise ValueError(f"{role}: unknown distortion family {fam!r}")
            if section.base not in BASE_KINDS:
                raise ValueError(f"{role}: unknown base kind {section.base!r}")
            counts = [section.count // len(families)] * len(families)
            counts[0] += section.count - sum(counts)
            parts = [
                generate_domain(section.seed + i, section.base,
                                DistortionSpec.default(fam, section.levels),
                                counts[i], size=section.size, role=role)
                for i, fam in enumerate(families)
            ]
            return parts[0] if len(parts) == 1 else concat_domains(*parts)
        if section.kind == "band-signal":
            return generate_band_signal_domain(
                section.seed, (section.signal_row, section.signal_col), section.count,
                size=section.size, grid=self.model.grid, n_levels=section.levels,
                background=section.background, role=role,
            )
        if section.kind == "directory":
            return ingest_directory(
                section.images, section.scores_csv, section.score_min,
                section.score_max, section.higher_is_better,
                size=section.size, role=role,
            )
        raise ValueError(f"{role}: unknown dataset kind {section.kind!r}")

    def build_model_config(self):
        m = self.model
        return ModelConfig(
            channels=m.channels, blocks=m.blocks, crop_size=m.crop_size,
            grid_h=m.grid, grid_w=m.grid, m=self.schedule.m,
            hidden=m.hidden, disc_hidden=m.disc_hidden, n_bins=m.n_bins,
            regression_head=m.regression_head, grl_lambda=m.grl_lambda,
            grl_ramp_iters=m.grl_ramp_iters,
        )

    def build_scheduler_config(self, source, target):
        s = self.schedule
        spe = steps_per_epoch(source, target, self.train.batch_size)
        T = max(1, round(s.interval_epochs * spe))
        T_w = max(1, round(s.warmup_epochs * spe))
        nb = s.n_bands or num_bands(self.model.grid, self.model.grid, s.m)
        T_m = T_w + nb * T
        T_a = T_m + max(0, round(s.finetune_epochs * spe))
        return SchedulerConfig(
            T=T, T_w=T_w, T_m=T_m, T_a=T_a, m=s.m, k=s.k,
            grid_h=self.model.grid, grid_w=self.model.grid,
            trajectory=s.trajectory, metric=s.metric, selection=s.selection,
            n_bands=nb,
        ), spe

    def build_training_config(self):
        t = self.train
        return TrainingConfig(
            lr=t.lr, weight_decay=t.weight_decay, batch_size=t.batch_size,
            w_src=t.w_src, w_adv=t.w_adv, w_target=t.w_target,
            regression_loss=t.regression_loss, target_loss=t.target_loss,
            seed=self.seed,
        )


def _coerce(raw, typ, dotted):
    raw = str(raw).strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {dotted!r}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config_text(text, path="<config>"):
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in mapping:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return mapping


def load_config(path=None, overrides=()):
    mapping = {}
    if path is not None:
        with open(path) as f:
            mapping = parse_config_text(f.read(), path)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    return ExperimentConfig.from_mapping(mapping)


def resolve_output_dir(config, explicit=None):
    if explicit:
        return explicit
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return os.path.join(root, config.output)


def archive_config(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.cfg")
    with open(path, "w") as f:
        f.write(config.to_text())
    return path
