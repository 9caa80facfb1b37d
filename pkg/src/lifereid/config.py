"""Run configuration: one INI file drives generation, training, and losses.

Sections and keys map one-to-one onto the config dataclasses; unknown
sections or keys are rejected by name so typos cannot silently fall back to
defaults.  ``--mode`` presets (proposed / finetune / joint) override the
``[ablation]`` section; ``--seed`` overrides ``[run] seed``.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, replace

from .errors import ConfigError
from .losses import LossWeights
from .synth import GenConfig
from .trainer import AblationFlags, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig
    train: TrainConfig
    weights: LossWeights
    flags: AblationFlags
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def validate(self) -> None:
        self.gen.validate()
        self.train.validate()
        self.weights.validate()
        self.flags.validate()
        if not self.seeds:
            raise ConfigError("[run] seeds must list at least one seed")


_SCHEMA = {
    "data": {
        "n_tasks": int, "n_train_ids": int, "n_eval_ids": int, "imgs_per_id": int,
        "n_cameras": int, "noise_sigma": float, "domain_shift": float,
        "domain_offset": float, "camera_jitter": float, "stripe_amp": float,
        "seed": int,
    },
    "train": {
        "epochs_per_task": int, "lr": float, "momentum": float, "p_ids": int,
        "k_instances": int, "replay_batch": int, "replay_id_cap": int,
        "replay_imgs_per_id": int,
    },
    "loss": {
        "lambda_ce": float, "lambda_tri": float, "lambda_cmcl": float,
        "lambda_pcl": float, "margin": float, "tau": float, "n_parts": int,
    },
    "ablation": {
        "cmcl": bool, "pcl": bool, "cac": str, "cmcl_normalize": bool,
    },
    "run": {
        "seed": int, "seeds": "int_list",
    },
}

_BOOL_VALUES = {"on": True, "true": True, "yes": True, "1": True,
                "off": False, "false": False, "no": False, "0": False}


def _convert(section: str, key: str, value: str, kind):
    try:
        if kind is bool:
            lowered = value.strip().lower()
            if lowered not in _BOOL_VALUES:
                raise ValueError(f"not a boolean: {value!r}")
            return _BOOL_VALUES[lowered]
        if kind == "int_list":
            return tuple(int(v) for v in value.split())
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def parse_config(path: str) -> RunConfig:
    """Parse and validate an INI run configuration; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"config {path!r} does not parse: {exc}") from exc

    values: dict[str, dict] = {name: {} for name in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            values[section][key] = _convert(section, key, raw, _SCHEMA[section][key])

    run_extra = values.pop("run")
    seed = run_extra.get("seed", 0)
    seeds = run_extra.get("seeds", (0, 1, 2, 3, 4))
    try:
        cfg = RunConfig(
            gen=GenConfig(**values["data"]),
            train=TrainConfig(seed=seed, **values["train"]),
            weights=LossWeights(**values["loss"]),
            flags=AblationFlags(**values["ablation"]),
            seeds=tuple(seeds),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


MODE_FLAGS = {
    "proposed": AblationFlags(cmcl=True, pcl=True, cac="multiply"),
    "finetune": AblationFlags(cmcl=False, pcl=False, cac="off"),
    "joint": AblationFlags(cmcl=False, pcl=False, cac="off"),
}


def apply_mode(cfg: RunConfig, mode: str) -> RunConfig:
    """Resolve a mode name to concrete ablation flags ('ablation' keeps the file's)."""
    if mode == "ablation":
        return cfg
    if mode not in MODE_FLAGS:
        raise ConfigError(f"unknown mode {mode!r}")
    return replace(cfg, flags=MODE_FLAGS[mode])


def apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return replace(cfg, train=replace(cfg.train, seed=int(seed)))


def dump_run_metadata(cfg: RunConfig, mode: str, data_dir: str) -> str:
    """JSON echo of everything that determines a run, for the run directory."""
    payload = {
        "mode": mode,
        "data_dir": data_dir,
        "gen": asdict(cfg.gen),
        "train": asdict(cfg.train),
        "loss": asdict(cfg.weights),
        "ablation": asdict(cfg.flags),
        "seeds": list(cfg.seeds),
    }
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def load_run_metadata(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read run metadata: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"run metadata is not valid JSON: {exc}") from exc
