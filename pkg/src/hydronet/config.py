"""INI run configuration: strict schema, typed coercion, desk-scale defaults.

Runs are driven by an archivable key/value document with sections
[seed], [oracle], [architecture], [training], [hpo], [longterm] and
[paths].  Unknown sections or keys are rejected.  Every module seed is
fanned out from the single root seed through fixed derivation indices.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .loading import DESK_RANGES, ParamRanges, TankGeometry
from .models import ArchitectureConfig
from .oracle import OracleConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, missing path)."""


# section -> key -> (type, default)
SCHEMA = {
    "seed": {
        "value": (int, 42),
    },
    "oracle": {
        "cases": (int, 48),
        "classes": (int, 3),
        "times": (int, 60),
        "points": (int, 512),
        "duration_s": (float, 3600.0),
        "ode_step_s": (float, 1.0),
        "kappa_max": (float, 8.0),
        "radius": (float, 0.605),
        "depth": (float, 1.21),
        "jet_height": (float, 0.9),
        "jet_radius": (float, 0.12),
        "jet_decay_length": (float, 0.6),
        "pipe_area": (float, 0.0177),
        "circulation_fraction": (float, 0.05),
        # event-parameter sampling bounds; the desk preset restricts k and
        # theta so sampled storms rise and fall within the simulated hour
        "lam_min": (float, DESK_RANGES.lam[0]),
        "lam_max": (float, DESK_RANGES.lam[1]),
        "k_min": (float, DESK_RANGES.k[0]),
        "k_max": (float, DESK_RANGES.k[1]),
        "theta_min": (float, DESK_RANGES.theta[0]),
        "theta_max": (float, DESK_RANGES.theta[1]),
        "c0_min": (float, DESK_RANGES.c0[0]),
        "c0_max": (float, DESK_RANGES.c0[1]),
        "kd_min": (float, DESK_RANGES.kd[0]),
        "kd_max": (float, DESK_RANGES.kd[1]),
    },
    "architecture": {
        "kind": (str, "cpnn"),
        "encoder_layers": (int, 2),
        "decoder_layers": (int, 5),
        "hidden": (int, 64),
        "activation": (str, "tanh"),
        "merge": (str, "hadamard"),
        "output_mode": (str, "separate"),
    },
    "training": {
        "target": (str, "velocity"),
        "iterations": (int, 8000),
        "batch_cases": (int, 16),
        "batch_classes": (int, 0),
        "batch_times": (int, 8),
        "batch_points": (int, 6),
        "lr": (float, 2e-3),
        "decay": (float, 0.984),
        "decay_interval": (int, 100),
        "val_interval": (int, 250),
    },
    "hpo": {
        "trials": (int, 20),
        "iterations": (int, 1000),
        "target": (str, "concentration"),
        "startup_trials": (int, 10),
        "lr_min": (float, 5e-4),
        "lr_max": (float, 8e-3),
        "decay_min": (float, 0.95),
        "decay_max": (float, 0.999),
        "hidden_min": (int, 32),
        "hidden_max": (int, 96),
        "encoder_layers_min": (int, 1),
        "encoder_layers_max": (int, 3),
        "decoder_layers_min": (int, 2),
        "decoder_layers_max": (int, 7),
        # batch bounds are kept small enough that the worst-case batch
        # tensor (cases * classes * times * points * hidden) stays desk-sized
        "batch_cases_min": (int, 8),
        "batch_cases_max": (int, 24),
        "batch_times_min": (int, 4),
        "batch_times_max": (int, 16),
        "batch_points_min": (int, 4),
        "batch_points_max": (int, 16),
    },
    "longterm": {
        "q_on": (float, 0.02),
        "q_off": (float, 0.01),
        "min_gap_min": (float, 30.0),
        "predictor": (str, "oracle"),
    },
    "paths": {
        "dataset": (str, "out/dataset.swds"),
        "out_dir": (str, "out"),
        "checkpoint": (str, ""),
        "record": (str, ""),
    },
}


@dataclass
class RunConfig:
    seed: int
    oracle: dict
    architecture: dict
    training: dict
    hpo: dict
    longterm: dict
    paths: dict

    def geometry(self) -> TankGeometry:
        o = self.oracle
        try:
            return TankGeometry(radius=o["radius"], depth=o["depth"],
                                jet_height=o["jet_height"], jet_radius=o["jet_radius"],
                                jet_decay_length=o["jet_decay_length"],
                                pipe_area=o["pipe_area"],
                                circulation_fraction=o["circulation_fraction"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def ranges(self) -> ParamRanges:
        o = self.oracle
        try:
            return ParamRanges(lam=(o["lam_min"], o["lam_max"]), k=(o["k_min"], o["k_max"]),
                               theta=(o["theta_min"], o["theta_max"]),
                               c0=(o["c0_min"], o["c0_max"]), kd=(o["kd_min"], o["kd_max"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def oracle_config(self) -> OracleConfig:
        o = self.oracle
        try:
            return OracleConfig(n_cases=o["cases"], n_classes=o["classes"],
                                n_times=o["times"], n_points=o["points"],
                                duration_s=o["duration_s"], ode_step_s=o["ode_step_s"],
                                kappa_max=o["kappa_max"], seed=derive_seed(self.seed, 0),
                                geometry=self.geometry(), ranges=self.ranges())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def architecture_config(self, kind: str | None = None) -> ArchitectureConfig:
        a = dict(self.architecture)
        if kind is not None:
            a["kind"] = kind
        if a["kind"] in ("mionet", "deeponet"):
            a["decoder_layers"] = 0
        try:
            return ArchitectureConfig(**a)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, target: str | None = None, **overrides) -> TrainConfig:
        t = dict(self.training)
        if target is not None:
            t["target"] = target
        t.update(overrides)
        t.setdefault("seed", derive_seed(self.seed, 1))
        try:
            return TrainConfig(**t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def derive_seed(root: int, index: int) -> int:
    """Fixed fan-out of the single root seed to per-subsystem seeds."""
    return (int(root) * 1_000_003 + index) % 2**63


def default_config() -> RunConfig:
    sections = {name: {k: default for k, (_, default) in keys.items()}
                for name, keys in SCHEMA.items()}
    return RunConfig(seed=sections["seed"]["value"],
                     oracle=sections["oracle"], architecture=sections["architecture"],
                     training=sections["training"], hpo=sections["hpo"],
                     longterm=sections["longterm"], paths=sections["paths"])


def load_config(path=None) -> RunConfig:
    """Parse and validate an INI run configuration; None yields pure defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError:
        raise
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key '{key}' in section [{section}]")
            typ, _ = SCHEMA[section][key]
            try:
                value = typ(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"config key [{section}] {key} = {raw!r} is not a valid {typ.__name__}"
                ) from exc
            if section == "seed":
                cfg.seed = value
            else:
                getattr(cfg, section)[key] = value
    return cfg


def write_default_config(path) -> None:
    parser = configparser.ConfigParser()
    for section, keys in SCHEMA.items():
        parser[section] = {k: str(default) for k, (_, default) in keys.items()}
    with open(path, "w") as f:
        parser.write(f)
