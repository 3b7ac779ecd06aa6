"""Canonical run configuration.

Every tunable of every module appears under a section key
(``scenario.*``, ``stft.*``, ``mel.*``, ``features.*``, ``agc.*``,
``net.*``, ``train.*``).  Any key can be overridden with ``--set
section.key=value``; unknown keys are rejected.  The fully resolved config
is echoed as ``config.json`` into every output directory, and re-running a
command from that file reproduces the run.
"""

from __future__ import annotations

import copy
import json
import os

from .agc import AgcParams
from .errors import UsageError
from .features import MelConfig, StftConfig
from .learn import Hyper
from .net import NetConfig
from .synthgen import DEFAULT_TONES_HZ, Scenario

AGC_MODES = ("features", "waveform", "off")

DEFAULTS = {
    "deterministic": False,
    "scenario": {
        "duration_min": 75,
        "tones_hz": list(DEFAULT_TONES_HZ),
        "source_speed_mps": None,
        "range_start_km": 9.0,
        "range_end_km": 1.0,
        "interferer_tones_hz": None,
        "interferer_level_db": 0.0,
        "snr_db": 15.0,
        "channels": 3,
        "seed": 0,
        "sample_rate_hz": 1500.0,
        "delay_spread": 7.0,
        "phase_jitter_rad": 0.25,
    },
    "stft": {"window_len": 40, "hop": 20},
    "mel": {"n_mels": 64, "f_min": 0.0, "f_max": None, "log_floor": 1e-10},
    "features": {"lags": 64},
    "agc": {"e_target": 1.0, "alpha": 0.2, "apply_to": "features"},
    "net": {
        "conv_blocks": 3,
        "base_filters": 12,
        "dropout_p": 0.2,
        "conformer_blocks": 2,
        "model_dim": 64,
        "attn_heads": 4,
        "ff_expansion": 4,
        "conv_kernel_temporal": 7,
        "head_hidden": 128,
        "residual_scale_init": 0.5,
        "share_centers": True,
        "with_gcc_branch": True,
        "seed": 0,
    },
    "train": {
        "batch_size": 32,
        "lr": 1e-4,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "epochs": 15,
        "seed": 0,
        "shuffle": True,
        "val_fold": 4,
        "test_fold": 5,
    },
}

# keys whose default is None still need a parse rule for --set
_NONE_KEY_PARSERS = {
    ("scenario", "source_speed_mps"): "float_or_none",
    ("scenario", "interferer_tones_hz"): "floats_or_none",
    ("mel", "f_max"): "float_or_none",
}


def _parse_like(section: str, key: str, default, raw: str):
    raw = raw.strip()
    kind = _NONE_KEY_PARSERS.get((section, key))
    if kind == "float_or_none":
        return None if raw.lower() in ("none", "") else float(raw)
    if kind == "floats_or_none":
        return None if raw.lower() in ("none", "") else [float(v) for v in raw.split(",") if v]
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean {section}.{key}={raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)  # accepts inf/-inf/nan spellings
    if isinstance(default, list):
        return [float(v) for v in raw.split(",") if v]
    return raw


class RunConfig:
    def __init__(self, data: dict | None = None):
        self.data = copy.deepcopy(DEFAULTS) if data is None else data

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        with open(path) as fh:
            loaded = json.load(fh)
        cfg = cls()
        for section, value in loaded.items():
            if section not in cfg.data:
                raise UsageError(f"unknown config section {section!r}")
            if isinstance(cfg.data[section], dict):
                for key, val in value.items():
                    if key not in cfg.data[section]:
                        raise UsageError(f"unknown config key {section}.{key}")
                    cfg.data[section][key] = val
            else:
                cfg.data[section] = value
        return cfg

    def apply_set(self, assignment: str) -> None:
        if "=" not in assignment:
            raise UsageError(f"--set expects section.key=value, got {assignment!r}")
        key_path, raw = assignment.split("=", 1)
        parts = key_path.strip().split(".")
        if len(parts) == 1 and parts[0] == "deterministic":
            self.data["deterministic"] = _parse_like("", "deterministic", False, raw)
            return
        if len(parts) != 2:
            raise UsageError(f"--set expects section.key=value, got {assignment!r}")
        section, key = parts
        if section not in self.data or not isinstance(self.data[section], dict):
            raise UsageError(f"unknown config section {section!r}")
        if key not in self.data[section]:
            raise UsageError(f"unknown config key {section}.{key}")
        self.data[section][key] = _parse_like(section, key, DEFAULTS[section][key], raw)

    def set_seed(self, seed: int) -> None:
        self.data["scenario"]["seed"] = seed
        self.data["net"]["seed"] = seed
        self.data["train"]["seed"] = seed

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def write(self, out_dir: str, name: str = "config.json") -> str:
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")
        return path

    # -- section views --------------------------------------------------------

    def scenario(self) -> Scenario:
        s = self.data["scenario"]
        return Scenario(
            duration_min=s["duration_min"],
            tones_hz=tuple(s["tones_hz"]),
            source_speed_mps=s["source_speed_mps"],
            range_start_km=s["range_start_km"],
            range_end_km=s["range_end_km"],
            interferer_tones_hz=None if s["interferer_tones_hz"] is None else tuple(s["interferer_tones_hz"]),
            interferer_level_db=s["interferer_level_db"],
            snr_db=float(s["snr_db"]),
            channels=s["channels"],
            seed=s["seed"],
            sample_rate_hz=s["sample_rate_hz"],
            delay_spread=s["delay_spread"],
            phase_jitter_rad=s["phase_jitter_rad"],
        )

    def stft_cfg(self) -> StftConfig:
        return StftConfig(**self.data["stft"])

    def mel_cfg(self) -> MelConfig:
        return MelConfig(**self.data["mel"])

    def lags(self) -> int:
        return self.data["features"]["lags"]

    def agc_mode(self) -> str:
        mode = self.data["agc"]["apply_to"]
        if mode not in AGC_MODES:
            raise UsageError(f"agc.apply_to must be one of {AGC_MODES}, got {mode!r}")
        return mode

    def agc_params(self) -> AgcParams | None:
        """Parameters when the layer is enabled, else None (bypass)."""
        if self.agc_mode() == "off":
            return None
        return AgcParams(e_target=self.data["agc"]["e_target"], alpha=self.data["agc"]["alpha"])

    def feature_agc(self) -> AgcParams | None:
        return self.agc_params() if self.agc_mode() == "features" else None

    def waveform_agc(self) -> AgcParams | None:
        return self.agc_params() if self.agc_mode() == "waveform" else None

    def net_cfg(self, feature_set) -> NetConfig:
        lm_shape, gcc_shape = feature_set.shapes
        n = self.data["net"]
        return NetConfig(
            in_channels=lm_shape[0],
            in_pairs=gcc_shape[0],
            frames=lm_shape[1],
            mel_bins=lm_shape[2],
            lag_bins=gcc_shape[2],
            **n,
        )

    def hyper(self) -> Hyper:
        t = self.data["train"]
        return Hyper(
            batch_size=t["batch_size"],
            lr=t["lr"],
            adam_beta1=t["adam_beta1"],
            adam_beta2=t["adam_beta2"],
            adam_eps=t["adam_eps"],
            epochs=t["epochs"],
            seed=t["seed"],
            shuffle=t["shuffle"],
        )

    def folds(self) -> tuple[int, int]:
        return self.data["train"]["val_fold"], self.data["train"]["test_fold"]

    def deterministic(self) -> bool:
        return bool(self.data["deterministic"])


def merge_cli_config(config_path: str | None, sets: list[str], seed: int | None, deterministic: bool) -> RunConfig:
    cfg = RunConfig.from_file(config_path) if config_path else RunConfig()
    for assignment in sets or []:
        cfg.apply_set(assignment)
    if seed is not None:
        cfg.set_seed(seed)
    if deterministic:
        cfg.data["deterministic"] = True
    # a config file may carry snr_db as the string "inf"
    snr = cfg.data["scenario"]["snr_db"]
    if isinstance(snr, str):
        cfg.data["scenario"]["snr_db"] = float(snr)
    return cfg
