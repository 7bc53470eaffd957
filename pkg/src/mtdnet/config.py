"""Run configuration: INI-style ``key = value`` sections with ``--set`` overrides.

Sections and their keys are listed in ``DEFAULTS``; ``[variant.<name>]``
sections may override any ``[network]`` key for leave-one-subject-out
comparisons. Every key has a default, so an empty file is a valid config.
"""
from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Iterable

from .data import SyntheticSpec
from .errors import ConfigurationError
from .network import NetworkSpec, make_network_spec
from .optim import SgdConfig

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {
        "seed": "0",
        "dataset": "data",
        "out": "out",
        "clip_stride": "8",
        "checkpoint_every": "10",
        "eval_batch": "64",
    },
    "synth": {
        "subjects": "25",
        "videos_per_subject": "8",
        "frames_per_video": "200",
        "spatial": "16, 16",
        "timescale_mix": "0.3333333333333333, 0.3333333333333333, 0.3333333333333334",
        "noise_std": "0.05",
    },
    "network": {
        "module_count": "2",
        "branch_depths": "1, 3, 5",
        "branch_channels": "",
        "module_width": "18",
        "fixed_channels": "8",
        "fixed_depth": "3",
        "spatial_kernel": "3, 3",
        "pool_kernel": "3, 3, 3",
        "pool_padding": "1, 1, 1",
        "downsample_stride": "1, 2, 2",
        "input_temporal_depth": "32",
        "input_spatial": "16, 16",
        "input_channels": "1",
        "fc_hidden": "128",
        "temporal_mode": "same",
    },
    "optim": {
        "lr0": "0.01",
        "momentum": "0.9",
        "weight_decay": "0.0001",
        "batch_size": "64",
        "max_epochs": "150",
        "lr_drop_factor": "0.1",
        "lr_drop_every": "10",
        "decay_biases": "true",
        "output_bias": "mean",
    },
    "loso": {
        "variants": "multi, fixed",
    },
    "variant.multi": {"branch_depths": "1, 3, 5", "branch_channels": "4, 4, 4"},
    "variant.fixed": {"branch_depths": "3, 3, 3", "branch_channels": "4, 4, 4"},
}


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(a) for a in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(a) for a in s.replace(",", " ").split())


class RunConfig:
    def __init__(self, parser: configparser.ConfigParser):
        self.cp = parser

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(DEFAULTS)
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise FileNotFoundError(f"config file {path} not found")
            try:
                cp.read_string(path.read_text(), source=str(path))
            except configparser.Error as exc:
                raise ConfigurationError(str(exc)) from exc
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, option = key.strip().rpartition(".")
            if not sep or not dot or not section:
                raise ConfigurationError(f"override {item!r} is not section.key=value")
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, option, value.strip())
        cfg = cls(cp)
        cfg.check_keys()
        return cfg

    def check_keys(self) -> None:
        for section in self.cp.sections():
            if section.startswith("variant."):
                allowed = DEFAULTS["network"]
            elif section in DEFAULTS:
                allowed = DEFAULTS[section]
            else:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key in self.cp[section]:
                if key not in allowed:
                    raise ConfigurationError(f"unknown key {key!r} in [{section}]")

    def to_text(self) -> str:
        buf = io.StringIO()
        self.cp.write(buf)
        return buf.getvalue()

    def get(self, section: str, key: str) -> str:
        return self.cp.get(section, key)

    # -- typed views -------------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.cp.getint("run", "seed")

    @property
    def clip_stride(self) -> int:
        return self.cp.getint("run", "clip_stride")

    def _typed(self, what, fn):
        try:
            return fn()
        except ValueError as exc:
            raise ConfigurationError(f"bad {what} configuration: {exc}") from exc

    def network_spec(self, variant: str | None = None) -> NetworkSpec:
        sec = dict(self.cp["network"])
        if variant is not None:
            name = f"variant.{variant}"
            if not self.cp.has_section(name):
                raise ConfigurationError(f"variant {variant!r} has no [{name}] section")
            sec.update(self.cp[name])

        def build():
            channels = sec["branch_channels"].strip()
            return make_network_spec(
                module_count=int(sec["module_count"]),
                branch_depths=_ints(sec["branch_depths"]),
                branch_channels=_ints(channels) if channels else None,
                module_width=int(sec["module_width"]),
                fixed_channels=int(sec["fixed_channels"]),
                fixed_depth=int(sec["fixed_depth"]),
                spatial_kernel=_ints(sec["spatial_kernel"]),
                pool_kernel=_ints(sec["pool_kernel"]),
                pool_padding=_ints(sec["pool_padding"]),
                downsample_stride=_ints(sec["downsample_stride"]),
                input_temporal_depth=int(sec["input_temporal_depth"]),
                input_spatial=_ints(sec["input_spatial"]),
                input_channels=int(sec["input_channels"]),
                fc_hidden=int(sec["fc_hidden"]),
                temporal_mode=sec["temporal_mode"].strip(),
                init_seed=self.seed,
            )

        return self._typed("network", build)

    def sgd_config(self) -> SgdConfig:
        s = self.cp["optim"]
        return self._typed("optim", lambda: SgdConfig(
            lr0=s.getfloat("lr0"), momentum=s.getfloat("momentum"),
            weight_decay=s.getfloat("weight_decay"), batch_size=s.getint("batch_size"),
            max_epochs=s.getint("max_epochs"), lr_drop_factor=s.getfloat("lr_drop_factor"),
            lr_drop_every=s.getint("lr_drop_every"), decay_biases=s.getboolean("decay_biases"),
            output_bias=s["output_bias"].strip()))

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.cp["synth"]
        return self._typed("synth", lambda: SyntheticSpec(
            subjects=s.getint("subjects"), videos_per_subject=s.getint("videos_per_subject"),
            frames_per_video=s.getint("frames_per_video"), spatial=_ints(s["spatial"]),
            timescale_mix=_floats(s["timescale_mix"]), noise_std=s.getfloat("noise_std"),
            seed=self.seed))

    @property
    def variants(self) -> list[str]:
        return [v.strip() for v in self.cp.get("loso", "variants").split(",") if v.strip()]
