"""Flat key=value experiment configs.

One key per line, ``key = value``; blank lines and '#' comments ignored.
Unknown keys are rejected so typos fail before a run starts.
"""

from __future__ import annotations

from typing import Dict, List

from . import losses

# key -> (type, default)
_bool = lambda s: str(s).strip().lower() in ("1", "true", "yes", "on")


def _int_list(s) -> tuple:
    s = str(s).strip()
    if not s:
        return ()
    return tuple(int(x) for x in s.split(","))


KNOWN_KEYS = {
    # training
    "loss_kind": (str, "log_softmax"),
    "initial_lr": (float, 0.1),
    "momentum": (float, 0.9),
    "batch_size": (int, 200),
    "patience": (int, 5),
    "lr_decay_factor": (float, 0.5),
    "max_epochs": (int, 50),
    "seed": (int, 0),
    "eps": (float, losses.DEFAULT_EPS),
    "xi": (float, 1.0),
    "output_layer": (str, "dense"),
    "prior_bias_init": (_bool, False),
    # model
    "hidden_dims": (_int_list, (500, 500)),
    # dataset
    "dataset": (str, "synthetic"),  # "synthetic" | "mnist"
    "mnist_train_images": (str, ""),
    "mnist_train_labels": (str, ""),
    "mnist_test_images": (str, ""),
    "mnist_test_labels": (str, ""),
    "split": (str, "official"),  # "official" | "random"
    "train_n": (int, 50000),
    "valid_n": (int, 10000),
    "test_n": (int, 10000),
    "split_seed": (int, 0),
    "synth_D": (int, 100),
    "synth_input_dim": (int, 20),
    "synth_N": (int, 20000),
    "synth_zipf": (float, 1.0),
    "synth_separation": (float, 2.0),
    "synth_seed": (int, 0),
}


class ConfigError(ValueError):
    pass


def default_config() -> Dict[str, object]:
    return {k: default for k, (_, default) in KNOWN_KEYS.items()}


def apply_setting(cfg: Dict[str, object], key: str, raw: str):
    if key not in KNOWN_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    conv, _ = KNOWN_KEYS[key]
    try:
        cfg[key] = conv(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from None


def load_config(path: str) -> Dict[str, object]:
    cfg = default_config()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            apply_setting(cfg, key, raw)
    return cfg


def dump_config(cfg: Dict[str, object]) -> str:
    lines = []
    for k in KNOWN_KEYS:
        v = cfg[k]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
