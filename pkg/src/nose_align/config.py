"""TOML run configuration with a strict key schema.

Unknown keys are rejected so typos fail loudly; command-line flags override
file values after parsing. The schema below is the single source of truth
and is what the CLI help text and tests check against.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import DataFormatError

# section -> key -> (type, default); bool is checked before int (bool is an int
# subclass in Python)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "": {
        "seed": (int, 42),
        "out_dir": (str, "runs/out"),
    },
    "world": {
        "n_clusters": (int, 8),
        "n_molecules": (int, 256),
        "n_receptors": (int, 32),
        "n_descriptors": (int, 64),
        "dim": (int, 64),
        "noise_sigma": (float, 0.1),
        "bridge_fraction": (float, 0.25),
        "pairs_per_molecule": (int, 2),
        "receptors_per_molecule": (int, 2),
        "subgroups_per_cluster": (int, 2),
        "subgroup_fidelity": (float, 0.7),
        "lexicon_degree": (int, 6),
    },
    "data": {
        "mol_manifest": (str, ""),
        "rec_manifest": (str, ""),
        "desc_manifest": (str, ""),
        "desc_pairs": (str, ""),
        "rec_pairs": (str, ""),
        "lexicon": (str, ""),
        "descriptor_sets": (str, ""),
        "desc_groups": (str, ""),
        "split": (list, [0.8, 0.1, 0.1]),
        "split_by_molecule": (bool, False),
    },
    "train": {
        "base_lr": (float, 1e-4),
        "warmup_epochs": (int, 20),
        "tau": (float, 0.07),
        "lambda_desc": (float, 2.0),
        "lambda_rec": (float, 1.0),
        "lambda_orth": (float, 2.0),
        "desc_batch": (int, 64),
        "rec_batch": (int, 16),
        "patience": (int, 10),
        "max_epochs": (int, 100),
        "use_weak": (bool, True),
        "use_intra": (bool, True),
        "ortho_mode": (str, "hard+soft"),
        "ortho_eps": (float, 1e-8),
        "pair_mode": (str, "unordered"),
        "weak_weight": (float, 0.5),
        "desc_depth": (int, 12),
        "desc_expansion": (int, 4),
        "rec_bottleneck": (int, 0),
        "dropout_rate": (float, 0.5),
        "head_hidden": (int, 0),
    },
    "probe": {
        "task_file": (str, ""),
        "task_kind": (str, "regression"),
        "input_mode": (str, "gated"),
        "lr": (float, 1e-2),
        "weight_decay": (float, 0.01),
        "max_steps": (int, 500),
        "patience": (int, 50),
        "val_fraction": (float, 0.2),
        "metric": (str, "r2"),
        "data_fraction": (float, 1.0),
        "hidden_depth": (int, 0),
    },
    "eval": {
        "n_pairs": (int, 20000),
        "bin_width": (float, 0.1),
        "neighborhood_k": (list, [1, 5, 10, 20, 50]),
        "split": (str, "test"),
    },
}


@dataclass
class RunConfig:
    """Parsed configuration: sections as plain dicts with defaults filled."""

    seed: int = 42
    out_dir: str = "runs/out"
    world: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def resolve_path(self, base: Path, key: str) -> Path:
        """Resolve a [data] path relative to the config file's directory."""
        raw = self.data.get(key, "")
        if not raw:
            raise DataFormatError(f"config is missing data.{key}")
        p = Path(raw)
        return p if p.is_absolute() else base / p


def _check_type(section: str, key: str, value, expected: type):
    where = f"{section}.{key}" if section else key
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise DataFormatError(f"config key {where}: expected int, got bool")
    if not isinstance(value, expected):
        raise DataFormatError(
            f"config key {where}: expected {expected.__name__}, "
            f"got {type(value).__name__}")
    return value


def load_config(path=None) -> RunConfig:
    """Parse and validate a TOML config; path=None yields pure defaults."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataFormatError(f"missing config file {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise DataFormatError(f"unreadable config {path}: {e}") from e
    cfg = RunConfig()
    for key, value in raw.items():
        if key in SCHEMA[""]:
            expected, _ = SCHEMA[""][key]
            setattr(cfg, key, _check_type("", key, value, expected))
        elif key in SCHEMA:
            if not isinstance(value, dict):
                raise DataFormatError(f"config section [{key}] must be a table")
            section = {}
            for k, v in value.items():
                if k not in SCHEMA[key]:
                    raise DataFormatError(f"unknown config key {key}.{k}")
                expected, _ = SCHEMA[key][k]
                section[k] = _check_type(key, k, v, expected)
            setattr(cfg, key, section)
        else:
            raise DataFormatError(f"unknown config key {key}")
    for section, keys in SCHEMA.items():
        if not section:
            continue
        filled = getattr(cfg, section)
        for k, (_, default) in keys.items():
            filled.setdefault(k, default)
    return cfg
