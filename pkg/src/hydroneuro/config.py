"""Experiment configuration: TOML in, validated and fully resolved dictionaries out."""

from __future__ import annotations

import copy
import itertools
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .auxcouple import PartitionSpec, partition_errors
from .model import (
    DENSITY_PRESETS,
    KERNEL_PRESETS,
    RATE_PRESETS,
    ModelSpec,
    build_model,
    is_integer_ratio,
)

DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {
        "epsilon": 0.1,
        "alpha": 0.5,
        "periodic": True,
        "a": {"preset": "cosine", "c": 1.0, "kappa": 0.5},
        "b": {"preset": "gaussian", "c": 1.0, "sigma": 0.3},
        "phi": {"preset": "linear", "slope": 1.0, "clamp": 2.0},
        "psi0": {"preset": "uniform", "R0": 1.0},
    },
    "run": {"horizon": 1.0, "seed": 0, "replicas": 10, "snapshot_times": []},
    "partition": {"delta": 0.1, "ell": 0.5, "E": 0.05, "tau": 0.025},
    "pde": {"delta": 0.015625, "levels": 3, "rgrid": 4, "ugrid": 801, "born_nodes": 16, "obs_level": 3},
    "converge": {"epsilons": [0.2, 0.1, 0.05]},
    "audit": {"window": 0.1},
    "output": {"directory": "out", "figures": True},
}

_ALLOWED = {
    "model": {"epsilon", "alpha", "periodic", "a", "b", "phi", "psi0"},
    "run": {"horizon", "seed", "replicas", "substep", "snapshot_times"},
    "partition": {"delta", "ell", "E", "tau"},
    "pde": {"delta", "levels", "rgrid", "ugrid", "born_nodes", "obs_level"},
    "converge": {"epsilons"},
    "audit": {"window"},
    "output": {"directory", "figures"},
}

PARTITION_KEYS = ("delta", "ell", "E", "tau")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    model: dict
    run: dict
    partition: dict
    pde: dict
    converge: dict
    audit: dict
    output: dict
    source: str | None = None
    _spec: ModelSpec | None = field(default=None, repr=False)

    def model_spec(self) -> ModelSpec:
        if self._spec is None:
            self._spec = build_model(self.model)
        return self._spec

    def partition_cells(self) -> list[PartitionSpec]:
        """Cartesian product of the partition sweep lists, in (delta, ell, E, tau) order."""
        R0 = self.model_spec().psi0.R0
        eps = self.model_spec().mesh.epsilon
        lists = [_as_list(self.partition[k]) for k in PARTITION_KEYS]
        return [PartitionSpec(d, l, e, t, R0, eps) for d, l, e, t in itertools.product(*lists)]

    def resolved(self) -> dict:
        out = {k: copy.deepcopy(getattr(self, k)) for k in _ALLOWED}
        if out["run"].get("substep") is None:
            out["run"]["substep"] = self.model_spec().default_substep
        return out


def _as_list(v: Any) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k not in ("a", "b", "phi", "psi0"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_preset(errors: list[str], path: str, section: Any, known: tuple[str, ...]) -> None:
    if not isinstance(section, Mapping):
        errors.append(f"{path}: expected a table with a 'preset' key")
        return
    name = section.get("preset")
    if name is None:
        errors.append(f"{path}.preset: missing (one of {', '.join(known)})")
    elif name not in known:
        errors.append(f"{path}.preset: unknown preset {name!r}; choose one of {', '.join(known)}")


def config_from_dict(raw: Mapping[str, Any], source: str | None = None) -> ExperimentConfig:
    """Validate ``raw`` against the schema; every violation is reported at once."""
    errors: list[str] = []
    for sec, val in raw.items():
        if sec not in _ALLOWED:
            errors.append(f"[{sec}]: unknown section; known sections are {', '.join(sorted(_ALLOWED))}")
            continue
        if not isinstance(val, Mapping):
            errors.append(f"[{sec}]: expected a table")
            continue
        for key in val:
            if key not in _ALLOWED[sec]:
                errors.append(f"{sec}.{key}: unknown key; allowed: {', '.join(sorted(_ALLOWED[sec]))}")
    if errors:
        raise ConfigError(errors)

    model_raw = raw.get("model", {})
    for key in ("epsilon", "alpha", "a", "b", "phi", "psi0"):
        if key not in model_raw:
            errors.append(f"model.{key}: missing (default would be {DEFAULTS['model'][key]!r})")
    cfg = {sec: _merge(DEFAULTS[sec], raw.get(sec, {})) for sec in _ALLOWED}
    m = cfg["model"]
    _check_preset(errors, "model.a", m["a"], KERNEL_PRESETS)
    _check_preset(errors, "model.b", m["b"], KERNEL_PRESETS)
    _check_preset(errors, "model.phi", m["phi"], RATE_PRESETS)
    _check_preset(errors, "model.psi0", m["psi0"], DENSITY_PRESETS)
    if isinstance(m["phi"], Mapping) and "clamp" not in m["phi"]:
        errors.append("model.phi.clamp: missing (level above which the rate is frozen, e.g. 2.0)")
    eps = m.get("epsilon")
    if not isinstance(eps, (int, float)) or eps <= 0 or not is_integer_ratio(1.0, eps):
        errors.append(f"model.epsilon={eps!r}: 1/epsilon must be a positive integer (e.g. 0.1, 0.05)")
    alpha = m.get("alpha")
    if not isinstance(alpha, (int, float)) or alpha < 0:
        errors.append(f"model.alpha={alpha!r}: must be a nonnegative number")

    run = cfg["run"]
    if not _positive(run["horizon"]):
        errors.append(f"run.horizon={run['horizon']!r}: must be positive")
    if not isinstance(run["replicas"], int) or run["replicas"] < 1:
        errors.append(f"run.replicas={run['replicas']!r}: must be a positive integer")
    if not isinstance(run["seed"], int) or run["seed"] < 0:
        errors.append(f"run.seed={run['seed']!r}: must be a nonnegative integer")
    if run.get("substep") is not None and not _positive(run["substep"]):
        errors.append(f"run.substep={run['substep']!r}: must be positive")

    pde = cfg["pde"]
    for key in ("levels", "rgrid", "ugrid", "born_nodes"):
        if not isinstance(pde[key], int) or pde[key] < 1:
            errors.append(f"pde.{key}={pde[key]!r}: must be a positive integer")
    if not _positive(pde["delta"]):
        errors.append(f"pde.delta={pde['delta']!r}: must be positive")
    elif _positive(run["horizon"]) and not is_integer_ratio(run["horizon"] / 2 ** pde["obs_level"], pde["delta"]):
        errors.append(
            f"pde.delta={pde['delta']!r} and pde.obs_level={pde['obs_level']!r}: observation spacing "
            f"horizon/2^obs_level must be a multiple of pde.delta"
        )
    for e in _as_list(cfg["converge"]["epsilons"]):
        if not _positive(e) or not is_integer_ratio(1.0, e):
            errors.append(f"converge.epsilons: {e!r} is not 1/n for an integer n")
    if not _positive(cfg["audit"]["window"]):
        errors.append(f"audit.window={cfg['audit']['window']!r}: must be positive")

    spec = None
    if not errors:
        try:
            spec = build_model(m)
        except (ValueError, KeyError, TypeError) as exc:
            errors.append(f"model: {exc}")
    if spec is not None:
        part = cfg["partition"]
        lists = [_as_list(part[k]) for k in PARTITION_KEYS]
        seen = set()
        for d, l, e, t in itertools.product(*lists):
            for msg in partition_errors(d, l, e, t, spec.psi0.R0, spec.mesh.epsilon):
                if msg not in seen:
                    seen.add(msg)
                    errors.append(msg)
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(source=source, _spec=spec, **cfg)


def _positive(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0


def load_raw(path: str | Path | None) -> dict:
    """The TOML document as a dict (the built-in defaults when ``path`` is None)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    try:
        with p.open("rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError([f"{p}: cannot read ({exc.strerror})"]) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{p}: not valid TOML ({exc})"]) from exc


def parse_config(path: str | Path | None) -> ExperimentConfig:
    return config_from_dict(load_raw(path), None if path is None else str(path))
