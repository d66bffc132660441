"""Experiment configuration: JSON schema, presets and validation.

A configuration is a flat JSON object. Matrices are nested lists, either of
``[re, im]`` pairs or of plain reals. Example::

    {
      "experiment": "filter",
      "model": {"H": [[0.5, 0], [0, -0.5]], "L": [[0.5, 0], [0, -0.5]], "eta": 0.5},
      "rho0": {"bloch": [-1, 0, 0]},
      "generators": "spectral",
      "T": 5.0, "steps": 4096, "seed": 0, "n_traj": 100,
      "measure": "P", "projection": true
    }

``model`` may instead name a preset model, ``{"preset": "spin-half", "omega":
1.0, "M": 1.0, "eta": 0.5}``. ``generators`` is ``null`` (no family),
``"spectral"`` (nonzero spectral projectors of L) or a list of matrices.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .linalg import as_density, as_hermitian, bloch_to_density, matrix_from_json, spectral_decompose
from .model import ModelSpec, SdeGrid, spin_half_model
from .projection import ExponentialFamily
from .qubit import QubitParams

EXPERIMENTS = ("fig1", "fig2", "fig3", "bound", "exact", "filter")
SPIN_HALF_ONLY = ("fig1", "fig2", "fig3")
MEASURES = ("P", "P_prime")
SCHEMES = ("euler", "milstein", "split")


class ConfigError(ValueError):
    """Carries every validation failure found in a configuration."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    experiment: str = "filter"
    model: dict = field(default_factory=lambda: {"preset": "spin-half", "omega": 1.0, "M": 1.0, "eta": 0.5})
    rho0: object = field(default_factory=lambda: {"bloch": [-1.0, 0.0, 0.0]})
    generators: object = "spectral"
    T: float = 5.0
    steps: int = 4096
    seed: int = 0
    n_traj: int = 1
    measure: str = "P"
    scheme: str = "split"
    projection: bool = True
    feedback: bool = False
    alpha: float = 7.61
    beta: float = 5.0
    gamma: float = 10.0
    stride: int = 1
    chunk_size: int = 64
    out_dir: str = "out"

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config keys: {', '.join(unknown)}"])
        return cls(**copy.deepcopy(data))

    # resolved objects ---------------------------------------------------

    @property
    def grid(self) -> SdeGrid:
        return SdeGrid(float(self.T), int(self.steps), int(self.seed))

    def build_model(self) -> ModelSpec:
        m = self.model
        if "preset" in m:
            if m["preset"] != "spin-half":
                raise ValueError(f"unknown model preset {m['preset']!r}")
            return spin_half_model(float(m.get("omega", 1.0)), float(m.get("M", 1.0)), float(m.get("eta", 0.5)))
        for key in ("H", "L", "eta"):
            if key not in m:
                raise ValueError(f"model needs key {key!r}")
        return ModelSpec(matrix_from_json(m["H"]), matrix_from_json(m["L"]), float(m["eta"]))

    def build_rho0(self) -> np.ndarray:
        if isinstance(self.rho0, dict):
            if "bloch" not in self.rho0:
                raise ValueError("rho0 object needs a 'bloch' entry")
            return as_density(bloch_to_density(self.rho0["bloch"]), "rho0")
        return as_density(matrix_from_json(self.rho0), "rho0")

    def build_family(self, model: ModelSpec | None = None) -> ExponentialFamily | None:
        if self.generators is None:
            return None
        rho0 = self.build_rho0()
        if self.generators == "spectral":
            model = self.build_model() if model is None else model
            L = as_hermitian(model.L, "L", tol=1e-10)
            return ExponentialFamily(spectral_decompose(L).nonzero().projectors, rho0)
        gens = [matrix_from_json(g) for g in self.generators]
        return ExponentialFamily(np.array(gens), rho0)

    def qubit_params(self) -> QubitParams:
        m = self.model
        return QubitParams(
            float(m.get("omega", 1.0)), float(m.get("M", 1.0)), float(m.get("eta", 0.5)),
            float(self.alpha), float(self.beta), float(self.gamma),
        )

    def validate(self) -> list[str]:
        """Every problem with this configuration (empty when valid)."""
        errors: list[str] = []
        if self.experiment not in EXPERIMENTS:
            errors.append(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.measure not in MEASURES:
            errors.append(f"unknown measure {self.measure!r}; expected one of {MEASURES}")
        if self.scheme not in SCHEMES:
            errors.append(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        for name, lo in (("steps", 1), ("n_traj", 1), ("stride", 1), ("chunk_size", 1)):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < lo:
                errors.append(f"{name} must be an integer >= {lo}, got {v!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errors.append(f"seed must be a non-negative integer, got {self.seed!r}")
        try:
            if not float(self.T) > 0:
                errors.append(f"T must be positive, got {self.T!r}")
        except (TypeError, ValueError):
            errors.append(f"T must be a number, got {self.T!r}")

        model = None
        try:
            model = self.build_model()
        except (ValueError, TypeError, KeyError) as exc:
            errors.append(f"model: {exc}")
        rho0 = None
        try:
            rho0 = self.build_rho0()
        except (ValueError, TypeError) as exc:
            errors.append(f"rho0: {exc}")
        if model is not None and rho0 is not None and model.dim != rho0.shape[0]:
            errors.append(f"rho0 has dimension {rho0.shape[0]} but the model has {model.dim}")
            rho0 = None

        needs_family = self.projection or self.experiment in ("fig1", "fig2", "fig3", "bound")
        if needs_family and self.generators is None:
            errors.append("projection filter requested but no family generators given")
        elif self.generators is not None and model is not None and rho0 is not None:
            try:
                self.build_family(model)
            except (ValueError, TypeError, np.linalg.LinAlgError) as exc:
                errors.append(f"generators: {exc}")

        if self.experiment in SPIN_HALF_ONLY and self.model.get("preset") != "spin-half":
            errors.append(f"experiment {self.experiment!r} needs the spin-half model preset")
        if model is not None and (self.experiment in SPIN_HALF_ONLY or self.feedback):
            try:
                self.qubit_params()
            except (ValueError, TypeError) as exc:
                errors.append(f"feedback: {exc}")
        if self.experiment in ("bound", "exact") and model is not None and not model.is_qnd():
            errors.append(f"experiment {self.experiment!r} needs a QND model (L Hermitian, [H, L] = 0)")
        if self.experiment == "filter" and self.feedback:
            errors.append("feedback is only available for the spin-half experiments fig2/fig3")
        return errors


def _spin_half_preset() -> dict:
    return ExperimentConfig(
        experiment="fig1",
        model={"preset": "spin-half", "omega": 1.0, "M": 1.0, "eta": 0.5},
        rho0={"bloch": [-1.0, 0.0, 0.0]},
        generators="spectral",
        T=5.0,
        steps=4096,
        seed=0,
        n_traj=100,
        projection=True,
        alpha=7.61,
        beta=5.0,
        gamma=10.0,
    ).to_dict()


PRESETS = {"spin-half-qnd": _spin_half_preset}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"])
    return ExperimentConfig.from_dict(PRESETS[name]())


def parse_config(data: dict) -> ExperimentConfig:
    """Build and validate; a ``"preset"`` key supplies defaults for the remaining keys."""
    if not isinstance(data, dict):
        raise ConfigError(["config must be a JSON object"])
    data = dict(data)
    base = preset(data.pop("preset")).to_dict() if "preset" in data else {}
    base.update(data)
    cfg = ExperimentConfig.from_dict(base)
    errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config file (or a preset name) and validate it.

    Raises :class:`ConfigError` listing every failure.
    """
    path = os.fspath(path)
    if not os.path.exists(path) and path in PRESETS:
        data = {"preset": path}
    else:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError([f"cannot read config: {exc}"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([f"parse error: {exc}"]) from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return parse_config(data)


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Apply CLI overrides; physical keys (eta, M, omega) go into the model block."""
    data = copy.deepcopy(data)
    if "preset" in data and "model" not in data:
        data["model"] = preset(data["preset"]).model
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("eta", "M", "omega"):
            model = data.setdefault("model", ExperimentConfig().model)
            if key != "eta" and "preset" not in model:
                raise ConfigError([f"--{key} only applies to the spin-half model preset"])
            model[key] = value
        else:
            data[key] = value
    return data
