"""Run configuration: a versioned YAML document validated before any compute.

Layout::

    schema_version: 1
    model:
      n_modes: 16
      dt: 0.001
      T: 1.0
      forcing: {modes: [-2, -1, 1, 2], beta: 1.0}   # or amps: {1: 0.5, -1: 0.5}
      nonlinear: true
      snapshot_stride: 1
      require_symmetric: false
    experiment: {...}          # command parameters, see EXPERIMENT_DEFAULTS
    seeding: {master_seed: 0, scheme: glsim-seed-v1}
    output: {directory: out, formats: [tsv, json]}

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ValidationError
from .io import config_hash
from .sde import ForcingSpec, SolverConfig
from .seeding import SCHEME_ID

SCHEMA_VERSION = 1

MODEL_DEFAULTS = {
    "n_modes": 32, "dt": 1e-3, "T": 1.0, "forcing": None, "nonlinear": True,
    "snapshot_stride": 1, "require_symmetric": False,
}

_PHI = {"kind": "capped_low_modes", "delta": 1.0, "N": 2}

EXPERIMENT_DEFAULTS = {
    "simulate": {"u0": {}, "order": 1, "power": 2, "eta": 0.01, "archive": True},
    "check-modes": {"z0": None, "cutoff": 50, "depth": 20},
    "tangent-check": {"u0": {}, "eps": 1e-5, "eps_second": 1e-5, "directions": 3},
    "malliavin": {"alpha": 0.5, "N": 4, "eps_grid": [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
                  "ensemble": 64, "budget": 64, "rank_threshold": 1e-8,
                  "resolvent_beta": 0.1, "burn_in": 0.0},
    "control-decay": {"n_max": 8, "ensemble": 128, "delta": 2.0 ** -9, "budget": 16,
                      "beta_max": 1.0, "N": None, "strict": True},
    "mixing": {"n_pairs": 64, "separation": 10.0, "metric_delta": 1.0, "record_every": 0.1},
    "lln": {"phi": _PHI, "separation": 10.0, "n_batches": 20},
    "clt": {"phi": _PHI, "reps": 200, "burn_in": 10.0, "batch_length": 10.0,
            "mean_paths": None},
    "stats": {"ensemble": 64, "burn_in": 5.0, "record_every": 0.1},
}

COMMANDS = tuple(EXPERIMENT_DEFAULTS)


def _check_keys(block: dict, allowed, where: str):
    if not isinstance(block, dict):
        raise ValidationError(f"{where} must be a mapping")
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ValidationError(f"unknown key(s) in {where}: {', '.join(map(str, extra))}")


def _forcing(spec, require_symmetric: bool) -> ForcingSpec:
    if spec is None:
        raise ValidationError("model.forcing is required")
    _check_keys(spec, ("modes", "beta", "amps"), "model.forcing")
    if "amps" in spec:
        if "modes" in spec or "beta" in spec:
            raise ValidationError("give either forcing.amps or forcing.modes/beta, not both")
        return ForcingSpec.from_dict({int(k): float(v) for k, v in spec["amps"].items()},
                                     require_symmetric)
    if "modes" not in spec:
        raise ValidationError("forcing needs modes (with optional beta) or amps")
    return ForcingSpec.uniform([int(k) for k in spec["modes"]], float(spec.get("beta", 1.0)),
                               require_symmetric=require_symmetric)


@dataclass
class RunConfig:
    command: str
    raw: dict                 # normalized document (defaults filled in)
    solver: SolverConfig
    forcing: ForcingSpec
    experiment: dict
    master_seed: int
    out_dir: Path
    formats: tuple

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def parse(doc: dict, command: str) -> RunConfig:
    """Validate a config document for ``command`` and fill in defaults."""
    if command not in EXPERIMENT_DEFAULTS:
        raise ValidationError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    if doc is None:
        doc = {}
    _check_keys(doc, ("schema_version", "model", "experiment", "seeding", "output"), "config")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    model = {**MODEL_DEFAULTS, **(doc.get("model") or {})}
    _check_keys(model, MODEL_DEFAULTS, "model")
    forcing = _forcing(model["forcing"], bool(model["require_symmetric"]))
    try:
        solver = SolverConfig(n_modes=int(model["n_modes"]), dt=float(model["dt"]),
                              T=float(model["T"]), seed=0,
                              snapshot_stride=int(model["snapshot_stride"]),
                              nonlinear=bool(model["nonlinear"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad model block: {exc}") from None
    solver.check_forcing(forcing)

    exp_in = dict(doc.get("experiment") or {})
    named = exp_in.pop("command", command)
    if named != command:
        raise ValidationError(f"config is for command {named!r}, not {command!r}")
    defaults = copy.deepcopy(EXPERIMENT_DEFAULTS[command])
    _check_keys(exp_in, defaults, f"experiment ({command})")
    experiment = {**defaults, **exp_in}

    seeding = {"master_seed": 0, "scheme": SCHEME_ID, **(doc.get("seeding") or {})}
    _check_keys(seeding, ("master_seed", "scheme"), "seeding")
    if seeding["scheme"] != SCHEME_ID:
        raise ValidationError(f"unsupported seed scheme {seeding['scheme']!r}")
    try:
        master = int(seeding["master_seed"])
    except (TypeError, ValueError):
        raise ValidationError("seeding.master_seed must be an integer") from None
    if not 0 <= master < 2 ** 64:
        raise ValidationError("seeding.master_seed must fit in 64 bits")

    output = {"directory": "out", "formats": ["tsv", "json"], **(doc.get("output") or {})}
    _check_keys(output, ("directory", "formats"), "output")
    formats = tuple(output["formats"])
    bad = sorted(set(formats) - {"tsv", "json", "bin"})
    if bad:
        raise ValidationError(f"unknown output format(s): {', '.join(bad)}")

    solver = solver.with_(seed=master)
    raw = {"schema_version": SCHEMA_VERSION, "command": command,
           "model": {**model, "forcing": forcing.to_dict()}, "experiment": experiment,
           "seeding": seeding}
    return RunConfig(command, raw, solver, forcing, experiment, master,
                     Path(output["directory"]), formats)


def load(path, command: str) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path} is not valid YAML: {exc}") from None
    return parse(doc, command)
