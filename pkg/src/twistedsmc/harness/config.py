"""Experiment configuration: TOML documents with documented defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .._compat import tomllib


class ConfigError(ValueError):
    """A configuration document is malformed; the message names the key."""


LGSSM_DEFAULTS = dict(d=3, n=200, a=0.42, mu0=1.0, sigma0_sq=1.0, sigmaM_sq=1.0,
                      sigmaG_sq=0.25)
SV_GENERATE = dict(phi1=0.1, phi2=0.5, phi3=0.1, sigma=0.25)
SV_FILTER = dict(phi1=0.09, phi2=0.45, phi3=0.11, sigma=0.25)
METHODS = ("bpf", "tpf-learn", "tpf-opt", "bpf-s", "bpf-c")


@dataclass
class ExperimentConfig:
    model: str = "lgssm"
    methods: tuple = ("tpf-learn", "tpf-opt", "bpf", "bpf-s", "bpf-c")
    repetitions: int = 100
    seed: int = 0
    output: str = "records.csv"

    # filtering
    N: int = 200
    kappa: float = 0.5
    n_tilde: int = 25

    # learning
    iterations: int = 3
    n_tilde_learn: int | None = None
    alpha_min: tuple = (0.04, 0.02, 0.01)
    n0: int | None = None
    floor: float = 5e-4
    function_class: str = "isotropic"
    ridge: float = 1e-8
    partial_twist: bool = False
    opt_alpha_min: float | None = None

    # model and data
    n: int | None = None
    lgssm: dict = field(default_factory=lambda: dict(LGSSM_DEFAULTS))
    sv_generate: dict = field(default_factory=lambda: dict(SV_GENERATE))
    sv_filter: dict = field(default_factory=lambda: dict(SV_FILTER))
    x0: float | None = None
    data: str | None = None
    data_seed: int = 0

    # reference for models without a closed-form evidence
    reference_N: int = 20000
    reference_reps: int = 10

    @classmethod
    def for_model(cls, model):
        if model == "lgssm":
            return cls()
        if model == "sv":
            return cls(model="sv", methods=("tpf-learn", "bpf", "bpf-s", "bpf-c"),
                       N=250, n0=100, n_tilde=2, n_tilde_learn=5, iterations=2,
                       alpha_min=(0.002,), floor=0.002, partial_twist=True, n=2000)
        raise ConfigError(f"model: unknown model {model!r}")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in ("lgssm", "sv"):
            raise ConfigError(f"model: unknown model {self.model!r}")
        for key in ("repetitions", "N", "n_tilde", "iterations", "reference_N",
                    "reference_reps"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key}: must be a positive integer")
        for key in ("n0", "n_tilde_learn"):
            v = getattr(self, key)
            if v is not None and int(v) < 1:
                raise ConfigError(f"{key}: must be a positive integer")
        self.alpha_min = tuple(float(a) for a in (
            self.alpha_min if isinstance(self.alpha_min, (list, tuple)) else [self.alpha_min]))
        if not self.alpha_min or any(not 0 < a <= 1 for a in self.alpha_min):
            raise ConfigError("alpha_min: values must lie in (0, 1]")
        if not 0 <= self.kappa <= 1:
            raise ConfigError("kappa: must lie in [0, 1]")
        if not 0 <= self.floor < 1:
            raise ConfigError("floor: must lie in [0, 1)")
        self.methods = tuple(self.methods)
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"methods: unknown method {m!r}")
        if self.model == "sv" and "tpf-opt" in self.methods:
            raise ConfigError("methods: tpf-opt needs analytic optimal twists (lgssm only)")

    @property
    def learn_particles(self):
        return self.n0 or self.N

    @property
    def learn_n_tilde(self):
        return self.n_tilde_learn or self.n_tilde

    @property
    def final_alpha(self):
        return self.opt_alpha_min or self.alpha_min[-1]

    def horizon(self):
        if self.n is not None:
            return int(self.n)
        return int(self.lgssm["n"]) if self.model == "lgssm" else 2000


# section -> {toml key: config attribute}
_SECTIONS = {
    "experiment": {k: k for k in ("model", "methods", "repetitions", "seed", "output")},
    "filter": {"N": "N", "kappa": "kappa", "n_tilde": "n_tilde"},
    "learning": {"iterations": "iterations", "n_tilde": "n_tilde_learn",
                 "alpha_min": "alpha_min", "n0": "n0", "floor": "floor",
                 "function_class": "function_class", "ridge": "ridge",
                 "partial_twist": "partial_twist", "opt_alpha_min": "opt_alpha_min"},
    "data": {"n": "n", "path": "data", "seed": "data_seed", "x0": "x0"},
    "reference": {"N": "reference_N", "repetitions": "reference_reps"},
}
_PARAM_SECTIONS = {"lgssm": ("lgssm", LGSSM_DEFAULTS),
                   "sv.generate": ("sv_generate", SV_GENERATE),
                   "sv.filter": ("sv_filter", SV_FILTER)}


def _merge_params(target, table, prefix, allowed):
    for k, v in table.items():
        if k not in allowed:
            raise ConfigError(f"{prefix}.{k}: unknown key")
        target[k] = v


def config_from_dict(doc):
    model = doc.get("experiment", {}).get("model", "lgssm")
    cfg = ExperimentConfig.for_model(model)
    values = {}
    for section, table in doc.items():
        if section in _SECTIONS:
            if not isinstance(table, dict):
                raise ConfigError(f"{section}: expected a table")
            for k, v in table.items():
                if k not in _SECTIONS[section]:
                    raise ConfigError(f"{section}.{k}: unknown key")
                values[_SECTIONS[section][k]] = v
        elif section == "lgssm":
            params = dict(cfg.lgssm)
            _merge_params(params, table, "lgssm", LGSSM_DEFAULTS)
            values["lgssm"] = params
        elif section == "sv":
            for sub, tab in table.items():
                key = f"sv.{sub}"
                if key not in _PARAM_SECTIONS:
                    raise ConfigError(f"{key}: unknown section")
                attr, allowed = _PARAM_SECTIONS[key]
                params = dict(getattr(cfg, attr))
                _merge_params(params, tab, key, allowed)
                values[attr] = params
        else:
            raise ConfigError(f"{section}: unknown section")
    try:
        return dataclasses.replace(cfg, **values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def load_params(path, model):
    """Parameter file: flat keys mirroring the model parameter fields.

    SV files may carry ``n`` and ``x0`` next to ``phi1..phi3`` and ``sigma``.
    """
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    allowed = dict(LGSSM_DEFAULTS) if model == "lgssm" else {**SV_GENERATE, "n": 2000, "x0": None}
    out = dict(allowed)
    for k, v in doc.items():
        if k not in allowed:
            raise ConfigError(f"{k}: unknown parameter for model {model}")
        out[k] = v
    return out
