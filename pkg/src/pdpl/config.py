"""INI configuration: ``[vehicle]``, ``[mpc]``, ``[box]``, ``[solver]``, ``[train]``, ``[pipeline]``.

Matrix-valued MPC weights are given by their diagonals, vectors as
whitespace- or comma-separated numbers::

    [mpc]
    T = 3
    Q_s = 100 100 100
    R_s = 1e-7 1e-7 1e-7
    u_bar = 3000 3000 3000
    du_bar = 1500 1500 1500

    [box]
    beta = 0.1
    v_min = 3
    v_max = 25
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import BoundSpec
from .lpv_mpc import MpcSpec, ParameterBox, VehicleParams, default_box
from .policies.training import TrainConfig
from .qp import SolverConfig

_BOX_KEYS = ("beta", "r", "phi", "phi_dot", "v_min", "v_max", "delta")


@dataclass(frozen=True)
class PipelineConfig:
    epsilon: float = 0.1
    beta: float = 2e-7
    kind: str = "rbn"
    max_retries: int = 6
    mc_samples: int = 100_000
    bench_samples: int = 2000
    seed: int = 0
    significance: float = 1e-3
    max_reject_rate: float = 0.1
    sample_cap: int = 0          # 0 = use the bound; >0 truncates N (run is then flagged)

    def __post_init__(self):
        BoundSpec(self.epsilon, self.beta)
        if self.kind not in ("rbn", "mlp"):
            raise ValueError("pipeline kind must be rbn or mlp")
        if self.max_retries < 0 or self.mc_samples < 0 or self.bench_samples < 0:
            raise ValueError("counts must be nonnegative")


@dataclass
class Config:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    mpc: MpcSpec = field(default_factory=MpcSpec)
    box_settings: dict = field(default_factory=dict)
    solver: SolverConfig = field(default_factory=SolverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    @property
    def box(self) -> ParameterBox:
        kw = {k: v for k, v in self.box_settings.items() if k not in ("v_min", "v_max")}
        v_range = (self.box_settings.get("v_min", 3.0), self.box_settings.get("v_max", 25.0))
        return default_box(self.mpc, v_range=v_range, **kw)

    def to_dict(self) -> dict:
        mpc = self.mpc
        out = {
            "vehicle": dataclasses.asdict(self.vehicle),
            "mpc": {"T": mpc.T, "Q_s": np.diag(mpc.Q_s).tolist(), "R_s": np.diag(mpc.R_s).tolist(),
                    "u_bar": mpc.u_bar.tolist(), "du_bar": mpc.du_bar.tolist()},
            "box": {k: self.box_settings[k] for k in sorted(self.box_settings)},
            "solver": dataclasses.asdict(self.solver),
            "train": dataclasses.asdict(self.train),
            "pipeline": dataclasses.asdict(self.pipeline),
        }
        out["train"]["temperatures"] = list(out["train"]["temperatures"])
        return out

    def problem_hash(self) -> str:
        """Hash of everything that affects the QP labels (vehicle, MPC, box, solver)."""
        d = self.to_dict()
        return _hash({k: d[k] for k in ("vehicle", "mpc", "box", "solver")})

    def hash(self) -> str:
        return _hash(self.to_dict())

    def to_ini(self) -> str:
        d = self.to_dict()
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, values in d.items():
            cp[section] = {k: (" ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
                               if isinstance(v, (list, tuple)) else repr(v) if isinstance(v, float) else str(v))
                           for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _vec(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.replace(",", " ").split()])


def _typed(cls, section: configparser.SectionProxy) -> dict:
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    defaults = cls()
    out = {}
    for key, raw in section.items():
        if key not in kinds:
            raise ValueError(f"unknown key {key!r} in [{section.name}]")
        current = getattr(defaults, key)
        if isinstance(current, bool):
            out[key] = section.getboolean(key)
        elif isinstance(current, int):
            out[key] = int(float(raw))
        elif isinstance(current, float):
            out[key] = float(raw)
        elif isinstance(current, tuple):
            out[key] = tuple(_vec(raw).tolist())
        else:
            out[key] = raw.strip()
    return out


def parse_config(text: str) -> Config:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    known = {"vehicle", "mpc", "box", "solver", "train", "pipeline"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    cfg = Config()
    if cp.has_section("vehicle"):
        cfg.vehicle = VehicleParams(**_typed(VehicleParams, cp["vehicle"]))
    if cp.has_section("mpc"):
        sec = cp["mpc"]
        kw = {}
        for key, raw in sec.items():
            if key == "T":
                kw["T"] = int(raw)
            elif key in ("Q_s", "R_s"):
                kw[key] = np.diag(_vec(raw))
            elif key in ("u_bar", "du_bar"):
                kw[key] = _vec(raw)
            else:
                raise ValueError(f"unknown key {key!r} in [mpc]")
        cfg.mpc = MpcSpec(**kw)
    if cp.has_section("box"):
        for key, raw in cp["box"].items():
            if key not in _BOX_KEYS:
                raise ValueError(f"unknown key {key!r} in [box]")
            cfg.box_settings[key] = float(raw)
    if cp.has_section("solver"):
        cfg.solver = SolverConfig(**_typed(SolverConfig, cp["solver"]))
    if cp.has_section("train"):
        cfg.train = TrainConfig(**_typed(TrainConfig, cp["train"]))
    if cp.has_section("pipeline"):
        cfg.pipeline = PipelineConfig(**_typed(PipelineConfig, cp["pipeline"]))
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text())
