"""Experiment configuration: TOML files over shipped defaults."""

from dataclasses import dataclass, field, asdict
import os

try:
    import tomllib
except ModuleNotFoundError:      # Python 3.10
    import tomli as tomllib

from . import plant
from .plant import PlantParams


@dataclass
class DatasetSpec:
    n_trajectories: int = 600
    n_snapshots: int = 160
    ic_rel: float = 0.03
    input_amp: float = 0.1
    input_refresh: int = 10      # samples between input redraws
    svd_tol: float = 1e-5


@dataclass
class ScenarioSpec:
    duration: float = 5.0
    dt_int: float = 5e-5
    dt_sample: float = 2e-3
    event_time: float = 0.5
    l_s_pre: float = plant.L_S_PRE_EVENT
    init: str = "equilibrium"
    perturb_rel: float = 0.01
    u_limit: float = 0.1
    snr_db: float | None = None
    delay_s: float = 0.0
    measured_states: tuple = ()   # empty = all


@dataclass
class MpcSpec:
    horizon: int = 50
    q_weight: float = 40.0
    r_weight: float = 0.5
    u_min: float = -0.1
    u_max: float = 0.1
    activation_time: float = 0.52
    y_ref_window: int = 50
    freeze_window: int = 50
    dist_window: int = 50
    b_source: str = "fitted"      # "fitted" | "analytic"


@dataclass
class CsdcSpec:
    k_p: float = 0.20
    t_w: float = 0.10
    t_1: float = 0.1525
    t_2: float = 0.0014
    sign: float = -1.0


@dataclass
class SelectionSpec:
    measurable: tuple = ("delta",)
    actuable: dict = field(default_factory=lambda: {"x_iq": "delta_i_gq_ref"})
    top_k: int = 0                # 0 = search the whole ranking
    input_signal: str = ""        # explicit override; "" = use the ranking


@dataclass
class PredictSpec:
    n_heldout: int = 24
    horizon_s: float = 1.0


@dataclass
class ExperimentConfig:
    seed: int = 42
    out_dir: str = "out"
    plant: PlantParams = field(default_factory=PlantParams)
    dictionary: dict = field(default_factory=lambda: {
        "states": list(plant.STATE_NAMES), "max_order": 3,
        "include_constant": True, "mode": "curated"})
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    mpc: MpcSpec = field(default_factory=MpcSpec)
    csdc: CsdcSpec = field(default_factory=CsdcSpec)
    selection: SelectionSpec = field(default_factory=SelectionSpec)
    predict: PredictSpec = field(default_factory=PredictSpec)
    adapt_i_sc: float = 0.381
    robust_snr_db: float = 40.0
    robust_delay_s: float = 0.05
    robust_wind_amp: float = 0.10
    robust_wind_start: float = 0.9
    robust_wind_stop: float = 1.4
    # deployment profile for the corrupted-measurement studies
    robust_meas_avg: int = 15
    robust_deadband: float = 0.02
    robust_r_weight: float = 4.0
    # partial-measurement study
    partial_states: tuple = ("x_w", "delta", "i_gd", "i_gq")
    partial_svd_tol: float = 1e-4
    partial_meas_avg: int = 21
    partial_deadband: float = 0.02

    def as_dict(self):
        d = asdict(self)
        d["plant"] = {k: v for k, v in asdict(self.plant).items()}
        return d


def _apply(dc, table, path):
    for key, val in table.items():
        if not hasattr(dc, key):
            raise KeyError(f"unknown config key {path}.{key}")
        cur = getattr(dc, key)
        if isinstance(cur, tuple):
            val = tuple(val)
        setattr(dc, key, val)
    return dc


def load_config(path=None, seed_override=None):
    """Config from a TOML file layered over the defaults.

    Seed precedence: --seed override, then SSOLAB_SEED, then the config file.
    """
    cfg = ExperimentConfig()
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        plant_tbl = raw.pop("plant", {})
        if plant_tbl:
            cfg.plant = cfg.plant.replace(**plant_tbl)
        for name, target in (("dataset", cfg.dataset), ("scenario", cfg.scenario),
                             ("mpc", cfg.mpc), ("csdc", cfg.csdc),
                             ("selection", cfg.selection), ("predict", cfg.predict)):
            tbl = raw.pop(name, {})
            if tbl:
                _apply(target, tbl, name)
        dic_tbl = raw.pop("dictionary", {})
        if dic_tbl:
            cfg.dictionary.update(dic_tbl)
        for key, val in raw.items():
            if not hasattr(cfg, key):
                raise KeyError(f"unknown config key {key}")
            setattr(cfg, key, val)
    env_seed = os.environ.get("SSOLAB_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    if seed_override is not None:
        cfg.seed = int(seed_override)
    return cfg


def build_dictionary_from(cfg):
    from . import dictionary as dy
    d = cfg.dictionary
    return dy.build_dictionary(tuple(d["states"]), d["max_order"],
                               d["include_constant"], d["mode"])
