"""Command-line driver: ``sbmce {gen-data,train,sweep,estimate} CONFIG``.

Exit codes: 0 success, 2 configuration error, 3 I/O or input-format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .channel import ScenarioConfig, load_dataset, make_splits, save_dataset
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    NumericalError,
    ParameterError,
)
from .estimators import (
    GmmPrior,
    PilotObservation,
    gmm_estimate,
    gmm_fit,
    load_gmm,
    ls_estimate,
    sample_covariance,
    save_gmm,
    sbm_estimate,
    scov_lmmse,
)
from .evaluation import EstimatorSpec, Resources, SweepConfig, emit_csv, run_sweep
from .numerics import make_rng
from .schedule import NoiseSchedule, build_schedule, initial_step
from .scorenet import ScoreNetConfig, load_model, save_model
from .training import TrainConfig, train

logger = logging.getLogger("sbmce")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test")
BASELINES = {"ls": "LS", "scov": "SCov-LMMSE", "gmm": "GMM", "gmm_kron": "GMM-kron"}
ESTIMATE_KINDS = ("ls", "scov", "gmm", "gmm_kron", "sbm")
# keys that are valid but absent from the defaults (TOML has no null)
OPTIONAL_KEYS = {"train.max_minutes"}


def default_config() -> dict:
    text = resources.files("sbmce").joinpath("default.toml").read_text(encoding="utf-8")
    return tomllib.loads(text)


def _merge(base: dict, user: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        name = f"{where}{key}"
        if key not in base and name not in OPTIONAL_KEYS:
            raise ConfigError(f"unknown config key '{name}'")
        if isinstance(base.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{name}' must be a table")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    data: dict
    schedule: dict
    network: dict
    train: TrainConfig
    gmm: dict
    sweep: dict
    estimate: dict
    paths: dict
    workers: int

    def build_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return build_schedule(s["snr_max_db"], s["snr_min_db"], s["K"], s["gamma"])

    def split_path(self, split: str) -> Path:
        return self.paths["data_dir"] / f"{split}.bin"


def _validate(raw: dict) -> None:
    s = raw["schedule"]
    if not isinstance(s["K"], int) or s["K"] < 2:
        raise ConfigError(f"schedule.K must be an integer >= 2, got {s['K']!r}")
    if not s["gamma"] > 0:
        raise ConfigError(f"schedule.gamma must be > 0, got {s['gamma']!r}")
    if not s["snr_max_db"] > s["snr_min_db"]:
        raise ConfigError("schedule.snr_max_db must exceed schedule.snr_min_db")
    sw = raw["sweep"]
    if len(sw["snr_grid_db"]) == 0:
        raise ConfigError("sweep.snr_grid_db is empty; list at least one SNR in dB")
    for b in sw["baselines"]:
        if b not in BASELINES:
            raise ConfigError(f"unknown baseline {b!r}; choose from {sorted(BASELINES)}")
    for d in sw["deltas"]:
        if d != "max" and not (isinstance(d, int) and 1 <= d <= s["K"]):
            raise ConfigError(f"sweep.deltas entries must be 'max' or integers in 1..K, got {d!r}")
    est = raw["estimate"]
    if est["estimator"] not in ESTIMATE_KINDS:
        raise ConfigError(f"estimate.estimator must be one of {ESTIMATE_KINDS}")
    if est["delta"] != "max" and not (isinstance(est["delta"], int) and 1 <= est["delta"] <= s["K"]):
        raise ConfigError("estimate.delta must be 'max' or an integer in 1..K")
    if not isinstance(raw["runtime"]["workers"], int) or raw["runtime"]["workers"] < 1:
        raise ConfigError("runtime.workers must be a positive integer")
    lo, hi = min(sw["snr_grid_db"]), max(sw["snr_grid_db"])
    if lo < s["snr_min_db"] or hi > s["snr_max_db"]:
        logger.warning(
            "sweep grid [%g, %g] dB exceeds the schedule range [%g, %g] dB; "
            "initial steps will be clamped",
            lo,
            hi,
            s["snr_min_db"],
            s["snr_max_db"],
        )


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a TOML config on top of the shipped defaults and validate it.

    ``overrides`` may set ``seed`` (applied to every seed key) and any key of
    the ``paths`` table.
    """
    user: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as f:
                user = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML ({e})") from None
        base_dir = path.resolve().parent
    raw = _merge(default_config(), user)
    overrides = overrides or {}
    if overrides.get("seed") is not None:
        for section in ("scenario", "train", "gmm", "sweep"):
            raw[section]["seed"] = int(overrides["seed"])
    for key, value in overrides.items():
        if key != "seed" and value is not None:
            if key not in raw["paths"]:
                raise ConfigError(f"unknown path override {key!r}")
            raw["paths"][key] = str(value)
    _validate(raw)
    paths = {k: (base_dir / v if not Path(v).is_absolute() else Path(v)) for k, v in raw["paths"].items()}
    try:
        sc = dict(raw["scenario"])
        sc["rician_k_db_range"] = tuple(sc["rician_k_db_range"])
        scenario = ScenarioConfig(**sc)
        train_cfg = TrainConfig(**raw["train"])
        ScoreNetConfig(n_rx=scenario.n_rx, n_tx=scenario.n_tx, K=raw["schedule"]["K"], **raw["network"])
    except (ParameterError, TypeError) as e:
        raise ConfigError(str(e)) from None
    for key in ("m_train", "m_val", "m_test"):
        if raw["data"][key] < 1:
            raise ConfigError(f"data.{key} must be >= 1")
    return RunConfig(
        scenario=scenario,
        data=raw["data"],
        schedule=raw["schedule"],
        network=raw["network"],
        train=train_cfg,
        gmm=raw["gmm"],
        sweep=raw["sweep"],
        estimate=raw["estimate"],
        paths=paths,
        workers=raw["runtime"]["workers"],
    )


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    d = cfg.data
    splits = make_splits(cfg.scenario, d["m_train"], d["m_val"], d["m_test"], make_rng(cfg.scenario.seed))
    cfg.paths["data_dir"].mkdir(parents=True, exist_ok=True)
    for ds in splits:
        save_dataset(ds, cfg.split_path(ds.split))
        logger.info("wrote %s (%d samples)", cfg.split_path(ds.split), len(ds))
    return EXIT_OK


def _load_split(cfg: RunConfig, split: str):
    path = cfg.split_path(split)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} is missing; run 'sbmce gen-data' first")
    return load_dataset(path, split)


def _check_dims(cfg: RunConfig, ds) -> None:
    if (ds.n_rx, ds.n_tx) != (cfg.scenario.n_rx, cfg.scenario.n_tx):
        raise DimensionError(
            f"dataset is {ds.n_rx}x{ds.n_tx}, config says {cfg.scenario.n_rx}x{cfg.scenario.n_tx}"
        )


def cmd_train(cfg: RunConfig) -> int:
    train_ds, val_ds = (_load_split(cfg, s) for s in ("train", "val"))
    _check_dims(cfg, train_ds)
    sched = cfg.build_schedule()
    net_cfg = ScoreNetConfig(n_rx=train_ds.n_rx, n_tx=train_ds.n_tx, K=sched.K, **cfg.network)
    model, report = train(train_ds.to_beamspace(), val_ds.to_beamspace(), sched, cfg.train, net_cfg)
    for p in model.params.values():
        if not np.all(np.isfinite(p)):
            raise NumericalError("training produced non-finite parameters")
    cfg.paths["model_path"].parent.mkdir(parents=True, exist_ok=True)
    save_model(model, sched, cfg.paths["model_path"])
    report.to_csv(cfg.paths["train_report_path"])
    logger.info(
        "selected restart %d (val %.5f); model written to %s",
        report.selected_restart,
        report.best_val_losses[report.selected_restart - 1],
        cfg.paths["model_path"],
    )
    return EXIT_OK


def fit_or_load_prior(cfg: RunConfig, kind: str) -> GmmPrior:
    """Load a cached GMM prior or fit it on the training split and cache it."""
    path = cfg.paths["gmm_dir"] / f"{kind}.bin"
    if path.exists():
        return load_gmm(path)
    train_ds = _load_split(cfg, "train")
    _check_dims(cfg, train_ds)
    g = cfg.gmm
    if kind == "gmm":
        prior = gmm_fit(train_ds, g["full_components"], "full", make_rng(g["seed"]), g["max_iter"], g["tol"])
    else:
        comps = tuple(g["kron_components"])
        prior = gmm_fit(train_ds, comps, "kronecker", make_rng(g["seed"]), g["max_iter"], g["tol"])
    path.parent.mkdir(parents=True, exist_ok=True)
    save_gmm(prior, path)
    logger.info("fitted and cached %s prior at %s", kind, path)
    return prior


def _model(cfg: RunConfig):
    path = cfg.paths["model_path"]
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint {path} is missing; run 'sbmce train' first")
    return load_model(path)


def sbm_name(gamma: float, delta: int | None) -> str:
    return f"SBM-g{gamma:g}-d{'max' if delta is None else delta}"


def cmd_sweep(cfg: RunConfig) -> int:
    sw = cfg.sweep
    test_ds = _load_split(cfg, "test")
    _check_dims(cfg, test_ds)
    res = Resources()
    specs = []
    for b in sw["baselines"]:
        if b == "scov":
            res.covariance = sample_covariance(_load_split(cfg, "train"))
            specs.append(EstimatorSpec(BASELINES[b], "scov"))
        elif b in ("gmm", "gmm_kron"):
            res.priors[b] = fit_or_load_prior(cfg, b)
            specs.append(EstimatorSpec(BASELINES[b], "gmm", resource=b))
        else:
            specs.append(EstimatorSpec(BASELINES[b], "ls"))
    if sw["deltas"]:
        model, sched = _model(cfg)
        res.models["default"] = (model, sched)
        for d in sw["deltas"]:
            delta = None if d == "max" else int(d)
            specs.append(EstimatorSpec(sbm_name(sched.gamma, delta), "sbm", "default", delta))
    sweep_cfg = SweepConfig(
        snr_grid_db=tuple(float(x) for x in sw["snr_grid_db"]),
        estimators=tuple(specs),
        m_test=min(int(sw["m_test"]), len(test_ds)),
        seed=int(sw["seed"]),
        pilot=sw["pilot"],
        measure_time=bool(sw["measure_time"]),
    )
    report = run_sweep(sweep_cfg, test_ds, res)
    cfg.paths["report_path"].parent.mkdir(parents=True, exist_ok=True)
    emit_csv(report, cfg.paths["report_path"])
    logger.info("wrote %d rows to %s", len(report.rows), cfg.paths["report_path"])
    return EXIT_OK


def _complex_field(obj: dict, key: str) -> np.ndarray:
    try:
        f = obj[key]
        return np.asarray(f["re"], dtype=float) + 1j * np.asarray(f["im"], dtype=float)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"observation field '{key}' must be an object with 're' and 'im' arrays") from e


def read_observation(path: str | Path) -> PilotObservation:
    """Parse an observation JSON file.

    Schema: ``{"n_rx": int, "n_tx": int, "eta_sq": float,
    "y": {"re": [...], "im": [...]}, "pilot": {"re": [[...]], "im": [[...]]}}``
    with ``y`` the column-major ``vec(Y)`` and ``pilot`` row-major.
    """
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from None
    try:
        n_rx, n_tx, eta_sq = int(obj["n_rx"]), int(obj["n_tx"]), float(obj["eta_sq"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: needs integer n_rx, n_tx and numeric eta_sq") from e
    try:
        return PilotObservation(_complex_field(obj, "y"), _complex_field(obj, "pilot"), eta_sq, n_rx, n_tx)
    except ParameterError as e:
        raise FormatError(f"{path}: {e}") from None


def write_observation(obs: PilotObservation, path: str | Path) -> None:
    obj = {
        "n_rx": obs.n_rx,
        "n_tx": obs.n_tx,
        "eta_sq": obs.eta_sq,
        "y": {"re": obs.y.real.tolist(), "im": obs.y.imag.tolist()},
        "pilot": {"re": obs.pilot.real.tolist(), "im": obs.pilot.imag.tolist()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f)


def cmd_estimate(cfg: RunConfig, observation_file: str | Path, output: str | Path | None = None) -> int:
    obs = read_observation(observation_file)
    if obs.batched:
        raise FormatError("the estimate command takes a single observation vector")
    if (obs.n_rx, obs.n_tx) != (cfg.scenario.n_rx, cfg.scenario.n_tx):
        raise DimensionError(
            f"observation is {obs.n_rx}x{obs.n_tx}, config says {cfg.scenario.n_rx}x{cfg.scenario.n_tx}"
        )
    kind = cfg.estimate["estimator"]
    out = {"estimator": kind, "k_hat": 0, "steps": 0, "nfe": 0}
    if kind == "ls":
        result = ls_estimate(obs)
    elif kind == "scov":
        result = scov_lmmse(obs, sample_covariance(_load_split(cfg, "train")))
    elif kind in ("gmm", "gmm_kron"):
        result = gmm_estimate(obs, fit_or_load_prior(cfg, kind))
    else:
        model, sched = _model(cfg)
        if not sched.sigma(1) ** 2 <= obs.eta_sq <= sched.sigma(sched.K) ** 2:
            logger.warning(
                "noise variance %g lies outside the schedule range [%g, %g]; clamping to step %d",
                obs.eta_sq,
                sched.sigma(1) ** 2,
                sched.sigma(sched.K) ** 2,
                initial_step(obs.eta_sq, sched),
            )
        d = cfg.estimate["delta"]
        delta = sched.K if d == "max" else int(d)
        result = sbm_estimate(obs, model, sched, delta)
        out["delta"] = delta
    if not np.all(np.isfinite(result.h_hat)):
        raise NumericalError("estimate contains non-finite values")
    out.update(k_hat=int(result.k_hat), steps=int(result.steps), nfe=int(result.nfe))
    out["h_hat"] = {"re": result.h_hat.real.tolist(), "im": result.h_hat.imag.tolist()}
    if output is None:
        p = Path(observation_file)
        output = p.with_name(p.stem + ".estimate.json")
    with open(output, "w", encoding="utf-8") as f:
        json.dump(out, f)
    logger.info("%s estimate written to %s (k_hat %d, steps %d)", kind, output, result.k_hat, result.steps)
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbmce", description="Score-based MIMO channel estimation")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--data-dir", help="override paths.data_dir")
        sp.add_argument("--model-path", help="override paths.model_path")
        sp.add_argument("--report-path", help="override paths.report_path")
        return sp

    common(sub.add_parser("gen-data", help="generate train/val/test channel datasets"))
    common(sub.add_parser("train", help="train the score network"))
    common(sub.add_parser("sweep", help="NMSE-vs-SNR sweep over all configured estimators"))
    est = common(sub.add_parser("estimate", help="estimate one channel from an observation file"))
    est.add_argument("observation", help="observation JSON file")
    est.add_argument("-o", "--output", help="output JSON (default: <observation>.estimate.json)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    overrides = {
        "seed": args.seed,
        "data_dir": args.data_dir,
        "model_path": args.model_path,
        "report_path": args.report_path,
    }
    try:
        cfg = load_config(args.config, overrides)
        with threadpool_limits(limits=cfg.workers):
            if args.command == "gen-data":
                return cmd_gen_data(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "sweep":
                return cmd_sweep(cfg)
            return cmd_estimate(cfg, args.observation, args.output)
    except (ConfigError, ParameterError) as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (OSError, FormatError, DimensionError, DomainError) as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as e:
        logger.error("numerical failure: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
