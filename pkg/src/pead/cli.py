"""Batch driver: ``pead <subcommand> [--config run.json] [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from datetime import date
from pathlib import Path

import numpy as np

from . import backtest as bt
from .features import FeatureSpec, build_matrix
from .ga import GaConfig, SearchSpace, optimize
from .gbt import Ensemble, LossKind, TrainConfig, train
from .market_data import IngestError, ingest
from .synth import SynthConfig, generate_planted

logger = logging.getLogger("pead")

SECTIONS = ("features", "train", "ga", "space", "synth", "split", "backtest")
BACKTEST_DEFAULTS = {"runs": 100, "window": 100, "epsilon": 0.0005,
                     "tactic_mode": "keep-opposite", "tactic_runs": 1, "horizon": 30}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    data: str | None = None
    out: str = "out"
    seed: int | None = None
    threads: int = 1
    loss: LossKind = LossKind.LOGISTIC
    features: FeatureSpec = dataclasses.field(default_factory=FeatureSpec)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    ga: GaConfig = dataclasses.field(default_factory=GaConfig)
    space: SearchSpace = dataclasses.field(default_factory=SearchSpace)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    split: dict = dataclasses.field(default_factory=dict)
    backtest: dict = dataclasses.field(default_factory=lambda: dict(BACKTEST_DEFAULTS))

    def to_dict(self) -> dict:
        return {
            "data": self.data, "out": self.out, "seed": self.seed, "loss": self.loss.value,
            "features": self.features.to_dict(), "train": self.train.to_dict(),
            "ga": self.ga.to_dict(), "space": self.space.to_dict(), "synth": self.synth.to_dict(),
            "split": {k: (v.isoformat() if isinstance(v, date) else v) for k, v in self.split.items()},
            "backtest": dict(self.backtest),
        }

    @property
    def digest(self) -> str:
        # out and threads do not change results, so they stay out of the hash
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def comments(self) -> list[str]:
        return [f"config_sha256={self.digest}", f"seed={self.train.seed}"]

    def selector(self) -> bt.Selector | None:
        if not any(self.split.get(k) is not None for k in ("year", "quarter", "date")):
            return None
        return bt.Selector(**{k: self.split.get(k) for k in ("year", "quarter", "date", "sector")})


def _section(cls, name, value):
    try:
        return cls.from_dict(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section '{name}': {exc}") from None


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    known = {"data", "out", "seed", "threads", "loss", *SECTIONS}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"config {path}: unknown field(s) {sorted(unknown)}")
    for key in ("data", "out", "seed", "threads"):
        if key in doc:
            setattr(cfg, key, doc[key])
    if "loss" in doc:
        try:
            cfg.loss = LossKind(doc["loss"])
        except ValueError:
            raise ConfigError(f"config field 'loss': expected one of {[k.value for k in LossKind]}") from None
    if "features" in doc:
        cfg.features = _section(FeatureSpec, "features", doc["features"])
    if "train" in doc:
        cfg.train = _section(TrainConfig, "train", doc["train"])
    if "ga" in doc:
        cfg.ga = _section(GaConfig, "ga", doc["ga"])
    if "space" in doc:
        try:
            cfg.space = SearchSpace.from_dict(doc["space"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"config section 'space': {exc}") from None
    if "synth" in doc:
        cfg.synth = _section(SynthConfig, "synth", doc["synth"])
    if "split" in doc:
        bad = set(doc["split"]) - {"year", "quarter", "date", "sector"}
        if bad:
            raise ConfigError(f"config section 'split': unknown field(s) {sorted(bad)}")
        cfg.split = dict(doc["split"])
    if "backtest" in doc:
        bad = set(doc["backtest"]) - set(BACKTEST_DEFAULTS)
        if bad:
            raise ConfigError(f"config section 'backtest': unknown field(s) {sorted(bad)}")
        cfg.backtest.update(doc["backtest"])
    return cfg


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    """Flags win over file values."""
    for key in ("data", "out", "threads"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, getattr(args, key))
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.seed is not None:
        cfg.train = cfg.train.replace(seed=cfg.seed)
        cfg.ga = dataclasses.replace(cfg.ga, seed=cfg.seed)
        cfg.synth = dataclasses.replace(cfg.synth, seed=cfg.seed)
    for key in ("year", "quarter", "date", "sector"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.split[key] = v
    if isinstance(cfg.split.get("date"), str):
        try:
            cfg.split["date"] = date.fromisoformat(cfg.split["date"])
        except ValueError:
            raise ConfigError(f"split field 'date': bad ISO date {cfg.split['date']!r}") from None
    for key in ("window", "runs", "epsilon", "tactic_mode"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.backtest[key] = v
    if getattr(args, "max_generations", None) is not None:
        cfg.ga = dataclasses.replace(cfg.ga, max_generations=args.max_generations)
    return cfg


# -- subcommands ---------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _raw(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("config field 'data' (or --data) is required")
    if not Path(cfg.data).exists():
        raise ConfigError(f"config field 'data': {cfg.data} does not exist")
    return ingest(cfg.data)


def _study(cfg: RunConfig) -> bt.StudyData:
    return bt.prepare_study(_raw(cfg), cfg.features, int(cfg.backtest["horizon"]))


def _train_rows(cfg: RunConfig, data: bt.StudyData) -> np.ndarray:
    sel = cfg.selector()
    if sel is None:
        return np.arange(len(data.events))
    return np.array(bt.walk_forward_split(data.events, sel).train, dtype=int)


def _labels(cfg: RunConfig, data: bt.StudyData) -> np.ndarray:
    if cfg.loss is LossKind.LOGISTIC:
        return (data.car >= 0).astype(float)
    return data.car


def _plan(cfg: RunConfig, data: bt.StudyData) -> bt.SplitPlan:
    sel = cfg.selector()
    if sel is None:
        raise ConfigError("backtest needs a split selector: --year, --quarter or --date")
    return bt.walk_forward_split(data.events, sel)


def _write_text(path: Path, cfg: RunConfig, text: str) -> None:
    path.write_text("".join(f"# {c}\n" for c in cfg.comments()) + text + "\n", encoding="utf-8")


def cmd_synth(cfg: RunConfig, args) -> str:
    out = _out(cfg)
    res = generate_planted(cfg.synth)
    res.write(out)
    meta_path = out / "synth_meta.json"
    meta = json.loads(meta_path.read_text())
    meta.update(config_sha256=cfg.digest, seed=cfg.synth.seed)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return f"wrote synthetic bundle: {len(res.raw.events)} events, {len(res.raw.prices)} companies -> {out}"


def cmd_ingest(cfg: RunConfig, args) -> str:
    raw = _raw(cfg)
    lines = [f"events {len(raw.events)}", f"companies {len(raw.prices)}",
             f"trading days {len(raw.calendar)}", f"dropped {raw.n_dropped}"]
    lines += [f"  {k}: {v}" for k, v in sorted(raw.dropped.items())]
    text = "\n".join(lines)
    _write_text(_out(cfg) / "ingest_summary.txt", cfg, text)
    return text


def cmd_features(cfg: RunConfig, args) -> str:
    fm = build_matrix(_raw(cfg), cfg.features)
    path = _out(cfg) / "features.csv"
    fm.to_csv(path, cfg.comments())
    return f"feature matrix {fm.shape[0]}x{fm.shape[1]} ({fm.dropped} sparse rows dropped) -> {path}"


def cmd_tune(cfg: RunConfig, args) -> str:
    data = _study(cfg)
    rows = _train_rows(cfg, data)
    best, result = optimize(data.matrix.values[rows], _labels(cfg, data)[rows], cfg.space, cfg.ga,
                            cfg.loss, cfg.train, cfg.threads)
    out = _out(cfg)
    doc = {"config_sha256": cfg.digest, "seed": cfg.ga.seed, "fitness": result.best_fitness,
           "generations": len(result.history), "chromosome": cfg.space.values(result.best),
           "train": best.to_dict()}
    (out / "best_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    result.write_history(out / "ga_history.csv", cfg.comments())
    return (f"best fitness {result.best_fitness:.6g} after {len(result.history)} generations: "
            f"{cfg.space.values(result.best)}")


def cmd_train(cfg: RunConfig, args) -> str:
    data = _study(cfg)
    rows = _train_rows(cfg, data)
    model = train(data.matrix.values[rows], _labels(cfg, data)[rows], cfg.train, cfg.loss,
                  feature_names=data.matrix.columns)
    path = _out(cfg) / "model.json"
    model.save(path, meta={"config_sha256": cfg.digest, "seed": cfg.train.seed,
                           "train_rows": int(rows.size)})
    return f"trained {len(model.trees)} trees on {rows.size} events -> {path}"


def cmd_predict(cfg: RunConfig, args) -> str:
    if not args.model:
        raise ConfigError("--model is required for predict")
    model = Ensemble.load(args.model)
    data = _study(cfg)
    sel = cfg.selector()
    rows = (np.array(bt.walk_forward_split(data.events, sel).test) if sel is not None
            else np.arange(len(data.events)))
    pred = model.predict(data.matrix.values[rows])
    path = _out(cfg) / "predictions.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(f"# {c}\n" for c in cfg.comments()))
        fh.write("company_id,fiscal_quarter,prediction\n")
        for i, p in zip(rows, pred):
            cid, q = data.matrix.keys[i]
            fh.write(f"{cid},{q},{float(p)!r}\n")
    return f"scored {rows.size} events -> {path}"


def cmd_backtest(cfg: RunConfig, args) -> str:
    data = _study(cfg)
    plan = _plan(cfg, data)
    out = _out(cfg)
    b = cfg.backtest
    kind = args.kind
    if kind == "direction":
        rep = bt.direction_study(data, plan, cfg.train, int(b["runs"]), cfg.loss, cfg.threads)
        rep.to_csv(out / "direction.csv", cfg.comments())
    elif kind in ("portfolio", "quantile"):
        rep = bt.portfolio_study(data, plan, cfg.train, int(b["window"]), LossKind.SQUARED_ERROR)
        rep.curve.to_csv(out / "portfolio_curve.csv", cfg.comments())
        rep.quantiles.to_csv(out / "quantiles.csv", cfg.comments())
        rep.write_predictions(out / "portfolio_predictions.csv", cfg.comments())
        rep = rep.curve if kind == "portfolio" else rep.quantiles
    elif kind == "occurrence":
        rep = bt.occurrence_study(data, plan, cfg.train, int(b["runs"]), 5, cfg.loss, cfg.threads)
        rep.to_csv(out / "occurrence.csv", cfg.comments())
    else:
        rep = bt.tactic_study(data, plan, cfg.train, float(b["epsilon"]), b["tactic_mode"],
                              int(b.get("tactic_runs", 1)), cfg.loss, cfg.threads)
        rep.to_csv(out / "tactic.csv", cfg.comments())
    text = rep.summary()
    _write_text(out / f"{kind}_summary.txt", cfg, text)
    return text


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "features": cmd_features, "tune": cmd_tune,
            "train": cmd_train, "predict": cmd_predict, "backtest": cmd_backtest}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed (overrides every section's seed)")
    common.add_argument("--threads", type=int, help="worker cap for independent runs")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="CSV bundle directory")
    common.add_argument("--year", type=int)
    common.add_argument("--quarter", help="fiscal quarter tag, e.g. 2018Q4")
    common.add_argument("--date", help="announcement date, ISO format")
    common.add_argument("--sector")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pead", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "ingest", "features", "train"):
        sub.add_parser(name, parents=[common])
    tune = sub.add_parser("tune", parents=[common])
    tune.add_argument("--max-generations", type=int)
    pred = sub.add_parser("predict", parents=[common])
    pred.add_argument("--model", help="model JSON written by 'train'")
    back = sub.add_parser("backtest", parents=[common])
    back.add_argument("kind", choices=["direction", "portfolio", "quantile", "occurrence", "tactic"])
    back.add_argument("--window", type=int)
    back.add_argument("--runs", type=int)
    back.add_argument("--epsilon", type=float)
    back.add_argument("--tactic-mode", choices=[m.value for m in bt.TacticMode])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_flags(load_config(args.config), args)
        if cfg.threads is None or int(cfg.threads) < 1:
            raise ConfigError("field 'threads' must be >= 1")
        print(COMMANDS[args.command](cfg, args))
    except (ConfigError, IngestError, ValueError, OSError, KeyError) as exc:
        print(f"pead {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
