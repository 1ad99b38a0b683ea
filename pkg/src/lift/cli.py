"""Command-line interface: ``lift synth|leads|train|eval|predict|gradcheck``.

Settings come from built-in defaults, then an optional ``key = value`` config
file (``--config``), then command-line flags. Every command writes the
resolved settings to ``<out>/<command>_config.txt`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .container import atomic_write_text
from .data import Dataset, SyntheticSpec, gen_synthetic, load_csv, random_pairs, save_csv, split
from .errors import ConfigError, LiftError, TrainingDiverged
from .lead import LeadCache, LeadTable, estimate_window, lead_count_tables, load_cache, precompute_leads, save_cache
from .normalize import apply, fit
from .model import LiftModel
from .training import TrainConfig, gradient_check, leads_for, make_windows, predict, train, write_epoch_log

logger = logging.getLogger("lift")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "LIFT_OUT"

_TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}
DEFAULTS: dict[str, object] = {
    **_TRAIN_DEFAULTS,
    "lr_grid": "",
    "dataset": "",
    "cache": "",
    "checkpoint": "",
    "spec": "",
    "out": "",
    "threads": 1,
    "stride": 1,
    "delimiter": ",",
    "nan_policy": "reject",
    "split": "test",
    "horizons": "",
    "t": -1,
    "C": 4,
    "gradcheck_seeds": 20,
    "gradcheck_batch": 3,
    "fd_step": 1e-5,
    "tolerance": 1e-4,
}

COMMAND_KEYS = {
    "synth": ("spec", "seed"),
    "leads": ("dataset", "L", "K", "stride", "threads", "delimiter", "nan_policy"),
    "train": tuple(_TRAIN_DEFAULTS) + ("dataset", "cache", "threads", "delimiter", "nan_policy"),
    "eval": ("checkpoint", "dataset", "cache", "split", "horizons", "strict_boundaries", "delimiter", "nan_policy"),
    "predict": ("checkpoint", "dataset", "t", "delimiter", "nan_policy"),
    "gradcheck": ("C", "L", "H", "K", "N", "seed", "gradcheck_seeds", "gradcheck_batch", "fd_step",
                  "tolerance", "state_input"),
}


class UsageError(LiftError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = {k: DEFAULTS[k] for k in COMMAND_KEYS[command]}
    cfg["out"] = os.environ.get(OUT_ENV, "") or "."
    if args.config:
        for k, v in read_config_file(args.config).items():
            cfg[k] = v
    for k in list(DEFAULTS):
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = _coerce(k, str(v))
    return cfg


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.replace(";", ",").split(",") if s.strip())
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def train_config(cfg: dict) -> TrainConfig:
    kw = {k: cfg[k] for k in _TRAIN_DEFAULTS if k in cfg and k != "lr_grid"}
    return TrainConfig(**kw, lr_grid=_parse_floats(str(cfg.get("lr_grid", ""))))


def _require(cfg: dict, *keys):
    for k in keys:
        if not cfg.get(k):
            raise UsageError(f"missing required setting {k!r}")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: dict) -> Dataset:
    _require(cfg, "dataset")
    return load_csv(cfg["dataset"], delimiter=cfg.get("delimiter", ","), nan_policy=cfg.get("nan_policy", "reject"))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, out: Path) -> None:
    """Spec JSON holds SyntheticSpec fields; ``n_pairs``/``lag_range``/``allow_negative`` draw random pairs."""
    if cfg.get("spec"):
        try:
            raw = json.loads(Path(cfg["spec"]).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read spec: {e}") from None
    else:
        raw = {"C": 10, "T": 5000, "n_pairs": 5, "lag_range": [4, 20], "noise": 0.05}
    raw = dict(raw)
    raw.setdefault("seed", cfg["seed"])
    if "n_pairs" in raw:
        rng = np.random.default_rng(raw["seed"])
        pairs = random_pairs(int(raw["C"]), int(raw.pop("n_pairs")), tuple(raw.pop("lag_range", (4, 16))),
                             rng, bool(raw.pop("allow_negative", True)))
        raw["pairs"] = [asdict(p) for p in pairs]
    spec = SyntheticSpec.from_dict(raw)
    dataset, planted = gen_synthetic(spec)
    save_csv(dataset, out / "dataset.csv")
    truth = {
        "spec": json.loads(spec.to_json()),
        "lead_map": [{"lagged": p.lagged, "leader": p.leader, "lag": p.lag, "sign": p.sign, "weight": p.weight}
                     for p in planted],
        "fingerprint": dataset.fingerprint,
    }
    atomic_write_text(out / "ground_truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n")


def cmd_leads(cfg: dict, out: Path) -> None:
    dataset = _load_dataset(cfg)
    cache = precompute_leads(dataset, cfg["L"], cfg["K"], stride=cfg["stride"], threads=cfg["threads"])
    save_cache(cache, out / "leads.cache")
    tab = cache.table
    rows = []
    for w, t in enumerate(cache.positions):
        for j in range(tab.n_channels):
            for r in range(tab.k):
                if not tab.valid[w, j, r]:
                    continue
                rows.append([int(t), j, r + 1, int(tab.indicators[w, j, r]), int(tab.steps[w, j, r]),
                             _num(tab.raw_abs_corr[w, j, r]), int(tab.signs[w, j, r]), _num(tab.norm_coeffs[w, j, r])])
    atomic_write_text(out / "leads.csv", _csv_text(
        ["t", "target", "rank", "indicator", "step", "abs_corr", "sign", "norm_coeff"], rows))
    pair, steps = lead_count_tables(tab)
    names = dataset.channel_names
    atomic_write_text(out / "lead_counts.csv", _csv_text(
        ["target", *names], [[names[j], *pair[j].tolist()] for j in range(len(names))]))
    atomic_write_text(out / "lead_step_counts.csv", _csv_text(
        ["target", "indicator", "step", "count"], [[j, i, s, n] for (j, i, s), n in steps.items()]))


def _cache_for(cfg: dict, dataset: Dataset, L: int, K: int) -> LeadCache:
    if cfg.get("cache") and Path(cfg["cache"]).exists():
        cache = load_cache(cfg["cache"], dataset.fingerprint)
        if (cache.L, cache.K) != (L, K):
            raise ConfigError(f"cache was built with L={cache.L}, K={cache.K}; need L={L}, K={K}")
        return cache
    return precompute_leads(dataset, L, K, threads=cfg.get("threads", 1))


def cmd_train(cfg: dict, out: Path) -> None:
    dataset = _load_dataset(cfg)
    tc = train_config(cfg)
    model = LiftModel.create(tc.model_config(dataset.C), seed=tc.seed)
    cache = _cache_for(cfg, dataset, tc.L, tc.K) if tc.use_refiner else None
    try:
        trained, log = train(model, dataset, cache, tc)
    except TrainingDiverged as e:
        if e.model is not None:
            e.model.save(out / "model.last_good.ckpt")
        raise
    trained.save(out / "model.ckpt")
    write_epoch_log(log, out / "epoch_log.csv")


def _span(dataset: Dataset, which: str) -> range:
    spans = dict(zip(("train", "val", "test"), split(dataset)))
    if which not in spans:
        raise UsageError(f"split must be train, val or test, got {which!r}")
    return spans[which]


def cmd_eval(cfg: dict, out: Path) -> None:
    _require(cfg, "checkpoint")
    model = LiftModel.load(cfg["checkpoint"])
    mc = model.config
    dataset = _load_dataset(cfg)
    if dataset.C != mc.C:
        raise ConfigError(f"checkpoint expects {mc.C} channels, dataset has {dataset.C}")
    cache = _cache_for(cfg, dataset, mc.L, mc.K) if mc.use_refiner else None
    wins = make_windows(dataset, _span(dataset, cfg["split"]), mc.L, mc.H, mc.K, cache,
                        cfg["strict_boundaries"], with_leads=mc.use_refiner)
    if len(wins) == 0:
        raise ConfigError("the selected split has no complete windows")
    horizons = [int(h) for h in _parse_floats(cfg["horizons"])] or [mc.H]
    if any(not 1 <= h <= mc.H for h in horizons):
        raise UsageError(f"horizons must lie in [1, {mc.H}]")
    preds = {"backbone": predict(model, wins, refine=False), "refined": predict(model, wins)}
    rows = []
    for h in horizons:
        truth = wins.horizon[..., :h]
        for name, p in preds.items():
            err = p[..., :h] - truth
            rows.append([h, name, _num(np.mean(err ** 2)), _num(np.mean(np.abs(err))), len(wins)])
    atomic_write_text(out / "metrics.csv", _csv_text(["horizon", "model", "mse", "mae", "windows"], rows))


def cmd_predict(cfg: dict, out: Path) -> None:
    """Forecast steps ``t .. t+H-1`` from the lookback ``[t-L, t)``; ``t = -1`` means the series end."""
    _require(cfg, "checkpoint")
    model = LiftModel.load(cfg["checkpoint"])
    mc = model.config
    dataset = _load_dataset(cfg)
    if dataset.C != mc.C:
        raise ConfigError(f"checkpoint expects {mc.C} channels, dataset has {dataset.C}")
    t = dataset.T if cfg["t"] < 0 else cfg["t"]
    if not mc.L <= t <= dataset.T:
        raise UsageError(f"t must lie in [{mc.L}, {dataset.T}]")
    lookback = dataset.values[t - mc.L : t].T
    leads = leads_for(dataset.values, [t - mc.L], mc.L, mc.K)[0] if mc.use_refiner else None
    parts = model.forward_parts(lookback, leads)
    rows = []
    for c in range(mc.C):
        for h in range(mc.H):
            truth = _num(dataset.values[t + h, c]) if t + h < dataset.T else ""
            rows.append([dataset.channel_names[c], t + h, h + 1, _num(parts["preliminary"][c, h]),
                         _num(parts["refined"][c, h]), truth])
    atomic_write_text(out / "predictions.csv", _csv_text(
        ["channel", "t", "step", "preliminary", "refined", "truth"], rows))


def cmd_gradcheck(cfg: dict, out: Path) -> bool:
    rows = []
    ok = True
    worst: dict[tuple[str, str, bool], float] = {}
    C, L, H, K, N, B = cfg["C"], cfg["L"], cfg["H"], cfg["K"], cfg["N"], cfg["gradcheck_batch"]
    for s in range(cfg["seed"], cfg["seed"] + cfg["gradcheck_seeds"]):
        rng = np.random.default_rng(s)
        look = rng.normal(size=(B, C, L)).cumsum(axis=-1)
        horizon = rng.normal(size=(B, C, H))
        leads = LeadTable.stack([estimate_window(apply(w, fit(w)), K) for w in look])
        for shift in (False, True):
            tc = TrainConfig(L=L, H=H, K=K, N=N, grad_through_shift=shift, state_input=cfg["state_input"])
            model = LiftModel.create(tc.model_config(C), seed=s)
            # move away from the pass-through point so every path carries gradient
            model = model.with_params({k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.params.items()})
            for mode in ("joint", "frozen-backbone"):
                for r in gradient_check(model, look, horizon, leads, mode, h=cfg["fd_step"]):
                    key = (r.name, mode, shift)
                    worst[key] = max(worst.get(key, 0.0), r.rel_error)
    for (name, mode, shift), err in sorted(worst.items()):
        passed = err <= cfg["tolerance"]
        ok &= passed
        rows.append([name, mode, str(shift).lower(), _num(err), "pass" if passed else "FAIL"])
        print(f"{'PASS' if passed else 'FAIL'} {name} mode={mode} grad_through_shift={shift} worst_rel={err:.3e}")
    atomic_write_text(out / "gradcheck.csv", _csv_text(
        ["tensor", "mode", "grad_through_shift", "worst_rel_error", "result"], rows))
    return ok


COMMANDS = {
    "synth": cmd_synth, "leads": cmd_leads, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "gradcheck": cmd_gradcheck,
}

HELP = {
    "synth": "generate a planted-lead dataset and its ground truth",
    "leads": "estimate leading indicators for every window and write the cache and count tables",
    "train": "train a model and write the checkpoint and epoch log",
    "eval": "per-horizon MSE/MAE of the backbone alone and of the refined model",
    "predict": "per-channel forecasts from one lookback window",
    "gradcheck": "finite-difference check of every trainable tensor",
}


def build_parser() -> argparse.ArgumentParser:
    def common(default):
        # global flags are accepted before or after the command name; the
        # subcommand copies must not overwrite values given before it
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--config", default=default, help="key = value settings file")
        c.add_argument("--seed", default=default, help="random seed")
        c.add_argument("--threads", default=default, help="maximum worker threads")
        c.add_argument("--out", default=default, help=f"output directory (default ${OUT_ENV} or .)")
        c.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return c

    parser = _Parser(prog="lift", description="Lead-aware forecast refinement toolkit.", parents=[common(None)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name, help=HELP[name], parents=[common(argparse.SUPPRESS)])
        for k in keys:
            if k in ("seed", "threads"):
                continue
            flag = "--" + k.replace("_", "-")
            p.add_argument(flag, dest=k, metavar=type(DEFAULTS[k]).__name__.upper(),
                           help=f"default: {DEFAULTS[k]!r}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        out = _out_dir(cfg)
        atomic_write_text(out / f"{args.command}_config.txt", format_config(cfg))
        result = COMMANDS[args.command](cfg, out)
    except (UsageError, ConfigError) as e:
        print(f"lift: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, TrainingDiverged) as e:
        print(f"lift: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LiftError, OSError, KeyError) as e:
        print(f"lift: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    if result is False:
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
