"""Command-line front end.

Verbs: synth, train, evaluate, predict, summary, gradcheck, baseline-ha.
Run configs are strict JSON ({model, train, data, ablation} sections, unknown
keys rejected); ``--set section.key=value`` applies dotted overrides, so the
ablation variants are one flag away from a base config.

Exit codes: 0 ok, 2 usage/config error, 3 I/O failure, 4 checkpoint/config
mismatch, 5 numerical failure. Output files start with a header line
recording version, config digest and seed. STFLOW_THREADS caps BLAS threads
(default 1, for bit-reproducible runs).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

GRADCHECK_THRESHOLD = 1e-5

_SECTION_KEYS = {
    "model": {"p", "depth", "grid", "base_filters", "bottleneck_channels",
              "kernel", "sampler_kernel", "cmu_kernel", "attention_ratio",
              "embed_width", "long_skip", "attention", "external", "seed"},
    "train": {"batch_size", "learning_rate", "epochs", "seed", "seeds"},
    "data": {"dir", "split_boundary"},
    "ablation": {"p", "long_skip", "attention", "external"},
}
_DATA_DEFAULTS = {"dir": None, "split_boundary": 0.8}


class UsageError(ValueError):
    pass


def load_run_config(path: str | None, overrides=()) -> dict:
    """Parse + validate a run config, then apply dotted overrides."""
    cfg = {"model": {}, "train": {}, "data": dict(_DATA_DEFAULTS),
           "ablation": {}}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: top level must be an object")
        unknown = set(raw) - set(_SECTION_KEYS)
        if unknown:
            raise UsageError(f"{path}: unknown sections {sorted(unknown)}")
        for section, values in raw.items():
            if not isinstance(values, dict):
                raise UsageError(f"{path}: section {section!r} must be an "
                                 "object")
            bad = set(values) - _SECTION_KEYS[section]
            if bad:
                raise UsageError(f"{path}: unknown keys in {section!r}: "
                                 f"{sorted(bad)}")
            cfg[section].update(values)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTION_KEYS or key not in _SECTION_KEYS[section]:
            raise UsageError(f"--set: unknown option {dotted!r}")
        try:
            cfg[section][key] = json.loads(value)
        except json.JSONDecodeError:
            cfg[section][key] = value
    return cfg


def build_model_config(cfg: dict):
    """model section + ablation overrides -> ModelConfig."""
    from .model import ModelConfig
    merged = dict(cfg["model"])
    for key, value in cfg["ablation"].items():
        merged[key] = value
    if isinstance(merged.get("grid"), str):
        merged["grid"] = _parse_grid(merged["grid"])
    return ModelConfig.from_dict(merged)


def _parse_grid(text: str):
    try:
        n, m = text.lower().split("x")
        return (int(n), int(m))
    except ValueError:
        raise UsageError(f"grid must look like 16x8, got {text!r}") from None


def _header(seed, digest) -> str:
    from . import __version__
    return f"# stflow {__version__} config={digest[:12]} seed={seed}\n"


def _write(path, header, body):
    with open(path, "w") as fh:
        fh.write(header)
        fh.write(body)


def _prepare(cfg, p):
    from .data import load_dataset, make_samples
    if cfg["data"]["dir"] is None:
        raise UsageError("no dataset directory configured (data.dir)")
    ds, ext = load_dataset(cfg["data"]["dir"])
    return ds, ext, make_samples(ds, ext, p, cfg["data"]["split_boundary"])


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    from .data import SynthSpec, synth_generate
    spec = SynthSpec(grid=_parse_grid(args.grid), days=args.days,
                     period_minutes=args.period, noise=args.noise,
                     hotspots=args.hotspots, amplitude=args.amplitude)
    synth_generate(spec, args.seed, args.out)
    steps = args.days * (1440 // args.period)
    print(f"wrote {steps} frames ({args.grid} grid, {args.period} min "
          f"period, noise {args.noise}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .model import build, save
    from .trainer import TrainConfig, evaluate, train
    cfg = load_run_config(args.config, args.set or ())
    mcfg = build_model_config(cfg)
    tcfg = TrainConfig(**cfg["train"])
    ds, ext, prep = _prepare(cfg, mcfg.p)
    model = build(
        type(mcfg).from_dict({**mcfg.to_dict(), "seed": tcfg.seed}))
    losses = train(model, prep.train, tcfg)
    metrics = evaluate(model, prep.test, prep.normalizer)
    os.makedirs(args.out, exist_ok=True)
    digest = model.cfg.digest()
    head = _header(tcfg.seed, digest)
    save(model, os.path.join(args.out, "checkpoint.bin"))
    _write(os.path.join(args.out, "loss.csv"), head,
           "epoch,loss\n" + "".join(f"{i},{v:.8f}\n"
                                    for i, v in enumerate(losses)))
    _write(os.path.join(args.out, "metrics.csv"), head,
           "rmse,mape,ape\n"
           f"{metrics['rmse']:.6f},{metrics['mape']:.6f},"
           f"{metrics['ape']:.6f}\n")
    run_info = {"config": cfg["model"], "ablation": cfg["ablation"],
                "train": {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in tcfg.__dict__.items()},
                "data": cfg["data"], "digest": digest}
    with open(os.path.join(args.out, "run.json"), "w") as fh:
        json.dump(run_info, fh, indent=2, sort_keys=True)
    print(f"final training loss {losses[-1]:.6f}; test rmse "
          f"{metrics['rmse']:.4f} mape {metrics['mape']:.4f} "
          f"ape {metrics['ape']:.4f}")
    return 0


def _load_checkpoint_with_context(args):
    from .model import load
    model = load(args.checkpoint)
    split = getattr(args, "split", None)
    if split is None:
        run_path = os.path.join(os.path.dirname(args.checkpoint) or ".",
                                "run.json")
        if os.path.exists(run_path):
            with open(run_path) as fh:
                split = json.load(fh)["data"]["split_boundary"]
        else:
            split = _DATA_DEFAULTS["split_boundary"]
    if isinstance(split, str):
        try:
            split = float(split)
        except ValueError:
            pass
    return model, split


def cmd_evaluate(args) -> int:
    from .data import load_dataset, make_samples
    from .trainer import evaluate
    model, split = _load_checkpoint_with_context(args)
    ds, ext = load_dataset(args.data)
    prep = make_samples(ds, ext, model.cfg.p, split)
    metrics = evaluate(model, prep.test, prep.normalizer)
    print(f"rmse {metrics['rmse']:.6f}")
    print(f"mape {metrics['mape']:.6f}")
    print(f"ape {metrics['ape']:.6f}")
    return 0


def cmd_predict(args) -> int:
    from datetime import datetime
    from .data import (DataFormatError, external_vector, load_dataset,
                       make_samples)
    model, split = _load_checkpoint_with_context(args)
    ds, ext = load_dataset(args.data)
    prep = make_samples(ds, ext, model.cfg.p, split)
    when = datetime.fromisoformat(args.at)
    t = ds.index_of(when)
    p = model.cfg.p
    if t < p:
        raise DataFormatError(
            f"prediction at {args.at} needs {p} preceding frames, "
            f"only {t} available")
    if t >= ds.T:
        raise DataFormatError(f"no external factors recorded for {args.at}; "
                              "dataset ends earlier")
    frames = prep.normalizer.normalize(ds.frames_nhwc()[t - p:t])
    evec = external_vector(when, ext.temperature[t], ext.wind_speed[t],
                           ext.condition[t], ext.holiday[t], prep.weather)
    pred = model.forward(frames[None], evec[None], train=False).data[0]
    pred = prep.normalizer.denormalize(pred)
    sys.stdout.write(_header(model.cfg.seed, model.cfg.digest()))
    sys.stdout.write("row,col,inflow,outflow\n")
    n, m = model.cfg.grid
    for i in range(n):
        for j in range(m):
            sys.stdout.write(f"{i},{j},{pred[i, j, 0]:.6f},"
                             f"{pred[i, j, 1]:.6f}\n")
    return 0


def cmd_summary(args) -> int:
    from .model import summarize
    cfg = load_run_config(args.config, args.set or ())
    mcfg = build_model_config(cfg)
    summary = summarize(mcfg)
    print(summary.to_text())
    if args.csv:
        _write(args.csv, _header(mcfg.seed, mcfg.digest()), summary.to_csv())
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np
    from .model import Model
    from .trainer import gradcheck_model
    cfg = load_run_config(args.config, args.set or ())
    mcfg = build_model_config(cfg)
    model = Model(mcfg, dtype=np.float64)
    err = gradcheck_model(model, n_coords=args.samples, seed=mcfg.seed)
    print(f"max relative gradient error over {args.samples} sampled "
          f"parameters: {err:.3e} (threshold {GRADCHECK_THRESHOLD:.0e})")
    if err >= GRADCHECK_THRESHOLD:
        print("gradcheck FAILED", file=sys.stderr)
        return 5
    return 0


def cmd_baseline_ha(args) -> int:
    from .data import load_dataset
    from .trainer import ha_baseline
    ds, _ = load_dataset(args.data)
    split = args.split if args.split is not None else \
        _DATA_DEFAULTS["split_boundary"]
    if isinstance(split, str):
        try:
            split = float(split)
        except ValueError:
            pass
    metrics = ha_baseline(ds, split)
    print(f"rmse {metrics['rmse']:.6f}")
    print(f"mape {metrics['mape']:.6f}")
    print(f"ape {metrics['ape']:.6f}")
    return 0


# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="stflow",
        description="grid flow prediction: synthesis, training, evaluation, "
                    "baselines, model accounting")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="16x8")
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--period", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--hotspots", type=int, default=3)
    p.add_argument("--amplitude", type=float, default=100.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict one frame at a timestamp")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--at", required=True, metavar="TIMESTAMP")
    p.add_argument("--split", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("summary", help="per-layer parameter and FLOP table")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("baseline-ha", help="historical-average baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.set_defaults(func=cmd_baseline_ha)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    from .data import DataFormatError
    from .model import CheckpointError, ConfigError
    from .trainer import NumericalError
    from .tensor import GradcheckNaNError
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        if isinstance(exc, (DataFormatError,)):
            print(f"error: {exc}", file=sys.stderr)
            return 3
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (NumericalError, GradcheckNaNError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
