"""Command line: ``ddflow {synth,train,register,evaluate}``.

Settings come from a flat ``key=value`` file (``--config``) overridden by
flags. Unknown keys are rejected and the effective settings are echoed to
stdout and into the output directory.

Exit codes: 0 success, 1 runtime failure (missing inputs, failed cases),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
import time
import zlib
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import flow, io, metrics, network, synth, train
from .losses import LossConfig
from .volume import DisplacementField, warp_image

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _tuple(kind):
    def parse(text):
        if isinstance(text, (tuple, list)):
            return tuple(kind(v) for v in text)
        return tuple(kind(v) for v in str(text).replace("x", ",").split(",") if v.strip())
    return parse


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none", "auto") else float(text)


def _int_list(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


_PHANTOM_DEFAULTS = synth.PhantomConfig()
_PHANTOM_TYPES = {
    "dims": _tuple(int), "spacing": _tuple(float), "supersample": int,
    "support_margin": float, "intensity_jitter": float, "blur": float, "noise_std": float,
}

# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "threads": (int, 1),
    "out": (str, ""),
    "data": (str, ""),
    "checkpoint": (str, ""),
    "fixed": (str, ""),
    "moving": (str, ""),
    "predictions": (str, ""),
    "n_cases": (int, 200),
    "split": (str, "test"),
    "train_fraction": (float, 0.8),
    "val_fraction": (float, 0.1),
    "n_scales": (int, 3),
    "channels": (_tuple(int), (8, 16, 32)),
    "corr_radius": (int, 1),
    "time_embed_dim": (int, 32),
    "mlp_hidden": (int, 16),
    "epochs": (int, 100),
    "warmup_epochs": (int, 2),
    "lr": (float, 1e-4),
    "ema_mu": (float, 0.99),
    "patience": (int, 10),
    "augment": (_bool, True),
    "resume": (str, ""),
    "ncc_window": (int, 9),
    "grad_weight": (float, 1.0),
    "steps": (int, 10),
    "eta": (_opt_float, None),
    "lambda_g": (float, 0.05),
    "use_sde": (_bool, True),
    "use_heun": (_bool, True),
    "use_ig": (_bool, True),
    "use_guidance": (_bool, True),
    "instance_opt_steps": (int, 0),
    "instance_opt_lr": (float, 0.01),
    "sweep_steps": (_int_list, ()),
}
for _f in fields(synth.PhantomConfig):
    if _f.name == "seed":
        continue
    _parser = _PHANTOM_TYPES.get(_f.name, _tuple(float))
    SCHEMA["phantom_" + _f.name] = (_parser, getattr(_PHANTOM_DEFAULTS, _f.name))


def parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigError(key, "unknown configuration key")
    parser, _ = SCHEMA[key]
    try:
        return parser(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"invalid value {text!r} ({exc})") from None


def load_config(path=None, overrides=None) -> dict:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            entries = io.parse_manifest(p.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError("config", str(exc)) from None
        for key, text in entries.items():
            cfg[key] = parse_value(key, text)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = parse_value(key, value) if isinstance(value, str) else value
    return cfg


def component_seed(root: int, component: str) -> int:
    """Deterministic per-component seed derived from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(component.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _fmt(value):
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return "none" if value is None else str(value)


def echo_config(cfg: dict, out_dir=None, extra=None) -> None:
    values = {k: _fmt(v) for k, v in sorted(cfg.items())}
    for k, v in (extra or {}).items():
        values[k] = _fmt(v)
    text = io.format_manifest(values)
    sys.stdout.write("# effective configuration\n" + text)
    if out_dir:
        io.atomic_write_text(Path(out_dir) / "config.txt", text)


def phantom_config(cfg) -> synth.PhantomConfig:
    kw = {f.name: cfg["phantom_" + f.name] for f in fields(synth.PhantomConfig) if f.name != "seed"}
    return synth.PhantomConfig(seed=component_seed(cfg["seed"], "data"), **kw)


def network_config(cfg) -> network.NetworkConfig:
    try:
        return network.NetworkConfig(cfg["n_scales"], cfg["channels"], cfg["corr_radius"], cfg["time_embed_dim"],
                                     cfg["mlp_hidden"], seed=component_seed(cfg["seed"], "init"))
    except ValueError as exc:
        raise ConfigError("network", str(exc)) from None


def loss_config(cfg) -> LossConfig:
    try:
        return LossConfig(ncc_window=cfg["ncc_window"], grad_weight=cfg["grad_weight"])
    except ValueError as exc:
        raise ConfigError("loss", str(exc)) from None


def train_config(cfg) -> train.TrainConfig:
    try:
        # a run shorter than the warmup is all warmup
        warmup = min(cfg["warmup_epochs"], cfg["epochs"])
        return train.TrainConfig(epochs=cfg["epochs"], warmup_epochs=warmup, lr=cfg["lr"],
                                 ema_mu=cfg["ema_mu"], patience=cfg["patience"], loss=loss_config(cfg),
                                 augment=cfg["augment"], seed=component_seed(cfg["seed"], "train"))
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None


def sampler_config(cfg, steps=None) -> flow.SamplerConfig:
    n = cfg["steps"] if steps is None else steps
    if n < 1:
        raise ConfigError("steps", f"must be >= 1, got {n}")
    try:
        return flow.SamplerConfig(n, cfg["eta"], cfg["lambda_g"], cfg["use_sde"], cfg["use_heun"], cfg["use_ig"],
                                  cfg["use_guidance"], seed=component_seed(cfg["seed"], "sampler"))
    except ValueError as exc:
        raise ConfigError("sampler", str(exc)) from None


def _require(cfg, key):
    if not cfg[key]:
        raise ConfigError(key, "is required")
    return cfg[key]


def _split(cfg, n):
    """Contiguous train/val/test ranges; at least one validation case whenever n >= 2."""
    n_train = min(n, int(round(n * cfg["train_fraction"])))
    n_val = min(n - n_train, int(round(n * cfg["val_fraction"])))
    if n_val == 0 and n >= 2:
        n_train = min(n_train, n - 1)
        n_val = 1
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n)


def _select(cfg, cases):
    tr, va, te = _split(cfg, len(cases))
    which = cfg["split"]
    ranges = {"train": tr, "val": va, "test": te, "all": range(len(cases))}
    if which not in ranges:
        raise ConfigError("split", f"must be one of train, val, test, all; got {which!r}")
    if not len(ranges[which]):
        raise ConfigError("split", f"the {which} split of {len(cases)} cases is empty")
    return [cases[i] for i in ranges[which]]


def _load_dataset(cfg):
    path = Path(_require(cfg, "data"))
    if not path.is_dir():
        raise FileNotFoundError(f"dataset path not found: {path}")
    return synth.load_dataset(path)


def cmd_synth(cfg) -> int:
    out = Path(_require(cfg, "out"))
    pcfg = phantom_config(cfg)
    echo_config(cfg, out, {"data_seed": pcfg.seed})
    t0 = time.perf_counter()
    cases = synth.generate_dataset(pcfg, cfg["n_cases"])
    synth.save_dataset(cases, out, pcfg)
    print(f"wrote {len(cases)} cases to {out} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_train(cfg) -> int:
    out = Path(_require(cfg, "out"))
    net_cfg, tcfg = network_config(cfg), train_config(cfg)
    cases = _load_dataset(cfg)
    tr, va, _ = _split(cfg, len(cases))
    if not len(tr) or not len(va):
        raise ConfigError("data", f"need at least 2 cases for a train/validation split, found {len(cases)}")
    echo_config(cfg, out, {"init_seed": net_cfg.seed, "train_seed": tcfg.seed,
                           "effective_warmup_epochs": tcfg.warmup_epochs})
    init = None
    if cfg["resume"]:
        params, ckpt_cfg, meta = train.load_checkpoint(cfg["resume"])
        if ckpt_cfg != net_cfg:
            raise ConfigError("resume", "checkpoint network config differs from the requested one")
        net = network.build_network(net_cfg)
        net.load_state_dict(params)
        vpairs = [train._pair(cases[i]) for i in va]
        val = train.validation_loss(net, vpairs, train.validation_noise(vpairs, tcfg.seed), tcfg)
        print(f"resumed from {cfg['resume']}: val_loss={val!r} (recorded {meta.get('val_loss')!r})")
        init = params
    t0 = time.perf_counter()
    result = train.fit([cases[i] for i in tr], [cases[i] for i in va], tcfg, net_cfg, out_dir=out, init=init)
    print(f"trained {len(result.history)} epochs in {time.perf_counter() - t0:.1f}s; "
          f"best epoch {result.best_epoch} val_loss={result.best_val!r}")
    return EXIT_OK


def _predictor(cfg):
    params, net_cfg, _ = train.load_checkpoint(_require(cfg, "checkpoint"))
    return flow.NetworkPredictor(params, net_cfg)


def _register_one(model, fixed, moving, scfg, cfg):
    t0 = time.perf_counter()
    ddf = flow.sample(model, fixed, moving, scfg, loss_config(cfg))
    if cfg["instance_opt_steps"]:
        ddf = flow.instance_optimise(fixed, moving, ddf, cfg["instance_opt_steps"], cfg["instance_opt_lr"],
                                     loss_config(cfg))
    return ddf, time.perf_counter() - t0


def cmd_register(cfg) -> int:
    out = Path(_require(cfg, "out"))
    scfg = sampler_config(cfg)
    if cfg["instance_opt_steps"] < 0:
        raise ConfigError("instance_opt_steps", "must be >= 0")
    model = _predictor(cfg)
    echo_config(cfg, out, {"sampler_seed": scfg.seed})
    if cfg["fixed"] or cfg["moving"]:
        fixed, moving = io.read_fvol(_require(cfg, "fixed")), io.read_fvol(_require(cfg, "moving"))
        ddf, secs = _register_one(model, fixed, moving, scfg, cfg)
        io.write_fvol(out / "ddf.fvol", ddf)
        io.write_fvol(out / "warped.fvol", warp_image(moving, ddf))
        io.write_manifest(out / "manifest.txt", {"seconds": repr(secs), "steps": scfg.steps})
        print(f"registered pair in {secs:.2f}s")
        return EXIT_OK
    cases = _select(cfg, _load_dataset(cfg))
    rows = {}
    for case in cases:
        ddf, secs = _register_one(model, case.ed_image, case.es_image, scfg, cfg)
        io.write_fvol(out / case.case_id / "ddf.fvol", ddf)
        io.write_fvol(out / case.case_id / "warped.fvol", warp_image(case.es_image, ddf))
        rows[case.case_id] = repr(secs)
        print(f"{case.case_id}: {secs:.2f}s")
    io.write_manifest(out / "manifest.txt", {"steps": scfg.steps, "case_ids": list(rows),
                                             **{f"seconds_{k}": v for k, v in rows.items()}})
    return EXIT_OK


def _report_tables(reports):
    names = metrics.EvalReport.field_names()
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case_id"] + names)
    for cid, rep in reports.items():
        writer.writerow([cid] + [repr(float(getattr(rep, n))) for n in names])
    summary = {"n_cases": len(reports), "cases": {cid: r.to_dict() for cid, r in reports.items()}}
    if reports:
        summary["aggregate"] = metrics.aggregate(list(reports.values()))
    return buf.getvalue(), json.dumps(summary, indent=2, sort_keys=True)


def cmd_evaluate(cfg) -> int:
    out = Path(_require(cfg, "out"))
    cases = _select(cfg, _load_dataset(cfg))
    echo_config(cfg, out)
    failed = []
    if cfg["sweep_steps"]:
        model = _predictor(cfg)
        sweep_rows = []
        for n in cfg["sweep_steps"]:
            scfg = sampler_config(cfg, n)
            reports = {}
            for case in cases:
                ddf, secs = _register_one(model, case.ed_image, case.es_image, scfg, cfg)
                reports[case.case_id] = metrics.evaluate_case(case, ddf, secs)
            agg = metrics.aggregate(list(reports.values()))
            sweep_rows.append({"steps": n, **{k: v["mean"] for k, v in agg.items()}})
            table, summary = _report_tables(reports)
            io.atomic_write_text(out / f"steps{n}" / "report.csv", table)
            io.atomic_write_text(out / f"steps{n}" / "report.json", summary)
            print(f"steps={n}: dice_mean={agg['dice_mean']['mean']:.4f} dice_fg={agg['dice_fg']['mean']:.4f} "
                  f"pct_negjac={agg['pct_negjac']['mean']:.3f}")
        buf = _io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(sweep_rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in sweep_rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        io.atomic_write_text(out / "sweep.csv", buf.getvalue())
        return EXIT_OK

    pred_dir = Path(_require(cfg, "predictions"))
    reports = {}
    for case in cases:
        path = pred_dir / case.case_id / "ddf.fvol"
        try:
            ddf = io.read_fvol(path)
            if not isinstance(ddf, DisplacementField) or ddf.dims != case.ed_image.dims:
                raise io.FormatError(f"{path} is not a displacement field matching the case grid")
            secs = 0.0
            meta_path = pred_dir / "manifest.txt"
            if meta_path.is_file():
                secs = float(io.read_manifest(meta_path).get(f"seconds_{case.case_id}", 0.0))
            reports[case.case_id] = metrics.evaluate_case(case, ddf, secs)
        except (OSError, ValueError) as exc:
            failed.append(case.case_id)
            print(f"{case.case_id}: {exc}", file=sys.stderr)
    table, summary = _report_tables(reports)
    io.atomic_write_text(out / "report.csv", table)
    io.atomic_write_text(out / "report.json", summary)
    if reports:
        agg = metrics.aggregate(list(reports.values()))
        for name in ("dice_mean", "dice_fg", "pct_negjac", "lvef_mae", "rvef_mae", "mt_mae"):
            print(f"{name}: {agg[name]['mean']:.4f} +- {agg[name]['std']:.4f}")
    if failed:
        print(f"failed cases: {','.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "register": cmd_register, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddflow", description="Flow-matching deformable registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
        return p

    p = common(sub.add_parser("synth", help="generate a phantom dataset"))
    p.add_argument("--n-cases", dest="n_cases", type=int)

    p = common(sub.add_parser("train", help="train a registration network"))
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="start from this student checkpoint")

    def sampler_flags(p):
        p.add_argument("--checkpoint")
        p.add_argument("--steps", type=int)
        p.add_argument("--eta", type=float)
        p.add_argument("--lambda-g", dest="lambda_g", type=float)
        for name in ("sde", "heun", "ig", "guidance"):
            p.add_argument(f"--no-{name}", dest=f"use_{name}", action="store_const", const=False)
        p.add_argument("--instance-opt-steps", dest="instance_opt_steps", type=int)
        p.add_argument("--instance-opt-lr", dest="instance_opt_lr", type=float)
        p.add_argument("--data")
        p.add_argument("--split", choices=("train", "val", "test", "all"))

    p = common(sub.add_parser("register", help="register image pairs with a trained network"))
    sampler_flags(p)
    p.add_argument("--fixed")
    p.add_argument("--moving")

    p = common(sub.add_parser("evaluate", help="score predicted fields against phantom ground truth"))
    sampler_flags(p)
    p.add_argument("--predictions")
    p.add_argument("--sweep-steps", dest="sweep_steps", help="comma-separated step counts, e.g. 1,2,5,10,20")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = load_config(args.config, overrides)
        if cfg["threads"] < 1:
            raise ConfigError("threads", "must be >= 1")
        if cfg["steps"] < 1:
            raise ConfigError("steps", f"must be >= 1, got {cfg['steps']}")
        torch.set_num_threads(cfg["threads"])
        return COMMANDS[args.command](cfg)
    except (ConfigError, synth.GeometryError) as exc:
        print(f"ddflow {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, io.FormatError) as exc:
        print(f"ddflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except train.TrainingDivergedError as exc:
        print(f"ddflow {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
