"""Command-line entry point: ``mvgfdr {gen-data,train,eval,sweep,gradcheck,plot}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("mvgfdr")

SECTIONS = ("model", "train", "data")
DATA_KEYS = {"train_manifest": "", "val_manifest": "", "test_manifest": ""}


class ValidationError(Exception):
    pass


def _model_fields():
    from mvgfdr.backbone import ModelConfig
    return {f.name: f for f in dataclasses.fields(ModelConfig)}


def _train_fields():
    from mvgfdr.training import TrainConfig
    return {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "model"}


def _coerce(value: str, default):
    value = value.strip()
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in value.replace(" ", "").split(",") if v)
    if default is None or isinstance(default, str):
        return value
    raise ValueError(f"cannot parse {value!r}")


def _defaults():
    from mvgfdr.backbone import ModelConfig
    from mvgfdr.training import TrainConfig
    tc = TrainConfig()
    model = ModelConfig().to_dict()
    train = {k: getattr(tc, k) for k in _train_fields()}
    model["channels"] = tuple(model["channels"])
    model["depths"] = tuple(model["depths"])
    train["betas"] = tuple(train["betas"])
    return {"model": model, "train": train, "data": dict(DATA_KEYS)}


def resolve_config(path: str | None, overrides: list[str]) -> dict:
    """Merge file values and ``key=value`` overrides into {section: {key: value}}."""
    defaults = _defaults()
    resolved = {s: dict(v) for s, v in defaults.items()}
    raw: list[tuple[str, str, str, str]] = []
    if path:
        if not Path(path).is_file():
            raise ValidationError(f"config file {path} not found")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from exc
        for section in cp.sections():
            if section not in SECTIONS:
                raise ValidationError(f"unknown config section [{section}]")
            for key, value in cp[section].items():
                raw.append((section, key, value, f"{path}:[{section}]"))
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
        else:
            owners = [s for s in SECTIONS if key in defaults[s]]
            if not owners:
                raise ValidationError(f"unknown config key {key!r}")
            # a bare key shared by several sections (seed) sets all of them
            for section in owners:
                raw.append((section, key, value, "override"))
            continue
        raw.append((section, key, value, "override"))
    for section, key, value, origin in raw:
        if section not in SECTIONS or key not in defaults[section]:
            raise ValidationError(f"unknown config key {section}.{key} ({origin})")
        try:
            resolved[section][key] = _coerce(value, defaults[section][key])
        except ValueError as exc:
            raise ValidationError(f"bad value for {section}.{key}: {exc}") from exc
    return resolved


def build_train_config(resolved: dict):
    from mvgfdr.backbone import ModelConfig
    from mvgfdr.training import TrainConfig
    try:
        model = ModelConfig(**resolved["model"])
        return TrainConfig(model=model, **resolved["train"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def run_dir(args, seed: int) -> Path:
    root = Path(os.environ.get("MVGF_RUN_DIR", "runs"))
    name = args.run_name or f"{time.strftime('%Y%m%d-%H%M%S')}_seed{seed}"
    path = root / name
    if path.exists() and any(path.iterdir()) and not args.force:
        raise ValidationError(f"run directory {path} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


@contextlib.contextmanager
def _run_log(path: Path):
    """Copy package log records into ``path/run.log`` for the duration."""
    handler = logging.FileHandler(path / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    handler.setLevel(logging.INFO)
    previous = log.level
    log.addHandler(handler)
    if log.getEffectiveLevel() > logging.INFO:
        log.setLevel(logging.INFO)
    try:
        yield
    finally:
        log.removeHandler(handler)
        log.setLevel(previous)
        handler.close()


def _echo_config(path: Path, resolved: dict) -> None:
    text = json.dumps(resolved, indent=1, sort_keys=True, default=list)
    log.info("resolved config:\n%s", text)
    (path / "config.json").write_text(text)


# subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from mvgfdr.data import generate_synthetic
    out = Path(args.out)
    if (out / "manifest.csv").exists() and not args.force:
        raise ValidationError(f"{out}/manifest.csv exists; pass --force to overwrite")
    manifest = generate_synthetic(args.n, K=args.views, G=args.classes, S=args.size, seed=args.seed, out_dir=out)
    print(f"wrote {len(manifest.rows)} samples to {manifest.path}")
    return 0


def _load(path, cfg, what):
    from mvgfdr.data import ManifestError, load_manifest
    if not path:
        raise ValidationError(f"no {what} manifest configured")
    try:
        return load_manifest(path, views=cfg.model.views, classes=cfg.model.classes, size=cfg.model.image_size)
    except ManifestError as exc:
        raise ValidationError(str(exc)) from exc


def cmd_train(args) -> int:
    from mvgfdr.training import train
    resolved = resolve_config(args.config, args.overrides)
    cfg = build_train_config(resolved)
    train_data = _load(resolved["data"]["train_manifest"], cfg, "train")
    val = resolved["data"]["val_manifest"]
    val_data = _load(val, cfg, "validation") if val else None
    out = run_dir(args, cfg.seed)
    with _run_log(out):
        _echo_config(out, resolved)
        result = train(cfg, train_data, val_data, out_dir=out, resume=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from mvgfdr.backbone import MVGFDR, CheckpointVersionError
    from mvgfdr.data import ManifestError, load_manifest
    from mvgfdr.training import evaluate
    try:
        model = MVGFDR.load(args.checkpoint)
    except (CheckpointVersionError, FileNotFoundError) as exc:
        raise ValidationError(str(exc)) from exc
    try:
        data = load_manifest(args.manifest, views=model.cfg.views, classes=model.cfg.classes,
                             size=model.cfg.image_size)
    except ManifestError as exc:
        raise ValidationError(str(exc)) from exc
    if len(data) == 0:
        raise ValidationError(f"{args.manifest} has no samples")
    report = evaluate(model, data)
    text = report.to_json(indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _parse_grid(items: list[str]) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ValidationError(f"grid entry {item!r} must look like name=v1,v2,...")
        name, values = item.split("=", 1)
        try:
            vals = [float(v) if any(ch in v for ch in ".eE") else int(v) for v in values.split(",") if v]
        except ValueError as exc:
            raise ValidationError(f"bad grid values in {item!r}") from exc
        grid[name.strip()] = vals
    if len(grid) != 2:
        raise ValidationError("sweep needs exactly two grid parameters")
    return grid


def cmd_sweep(args) -> int:
    from mvgfdr.training import resolve_param, sweep
    resolved = resolve_config(args.config, args.overrides)
    cfg = build_train_config(resolved)
    grid = _parse_grid(args.grid)
    try:
        for name in grid:
            resolve_param(name)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    train_data = _load(resolved["data"]["train_manifest"], cfg, "train")
    val_data = _load(resolved["data"]["val_manifest"] or resolved["data"]["train_manifest"], cfg, "validation")
    out = run_dir(args, cfg.seed)
    with _run_log(out):
        _echo_config(out, resolved)
        rows = sweep(grid, cfg, train_data, val_data, out_csv=out / "sweep.csv", metric=args.metric)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from mvgfdr.gradcheck import grad_check
    limits = {"linear": 1e-9, "mvgi": 1e-4, "fusion": 1e-4, "reconstruction": 1e-3, "full": 1e-3}
    comps = list(limits) if args.component == "all" else [args.component]
    failed = False
    for c in comps:
        err = grad_check(c, seed=args.seed)
        ok = err < limits[c]
        failed |= not ok
        print(f"{c}\t{err:.3e}\t{'PASS' if ok else 'FAIL'} (< {limits[c]:g})")
    return 2 if failed else 0


def cmd_plot(args) -> int:
    from mvgfdr.plotting import plot_sweep
    from mvgfdr.training import read_sweep_csv
    try:
        header, rows = read_sweep_csv(args.sweep)
    except (OSError, ValueError, StopIteration) as exc:
        raise ValidationError(f"cannot read sweep CSV {args.sweep}: {exc}") from exc
    paths = plot_sweep(header, rows, Path(args.out))
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvgfdr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_run(sp):
        sp.add_argument("--config", help="key = value config with [model] [train] [data] sections")
        sp.add_argument("--run-name", help="run directory name (default: timestamp + seed)")
        sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        sp.add_argument("overrides", nargs="*", metavar="key=value")

    g = sub.add_parser("gen-data", help="write a synthetic multi-view dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=4)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    with_run(t)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", help="write the metrics JSON here")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="grid of short runs over two hyperparameters")
    with_run(s)
    s.add_argument("--grid", nargs=2, required=True, metavar="name=v1,v2")
    s.add_argument("--metric", default="acc")
    s.set_defaults(fn=cmd_sweep)

    gc = sub.add_parser("gradcheck", help="autograd vs central differences")
    gc.add_argument("--component", default="all", choices=["all", "linear", "mvgi", "fusion", "reconstruction", "full"])
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=cmd_gradcheck)

    pl = sub.add_parser("plot", help="render a sweep CSV")
    pl.add_argument("--sweep", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
