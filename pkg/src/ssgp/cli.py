"""Command-line entry point.

Every subcommand resolves one flat config from (in increasing priority) the
preset, ``--config FILE``, ``--set key=value`` overrides and the dedicated
flags, then writes it to ``<out>/resolved-config``. Passing that file back
with ``--config`` reproduces the run.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgio
from .checkpoint import restore_params
from .data.dataset import Dataset, write_meta, write_sample
from .data.formats import read_flo, read_pfm, read_pgm, read_ppm, write_flo, write_pfm
from .data.sample import TASK_CHANNELS, Sample, canonical_task
from .data.synthetic import synth_scene
from .data.transforms import prepare_input
from .evaluation import (config_hash, default_metric, evaluate, fingerprint, predict,
                         sweep_density, sweep_noise, write_sweep_csv)
from .network import ModelConfig, build_model, count_flops, count_params
from .training import TrainConfig, TrainingAborted, train

PRESETS = ("default", "toy", "guidenet")


@dataclass
class RunOptions:
    """Settings that belong to the command line rather than model or training."""

    preset: str = "default"
    split: str = "train"
    eval_split: str = "test"
    count: int = 50
    test_count: int = 0
    scene_height: int = 96
    scene_width: int = 96
    objects_min: int = 2
    objects_max: int = 6
    count_height: int = 352
    count_width: int = 1216
    margin: int = 10
    eval_limit: int = 0
    noise_kinds: list[str] = field(default_factory=lambda: ["gaussian", "laplacian"])
    noise_levels: list[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    densities: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01])
    sweep_metric: str = "auto"


MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name != "out_channels"]
TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]
OPTION_KEYS = [f.name for f in dataclasses.fields(RunOptions)]


@dataclass
class Resolved:
    model: ModelConfig
    train: TrainConfig
    options: RunOptions

    def items(self) -> dict:
        d = {k: getattr(self.options, k) for k in OPTION_KEYS}
        d.update({k: getattr(self.model, k) for k in MODEL_KEYS})
        d.update({k: getattr(self.train, k) for k in TRAIN_KEYS})
        return d

    def text(self) -> str:
        return cfgio.format_items(self.items())


class UsageError(Exception):
    pass


def _preset_model(name: str) -> dict:
    if name == "toy":
        return dict(levels=3, channels=[8, 12, 16, 24])
    if name == "guidenet":
        return dict(guidance="enc", sparse_aware=False, flat_affinity=False, refine=False)
    if name == "default":
        return {}
    raise cfgio.ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


def resolve(values: dict[str, str]) -> Resolved:
    """Split flat string values into the three config objects."""
    known = set(MODEL_KEYS) | set(TRAIN_KEYS) | set(OPTION_KEYS)
    unknown = sorted(set(values) - known)
    if unknown:
        raise cfgio.ConfigError(f"unknown config keys: {', '.join(unknown)}")
    opts = cfgio.build(RunOptions, {k: v for k, v in values.items() if k in OPTION_KEYS})
    tr = cfgio.build(TrainConfig, {k: v for k, v in values.items() if k in TRAIN_KEYS})
    types = cfgio.field_types(ModelConfig)
    model_kw = _preset_model(opts.preset)
    model_kw.update({k: cfgio.coerce(v, types[k], k) for k, v in values.items() if k in MODEL_KEYS})
    model_kw["out_channels"] = TASK_CHANNELS[tr.task]
    return Resolved(ModelConfig(**model_kw), tr, opts)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like HxW, got {text!r}") from None
    return h, w


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (fallback: $SSGP_SEED)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="cap BLAS threads; 1 gives canonical outputs")

    p = _Parser(prog="ssgp", description="Sparse-to-dense interpolation with guided propagation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--task")
    s.add_argument("--count", type=int)
    s.add_argument("--test-count", type=int)
    s.add_argument("--size", help="HxW")

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", help="checkpoint to start from")
    s.add_argument("--reset-optimizer", action="store_true",
                   help="with --resume, discard stored Adam moments")

    s = sub.add_parser("infer", parents=[common], help="densify one image + sparse input pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True, help="PPM image")
    s.add_argument("--sparse", required=True, help=".flo or PFM sparse values")
    s.add_argument("--sparse-mask", help="PGM mask (default: finite, non-zero pixels)")
    s.add_argument("--output", help="output .flo or .pfm (default: <out>/prediction.*)")

    for name, text in (("eval", "evaluate a checkpoint"),
                       ("sweep-noise", "relative error under input noise"),
                       ("sweep-density", "relative error under input sparsification")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--split")
        if name == "eval":
            s.add_argument("--error-maps", action="store_true", help="dump per-pixel error PGMs")

    s = sub.add_parser("count", parents=[common], help="parameter and FLOP counts")
    s.add_argument("--size", help="HxW (default 352x1216)")

    sub.add_parser("selftest", parents=[common], help="run oracle and gradient checks")
    return p


def _collect(args, base: dict[str, str] | None = None) -> dict[str, str]:
    values = dict(base or {})
    if args.config:
        values.update(cfgio.read_file(args.config))
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        values[k] = v
    if args.seed is not None:
        values["seed"] = str(args.seed)
    elif "seed" not in values and os.environ.get("SSGP_SEED"):
        values["seed"] = os.environ["SSGP_SEED"]
    return values


def _out_dir(args, default: Path) -> Path:
    out = Path(args.out) if args.out else default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, res: Resolved) -> None:
    (out / "resolved-config").write_text(res.text(), encoding="utf-8")


def _load_model(args, values: dict[str, str]):
    """Resolve config from the checkpoint's run directory, then flags."""
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    base = {}
    run_cfg = ckpt.parent / "resolved-config"
    if run_cfg.exists():
        base = cfgio.read_file(run_cfg)
    merged = dict(base)
    merged.update(values)
    res = resolve(merged)
    model = build_model(res.model, res.train.seed)
    restore_params(model.params, ckpt)
    return model, res


def _dataset_task(values: dict[str, str], data_task: str) -> None:
    if "task" in values:
        if canonical_task(values["task"]) != data_task:
            raise cfgio.ConfigError(f"config task {values['task']} does not match dataset task {data_task}")
    values["task"] = data_task


def cmd_synth(args) -> int:
    values = _collect(args)
    if args.task:
        values["task"] = args.task
    if args.count is not None:
        values["count"] = str(args.count)
    if args.test_count is not None:
        values["test_count"] = str(args.test_count)
    if args.size:
        h, w = _parse_size(args.size)
        values["scene_height"], values["scene_width"] = str(h), str(w)
    res = resolve(values)
    o, t = res.options, res.train
    out = _out_dir(args, Path("ssgp-data"))
    write_meta(out, t.task, height=o.scene_height, width=o.scene_width)
    for split, n, offset in ((o.split, o.count, 0), (o.eval_split, o.test_count, 1)):
        for i in range(n):
            scene_seed, input_seed = np.random.SeedSequence([t.seed, offset, i]).generate_state(2)
            s = synth_scene(int(scene_seed), o.scene_height, o.scene_width, t.task,
                            (o.objects_min, o.objects_max))
            s = prepare_input(s, t.density, t.pattern, t.noise_kind, t.noise_scale, int(input_seed))
            write_sample(out, split, f"{i:05d}", s)
    _snapshot(out, res)
    print(f"wrote {o.count} {o.split} + {o.test_count} {o.eval_split} samples to {out}")
    return 0


def cmd_train(args) -> int:
    values = _collect(args)
    data = Dataset(args.data, _split_of(values))
    _dataset_task(values, data.task)
    if args.steps is not None:
        values["total_steps"] = str(args.steps)
    if args.reset_optimizer:
        values["reset_optimizer"] = "true"
    res = resolve(values)
    out = _out_dir(args, Path("ssgp-run"))
    _snapshot(out, res)
    model = build_model(res.model, res.train.seed)
    if args.resume:
        restore_params(model.params, args.resume, reset_optimizer=res.train.reset_optimizer)
    samples = list(data)
    if not samples:
        raise FileNotFoundError(f"{args.data}: split {data.split} is empty")
    result = train(model, samples, res.train, out)
    print(f"trained {res.train.total_steps} steps, final loss {result.losses[-1]:.6g}; "
          f"checkpoint {out / 'final'}")
    return 0


def _split_of(values: dict[str, str]) -> str:
    return values.get("split", RunOptions.split)


def _eval_samples(args, res: Resolved) -> tuple[Dataset, list[Sample]]:
    split = args.split or res.options.eval_split
    root = Path(args.data)
    if not (root / split).is_dir() and args.split is None:
        print(f"note: split {split!r} missing, using {res.options.split!r}", file=sys.stderr)
        split = res.options.split
    data = Dataset(root, split)
    if data.task != res.train.task:
        raise cfgio.ConfigError(f"model task {res.train.task} does not match dataset task {data.task}")
    samples = list(data)
    if res.options.eval_limit:
        samples = samples[:res.options.eval_limit]
    if not samples:
        raise FileNotFoundError(f"{root}: split {split} is empty")
    return data, samples


def cmd_eval(args) -> int:
    model, res = _load_model(args, _collect(args))
    _, samples = _eval_samples(args, res)
    out = _out_dir(args, Path(args.ckpt).parent / "eval")
    _snapshot(out, res)
    report = evaluate(model, samples, config_hash(res.text()), res.options.margin,
                      out / "error-maps" if args.error_maps else None)
    report.write_csv(out / "metrics.csv")
    for name, value in report.values.items():
        print(f"{name:>14s} {value:12.6f} {report.units[name]}")
    if report.orr_vacuous:
        print("note: no outliers in the sparse input; orr is vacuous", file=sys.stderr)
    return 0


def cmd_sweep(args, kind: str) -> int:
    model, res = _load_model(args, _collect(args))
    _, samples = _eval_samples(args, res)
    out = _out_dir(args, Path(args.ckpt).parent / kind)
    _snapshot(out, res)
    o = res.options
    before = fingerprint(model)
    if kind == "sweep-noise":
        metric = "koe" if o.sweep_metric == "auto" else o.sweep_metric
        rows = sweep_noise(model, samples, o.noise_kinds, o.noise_levels, metric, res.train.seed)
    else:
        metric = default_metric(res.train.task) if o.sweep_metric == "auto" else o.sweep_metric
        rows = sweep_density(model, samples, o.densities, metric, res.train.seed)
    if fingerprint(model) != before:
        raise RuntimeError("sweep modified model parameters")
    write_sweep_csv(out / f"{kind.replace('-', '_')}.csv", rows)
    for r in rows:
        print(f"{r.kind:>10s} {r.level:8.3f} {r.metric} rel {r.relative_value:.4f} abs {r.absolute_value:.6f}")
    return 0


def _read_sparse(path: Path, channels: int) -> np.ndarray:
    if path.suffix == ".flo":
        return read_flo(path)
    return read_pfm(path, channels)


def cmd_infer(args) -> int:
    model, res = _load_model(args, _collect(args))
    c = model.config.out_channels
    image = read_ppm(args.image)
    values = _read_sparse(Path(args.sparse), c)
    if values.shape != (c,) + image.shape[1:]:
        raise ValueError(f"sparse input {values.shape} does not fit image {image.shape} "
                         f"with {c} channels")
    if args.sparse_mask:
        mask = read_pgm(args.sparse_mask)
    else:
        mask = (np.isfinite(values).all(axis=0) & (values != 0).any(axis=0))[None].astype(np.float32)
    values = np.where(mask > 0, np.nan_to_num(values), 0).astype(np.float32)
    full = np.ones_like(mask)
    sample = Sample(image, values, mask, values, full, res.train.task)
    pred = predict(model, sample)
    out = _out_dir(args, Path(args.ckpt).parent / "infer")
    _snapshot(out, res)
    target = Path(args.output) if args.output else out / ("prediction.flo" if c == 2 else "prediction.pfm")
    if target.suffix == ".flo":
        write_flo(target, pred)
    else:
        write_pfm(target, pred)
    print(f"wrote {target}")
    return 0


def cmd_count(args) -> int:
    values = _collect(args)
    if args.size:
        h, w = _parse_size(args.size)
        values["count_height"], values["count_width"] = str(h), str(w)
    res = resolve(values)
    out = _out_dir(args, Path("ssgp-count"))
    _snapshot(out, res)
    model = build_model(res.model, res.train.seed)
    h, w = res.options.count_height, res.options.count_width
    params, flops = count_params(model), count_flops(model, h, w)
    (out / "count.csv").write_text(f"params,flops,height,width\n{params},{flops},{h},{w}\n",
                                   encoding="utf-8")
    print(f"params {params}")
    print(f"flops {flops}")
    print(f"params_millions {params / 1e6:.4f}")
    print(f"gflops {flops / 1e9:.3f} at {h}x{w}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all
    values = _collect(args)
    res = resolve(values)
    out = _out_dir(args, Path("ssgp-selftest"))
    _snapshot(out, res)
    results = run_all(res.train.seed)
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in results]
    (out / "selftest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0 if all(ok for _, ok, _ in results) else 2


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep-noise": lambda a: cmd_sweep(a, "sweep-noise"),
    "sweep-density": lambda a: cmd_sweep(a, "sweep-density"),
    "count": cmd_count,
    "selftest": cmd_selftest,
}


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, cfgio.ConfigError) as exc:
        print(f"ssgp: usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"ssgp: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"ssgp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
