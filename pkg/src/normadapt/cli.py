"""Command-line surface: train, sweep-lr, compare, budget, similarity,
grad-stats, normcheck.

Only stdlib imports happen at module level; NORMADAPT_THREADS must take
effect before numpy loads its BLAS backend.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

CONFIG_KEYS = ("strategy", "lr", "steps", "batch", "warmup_ratio",
               "weight_decay", "seed", "preset", "mixture", "norm_kind",
               "lora_rank", "include_defaults", "outdir")

_COERCE = {
    "lr": float, "warmup_ratio": float, "weight_decay": float,
    "steps": int, "batch": int, "seed": int, "lora_rank": int,
}


def _parse_bool(value):
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _parse_mixture(value):
    parts = [float(w) for w in value.split(",")]
    if len(parts) != 3:
        raise ValueError(f"mixture needs 3 comma-separated weights, got {value!r}")
    return tuple(parts)


def parse_config_file(path):
    """Flat `key = value` text; # starts a comment; keys restricted."""
    opts = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected `key = value`")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r} "
                             f"(known: {', '.join(CONFIG_KEYS)})")
        try:
            if key == "mixture":
                opts[key] = _parse_mixture(value)
            elif key == "include_defaults":
                opts[key] = _parse_bool(value)
            elif key in _COERCE:
                opts[key] = _COERCE[key](value)
            else:
                opts[key] = value
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: {err}") from None
    return opts


def _cap_threads():
    cap = os.environ.get("NORMADAPT_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = cap


def _merge(args, file_keys):
    """Config-file values first, command-line overrides on top."""
    opts = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for key in file_keys:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            opts[key] = flag
    return opts


def _strategy_from_opts(opts):
    from .strategies import TuningStrategy
    return TuningStrategy(opts.get("strategy", "layernorm"),
                          lora_rank=opts.get("lora_rank", 32),
                          include_defaults=opts.get("include_defaults", True))


def _build_or_load(opts, init_from):
    from .model import ModelConfig, build, load_checkpoint
    if init_from:
        return load_checkpoint(init_from)
    kwargs = {}
    if "norm_kind" in opts:
        kwargs["norm_kind"] = opts["norm_kind"]
    return build(ModelConfig(**kwargs), seed=opts.get("seed", 0))


def _datasets(opts, task, model, n_train, n_eval):
    from . import data as dt
    from .model import VisionStub
    seed = opts.get("seed", 0)
    mixture = opts.get("mixture", (1 / 3, 1 / 3, 1 / 3))
    seq_len = 20 if task == "text-pretrain" else 12
    stub = None
    if task == "mm-adapt":
        stub = VisionStub(d_visual=model.config.d_visual,
                          n_slots=4 * 16, seed=dt._DEFAULT_STUB_SEED)
    make = lambda n, s: dt.generate(
        dt.TaskSpec(kind=task, n_samples=n, seq_len=seq_len, mixture=mixture,
                    seed=s), stub)
    return make(n_train, seed + 1000), make(n_eval, seed + 9999)


def cmd_train(args):
    from . import training as tr
    opts = _merge(args, ("strategy", "lr", "steps", "batch", "warmup_ratio",
                         "weight_decay", "seed", "norm_kind", "lora_rank",
                         "include_defaults", "outdir", "mixture"))
    model = _build_or_load(opts, args.init_from)
    train_ds, eval_ds = _datasets(opts, args.task, model,
                                  args.n_samples, args.n_eval)
    cfg = tr.TrainConfig(lr=opts.get("lr", 1e-3), steps=opts.get("steps", 200),
                         batch=opts.get("batch", 32),
                         warmup_ratio=opts.get("warmup_ratio", 0.03),
                         weight_decay=opts.get("weight_decay", 0.0),
                         seed=opts.get("seed", 0),
                         eval_interval=args.eval_interval)
    outdir = opts.get("outdir", "runs/train")
    record = tr.train(model, _strategy_from_opts(opts), train_ds, eval_ds, cfg,
                      outdir=outdir)
    print(json.dumps({"strategy": record.selection["strategy"],
                      "final_eval": record.final_eval,
                      "aborted": record.aborted,
                      "outdir": outdir}, indent=2))
    return 1 if record.aborted else 0


def cmd_sweep_lr(args):
    from . import training as tr
    opts = _merge(args, ("strategy", "steps", "batch", "seed", "norm_kind",
                         "lora_rank", "include_defaults", "outdir", "mixture"))
    grid = args.grid
    if grid not in tr.LR_GRIDS:
        grid = [float(x) for x in grid.split(",")]
    base = _build_or_load(opts, args.init_from)
    train_ds, eval_ds = _datasets(opts, args.task, base,
                                  args.n_samples, args.n_eval)
    cfg = tr.TrainConfig(lr=1.0, steps=opts.get("steps", 100),
                         batch=opts.get("batch", 32), seed=opts.get("seed", 0))
    result = tr.sweep_lr(grid, lambda: tr.clone_model(base),
                         _strategy_from_opts(opts), train_ds, eval_ds, cfg)
    for lr, loss in result.rows:
        print(f"{lr:.1e}\t{loss:.6f}")
    print(json.dumps({"best_lr": result.best_lr, "best_loss": result.best_loss}))
    return 0


def cmd_compare(args):
    from . import training as tr
    opts = _merge(args, ("batch", "seed", "norm_kind", "outdir", "mixture"))
    protocol = tr.AdaptProtocol(
        seed=opts.get("seed", 0), batch=opts.get("batch", 32),
        mixture=opts.get("mixture", (1 / 3, 1 / 3, 1 / 3)),
        pretrain_steps=args.pretrain_steps,
        connector_steps=args.connector_steps, adapt_steps=args.adapt_steps,
        stub_mode=args.stub_mode, noise_std=args.noise_std)
    strategies = args.strategies.split(",")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    base = None
    if args.init_from:
        from .model import load_checkpoint
        base = load_checkpoint(args.init_from)
    report = tr.compare_strategies(strategies, protocol, seeds=seeds, base=base)
    outdir = Path(opts.get("outdir", "runs/compare"))
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "compare.csv", "w", newline="") as f:
        report.to_csv(f)
    (outdir / "compare.json").write_text(report.to_json())
    medians = {name: report.median_gain(name)
               for name in ["frozen"] + strategies}
    print(json.dumps({"median_gain": medians, "outdir": str(outdir)}, indent=2))
    return 0


def cmd_budget(args):
    from . import budget as bg
    if args.reference_table:
        print("preset,strategy,computed,reference,diff,tolerance,within,gated")
        for row in bg.reference_table(args.bytes_per_param):
            print(f"{row.preset},{row.strategy},{row.computed:.6f},"
                  f"{row.reference},{row.diff:.6f},{row.tolerance},"
                  f"{row.within},{row.gated}")
        return 0
    opts = _merge(args, ("strategy", "preset", "lora_rank", "include_defaults"))
    name = opts.get("preset", "llama7b")
    if name not in bg.PRESETS:
        raise SystemExit(f"unknown preset {name!r} (known: "
                         f"{', '.join(sorted(bg.PRESETS))})")
    preset = bg.PRESETS[name]
    report = bg.count(preset, _strategy_from_opts(opts), args.bytes_per_param)
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def cmd_similarity(args):
    from . import analysis as an
    from . import data as dt
    from .model import VisionStub, load_checkpoint

    def probe_report(ckpt, label):
        model = load_checkpoint(ckpt)
        task = args.task
        stub = None
        if task == "mm-adapt":
            stub = VisionStub(d_visual=model.config.d_visual, n_slots=4 * 16,
                              seed=dt._DEFAULT_STUB_SEED)
        spec = dt.TaskSpec(kind=task, n_samples=args.probe_samples,
                           seq_len=20 if task == "text-pretrain" else 12,
                           seed=args.probe_seed)
        ds = dt.generate(spec, stub)
        return an.layer_similarity(model, ds.tokens, ds.features,
                                   probe={"label": label,
                                          "seed": args.probe_seed,
                                          "samples": args.probe_samples})

    reports = [probe_report(args.ckpt, Path(args.ckpt).stem)]
    if args.ckpt_b:
        reports.append(probe_report(args.ckpt_b, Path(args.ckpt_b).stem))

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = []
    for rep in reports:
        csv_path = outdir / f"similarity_{rep.probe['label']}.csv"
        with open(csv_path, "w") as f:
            for row in rep.matrix:
                f.write(",".join(repr(float(x)) for x in row) + "\n")
        summary.append({"label": rep.probe["label"], "average": rep.average,
                        "n_layers": rep.n_layers, "matrix_csv": str(csv_path)})
    payload = {"reports": summary}
    if len(reports) == 2:
        diff = an.compare_similarity(reports)[0]
        payload["relative_diff"] = diff.relative_diff
    print(json.dumps(payload, indent=2))
    return 0


def cmd_grad_stats(args):
    from . import training as tr
    from .analysis import GradTrace
    opts = _merge(args, ("strategy", "lr", "steps", "batch", "seed",
                         "norm_kind", "lora_rank", "include_defaults",
                         "outdir", "mixture"))
    model = _build_or_load(opts, args.init_from)
    train_ds, eval_ds = _datasets(opts, args.task, model,
                                  args.n_samples, args.n_eval)
    cfg = tr.TrainConfig(lr=opts.get("lr", 1e-3), steps=opts.get("steps", 50),
                         batch=opts.get("batch", 32), seed=opts.get("seed", 0))
    trace = GradTrace()
    tr.train(model, _strategy_from_opts(opts), train_ds, eval_ds, cfg,
             trace=trace, trace_every=args.trace_every)
    if args.outdir:
        outdir = Path(args.outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "gradtrace.csv", "w", newline="") as f:
            trace.to_csv(f)
        print(str(outdir / "gradtrace.csv"))
    else:
        trace.to_csv(sys.stdout)
    return 0


def cmd_normcheck(args):
    import numpy as np
    from . import normmath as nm
    rng = np.random.default_rng(args.seed)

    max_defect = 0.0
    for n in range(3, 129):
        inst = nm.ln_stats(rng.standard_normal(n))
        max_defect = max(max_defect, nm.check_projection(inst).max_defect())

    violations = 0
    draws = 0
    for n in (8, 64, 512):
        for _ in range(args.trials):
            inst = nm.ln_stats(rng.standard_normal(n))
            if not nm.variance_bound_check(inst, rng.standard_normal(n)).holds:
                violations += 1
            draws += 1

    grid = [int(x) for x in args.n_grid.split(",")]
    study = nm.variance_scaling_study(grid, sampler=args.sampler,
                                      trials=args.trials, seed=args.seed)
    decreasing = all(b < a for a, b in
                     zip(study.median_var, study.median_var[1:]))
    payload = {
        "projection_max_defect": max_defect,
        "bound_violations": violations,
        "bound_draws": draws,
        "n_grid": grid,
        "median_var": study.median_var,
        "loglog_slope": study.loglog_slope,
        "strictly_decreasing": decreasing,
        "ok": bool(max_defect <= 1e-10 and violations == 0 and decreasing),
    }
    print(json.dumps(payload, indent=2))
    return 0 if payload["ok"] else 1


def _add_run_options(p, with_lr=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--strategy", default=None)
    if with_lr:
        p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--warmup-ratio", dest="warmup_ratio", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--norm-kind", dest="norm_kind", default=None,
                   choices=(None, "standard", "rms"))
    p.add_argument("--lora-rank", dest="lora_rank", type=int, default=None)
    p.add_argument("--include-defaults", dest="include_defaults", default=None,
                   type=_parse_bool)
    p.add_argument("--mixture", type=_parse_mixture, default=None)
    p.add_argument("--outdir", default=None)
    p.add_argument("--task", default="mm-adapt",
                   choices=("text-pretrain", "mm-adapt"))
    p.add_argument("--init-from", dest="init_from", default=None,
                   help="checkpoint to start from")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=2048)
    p.add_argument("--n-eval", dest="n_eval", type=int, default=256)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="normadapt",
        description="selective-parameter tuning lab for visual-prefix "
                    "transformers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage")
    _add_run_options(p)
    p.add_argument("--eval-interval", dest="eval_interval", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-lr", help="grid-search the learning rate")
    _add_run_options(p, with_lr=False)
    p.add_argument("--grid", default="paper-grid",
                   help="named grid or comma-separated values")
    p.set_defaults(func=cmd_sweep_lr)

    p = sub.add_parser("compare", help="two-stage strategy comparison")
    p.add_argument("--config")
    p.add_argument("--strategies",
                   default="finetune,layernorm,layernorm-simple")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--norm-kind", dest="norm_kind", default=None)
    p.add_argument("--mixture", type=_parse_mixture, default=None)
    p.add_argument("--outdir", default=None)
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int,
                   default=2000)
    p.add_argument("--connector-steps", dest="connector_steps", type=int,
                   default=200)
    p.add_argument("--adapt-steps", dest="adapt_steps", type=int, default=400)
    p.add_argument("--stub-mode", dest="stub_mode", default="aligned",
                   choices=("aligned", "unaligned"))
    p.add_argument("--noise-std", dest="noise_std", type=float, default=0.05)
    p.add_argument("--init-from", dest="init_from", default=None,
                   help="pretrained base checkpoint (skips stage 0)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("budget", help="analytic trainable-parameter accounting")
    p.add_argument("--config")
    p.add_argument("--preset", default=None)
    p.add_argument("--strategy", default=None)
    p.add_argument("--lora-rank", dest="lora_rank", type=int, default=None)
    p.add_argument("--include-defaults", dest="include_defaults", default=None,
                   type=_parse_bool)
    p.add_argument("--bytes-per-param", dest="bytes_per_param", type=int,
                   default=4)
    p.add_argument("--reference-table", action="store_true",
                   help="emit the full reference comparison table as CSV")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("similarity", help="cross-layer representation cosine")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ckpt-b", dest="ckpt_b", default=None)
    p.add_argument("--task", default="mm-adapt",
                   choices=("text-pretrain", "mm-adapt"))
    p.add_argument("--probe-seed", dest="probe_seed", type=int, default=17)
    p.add_argument("--probe-samples", dest="probe_samples", type=int, default=64)
    p.add_argument("--outdir", default="runs/similarity")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("grad-stats", help="trace per-step norm-gradient stats")
    _add_run_options(p)
    p.add_argument("--trace-every", dest="trace_every", type=int, default=10)
    p.set_defaults(func=cmd_grad_stats)

    p = sub.add_parser("normcheck", help="verify normalization backward math")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--n-grid", dest="n_grid", default="16,64,256,1024")
    p.add_argument("--sampler", default="softmax-xent",
                   choices=("softmax-xent", "gaussian", "in-kernel"))
    p.set_defaults(func=cmd_normcheck)

    return parser


def main(argv=None):
    _cap_threads()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
