"""Command-line surface: train, eval, ablate, noise-exp, synth, export.

Flags mirror RunConfig fields; `--config file.json` loads a config and any
flags given on top override it. Exit codes: 0 ok, 1 config error, 2 data
error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from .diffusion import ScheduleError
from .harness import (
    ConfigError,
    DivergenceError,
    RunConfig,
    TrainedModel,
    export_embeddings,
    run_ablation,
    run_noise_robustness,
    train,
)
from .hetgraph import GraphError, generate_synthetic, write_dataset_files
from .numerics import ShapeError


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--task", choices=("link", "node"))
    p.add_argument("--edge-file")
    p.add_argument("--schema-file")
    p.add_argument("--label-file")
    p.add_argument("--labeled-type")
    p.add_argument("--synth-users", type=int)
    p.add_argument("--synth-items", type=int)
    p.add_argument("--synth-aux", type=int)
    p.add_argument("--synth-density", type=float)
    p.add_argument("--synth-fidelity", type=float)
    p.add_argument("--synth-seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--activation", choices=("leaky_relu", "identity"))
    p.add_argument("--pooling", choices=("mean", "sum"))
    p.add_argument("--steps", type=int, help="diffusion steps T")
    p.add_argument("--noise-scale", type=float,
                   help="scalar S mapped to retention endpoints (1-S, 1-10S)")
    p.add_argument("--b-max", type=float)
    p.add_argument("--b-min", type=float)
    p.add_argument("--infer-steps", type=int)
    p.add_argument("--per-row-t", action="store_true", default=None)
    p.add_argument("--lam", type=float, help="denoising loss weight")
    p.add_argument("--l2", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("full", "-D", "-U", "-I", "-H", "DAE"))
    p.add_argument("--k", type=int)
    p.add_argument("--report", help="write the machine-readable report here")


def _deep_merge(base, extra):
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def build_config(args) -> RunConfig:
    data = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    over = {}

    def put(key, value):
        if value is not None:
            over[key] = value

    def put_sub(group, key, value):
        if value is not None:
            over.setdefault(group, {})[key] = value

    put("task", args.task)
    put("edge_file", args.edge_file)
    put("schema_file", args.schema_file)
    put("label_file", args.label_file)
    put("labeled_type", args.labeled_type)
    for name, value in (("users", args.synth_users), ("items", args.synth_items),
                        ("aux_relations", args.synth_aux),
                        ("density", args.synth_density),
                        ("fidelity", args.synth_fidelity), ("seed", args.synth_seed)):
        if value is not None:
            over.setdefault("synthetic", data.get("synthetic") or {})
            over["synthetic"][name] = value
    put_sub("encoder", "dim", args.dim)
    put_sub("encoder", "layers", args.layers)
    put_sub("encoder", "activation", args.activation)
    put_sub("encoder", "pooling", args.pooling)
    put_sub("diffusion", "steps", args.steps)
    if args.noise_scale is not None:
        put_sub("diffusion", "b_max", max(1e-12, 1.0 - args.noise_scale))
        put_sub("diffusion", "b_min",
                min(max(1e-12, 1.0 - args.noise_scale),
                    max(1e-12, 1.0 - 10.0 * args.noise_scale)))
    put_sub("diffusion", "b_max", args.b_max)
    put_sub("diffusion", "b_min", args.b_min)
    put_sub("diffusion", "infer_steps", args.infer_steps)
    put_sub("diffusion", "per_row_t", args.per_row_t)
    put_sub("loss", "lam", args.lam)
    put_sub("loss", "l2", args.l2)
    put("lr", args.lr)
    put("batch_size", args.batch_size)
    put("epochs", args.epochs)
    put("eval_every", args.eval_every)
    put("seed", args.seed)
    put("variant", args.variant)
    put("k", args.k)
    merged = _deep_merge(data, over)
    if "synthetic" not in merged and not merged.get("edge_file"):
        merged["synthetic"] = {}  # default desk-scale dataset
    try:
        return RunConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from None


def _emit(report, path):
    for line in report.lines():
        print(line)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())


def cmd_train(args):
    cfg = build_config(args)
    model, trace = train(cfg)
    report = trace.evals[-1]
    _emit(report, args.report)
    if args.save:
        model.save(args.save)
        print(f"model={args.save}")
    if args.export:
        export_embeddings(model, args.export, table=args.table)
        print(f"embeddings={args.export}")
    return 0


def cmd_eval(args):
    model = TrainedModel.load(args.model)
    report = model.evaluate()  # "final" tag: matches the post-training report
    _emit(report, args.report)
    return 0


def cmd_ablate(args):
    cfg = build_config(args)
    variants = tuple(args.variants.split(",")) if args.variants else None
    reports = run_ablation(cfg, variants=variants) if variants \
        else run_ablation(cfg)
    for variant, report in reports.items():
        metrics = " ".join(f"{k}={v}" for k, v in report.metrics.items())
        print(f"variant={variant} {metrics}")
    if args.report:
        payload = {v: r.reproducible_payload() for v, r in reports.items()}
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return 0


def cmd_noise_exp(args):
    cfg = build_config(args)
    ratios = [float(r) for r in args.ratios.split(",")]
    result = run_noise_robustness(cfg, ratios)
    print("retention (% of clean metric) per auxiliary relation and noise ratio")
    for line in result.table_lines():
        print(line)
    if args.report:
        payload = {
            "clean": result.clean.reproducible_payload(),
            "ratios": list(result.ratios),
            "retention": {f"{rel}@{ratio}": cell
                          for (rel, ratio), cell in result.retention.items()},
        }
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return 0


def cmd_synth(args):
    graph, labels = generate_synthetic(args.users, args.items, args.aux,
                                       args.density, args.fidelity, args.seed)
    paths = write_dataset_files(graph, labels, args.out_dir)
    for kind, path in paths.items():
        print(f"{kind}={path}")
    print(f"fingerprint={graph.fingerprint()}")
    return 0


def cmd_export(args):
    model = TrainedModel.load(args.model)
    export_embeddings(model, args.out, table=args.table)
    print(f"embeddings={args.out}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="hgdiff",
        description="heterogeneous graph learning with latent diffusion denoising")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and report metrics")
    _add_config_flags(p)
    p.add_argument("--save", help="write trained parameters to this .npz file")
    p.add_argument("--export", help="write embeddings to this text file")
    p.add_argument("--table", default="fused")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the model-variant ablation suite")
    _add_config_flags(p)
    p.add_argument("--variants", help="comma-separated subset of variants")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("noise-exp", help="noise-robustness retention experiment")
    _add_config_flags(p)
    p.add_argument("--ratios", default="0,0.1,0.3,0.5")
    p.set_defaults(fn=cmd_noise_exp)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--aux", type=int, default=2)
    p.add_argument("--density", type=float, default=0.05)
    p.add_argument("--fidelity", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("export", help="export embeddings from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table", default="fused")
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ScheduleError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (GraphError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
