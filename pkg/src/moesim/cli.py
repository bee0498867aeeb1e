"""Command-line driver for trace generation, training, simulation and reports.

Every subcommand is deterministic given its flags and seeds: run it twice and
the output files are byte-identical. Exit codes: 0 success, 1 runtime error,
2 usage error (unknown flags, missing files, schema violations).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .cache import CacheConfig
from .core import ConfigError, ModelShape, RangeError
from .engine import (
    ReplayConfig,
    replay_traces,
    report_layers_csv,
    report_prompts_csv,
    report_summary_csv,
    sweep,
    sweep_csv,
    sweep_layers_csv,
)
from .learner import LearnerConfig, load_model, save_model, train
from .metrics import (
    activation_report,
    activation_report_csv,
    distinct_report_csv,
    label_accuracy,
    macro_f1,
    position_accuracy,
)
from .predictors import make_predictor
from .sketches import EamcConfig, build_eamc, load_eamc, save_eamc
from .traceio import (
    GeneratorConfig,
    ParseError,
    generate_synthetic,
    parse_predictions,
    parse_trace_csv,
    write_trace_csv,
)

PREDICTOR_CHOICES = (
    "oracle",
    "lru-only",
    "next-layer-all",
    "global-frequency",
    "eam-cosine",
    "external",
    "learned-linear",
)


def _add_shape_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--layers", type=int, default=27,
                        help="number of MoE layers (default 27)")
    parser.add_argument("--experts", type=int, default=64,
                        help="experts per layer (default 64)")
    parser.add_argument("--topk", type=int, default=6,
                        help="experts activated per token per layer (default 6)")


def _shape(args) -> ModelShape:
    return ModelShape(args.layers, args.experts, args.topk)


def _read_traces(path: str, shape: ModelShape):
    return parse_trace_csv(Path(path).read_bytes(), shape)


def _base(path: str) -> str:
    p = Path(path)
    return str(p.parent / p.stem) if p.suffix else str(p)


def _build_ream_list(traces, shape):
    from .core import ActivationMatrix

    return [ActivationMatrix.from_trace(t, shape) for t in traces]


def _predictor_factory(kind_flag: str, args, shape, traces):
    """Closure building fresh, identical predictor state per invocation."""
    kind = kind_flag.replace("-", "_")
    eamc = None
    if kind == "eam_cosine":
        if not args.eamc:
            raise ConfigError("--eamc is required for the eam-cosine predictor")
        eamc = load_eamc(args.eamc)
    model = None
    if kind == "learned_linear":
        if not args.model:
            raise ConfigError("--model is required for the learned-linear predictor")
        model = load_model(args.model)
    predictions = None
    if kind == "external":
        if not args.predictions:
            raise ConfigError("--predictions is required for the external predictor")
        predictions = parse_predictions(Path(args.predictions).read_bytes(), shape)
    train_traces = None
    if kind == "global_frequency":
        source = args.train_traces or args.traces
        train_traces = _read_traces(source, shape)
    if kind == "eam_cosine" and eamc.shape != shape:
        raise ConfigError(
            f"sketch collection shape {eamc.shape} does not match --layers/"
            f"--experts/--topk {shape}"
        )

    def factory():
        return make_predictor(
            kind, shape, traces=traces, train_traces=train_traces,
            eamc=eamc, model=model, predictions=predictions,
            threshold=getattr(args, "threshold", False),
        )

    return factory


def cmd_gen_traces(args) -> int:
    shape = _shape(args)
    config = GeneratorConfig(
        num_prompts=args.prompts,
        tokens_per_prompt=args.tokens,
        shape=shape,
        hot_set_size=args.hot,
        skew=args.skew,
        seed=args.seed,
        first_prompt_id=args.start_prompt_id,
    )
    traces = generate_synthetic(config)
    Path(args.out).write_bytes(write_trace_csv(traces))
    print(f"wrote {len(traces)} prompts to {args.out}")
    return 0


def cmd_build_eamc(args) -> int:
    shape = _shape(args)
    traces = _read_traces(args.traces, shape)
    config = EamcConfig(mode=args.mode, capacity=args.capacity,
                        binarize=args.binarize,
                        kmeans_max_iters=args.max_iters, seed=args.seed)
    collection = build_eamc(_build_ream_list(traces, shape), config)
    save_eamc(collection, args.out)
    print(f"wrote {len(collection)} sketches to {args.out}")
    return 0


def cmd_train_predictor(args) -> int:
    shape = _shape(args)
    traces = _read_traces(args.traces, shape)
    config = LearnerConfig(learning_rate=args.lr, epochs=args.epochs,
                           decay=args.decay, seed=args.seed)
    model = train(traces, shape, config)
    save_model(model, args.out)
    last = model.loss_history[-1] if model.loss_history else float("nan")
    print(f"trained {len(model.loss_history)} epochs, final loss {last:.6f}, "
          f"wrote {args.out}")
    return 0


def _cache_config(args) -> CacheConfig:
    if (args.capacity is None) == (args.capacity_entries is None):
        raise ConfigError(
            "exactly one of --capacity or --capacity-entries must be given"
        )
    return CacheConfig(capacity_fraction=args.capacity,
                       capacity_entries=args.capacity_entries,
                       prefetch_budget=args.budget)


def cmd_simulate(args) -> int:
    shape = _shape(args)
    traces = _read_traces(args.traces, shape)
    cache_cfg = _cache_config(args)
    factory = _predictor_factory(args.predictor, args, shape, traces)
    config = ReplayConfig(shape=shape, cache=cache_cfg,
                          warmup_tokens=args.warmup)
    report = replay_traces(traces, factory(), config, jobs=args.jobs)
    base = _base(args.out)
    capacity = cache_cfg.resolve_capacity(shape)
    Path(f"{base}.csv").write_bytes(
        report_summary_csv(report, args.predictor, capacity))
    Path(f"{base}_layers.csv").write_bytes(report_layers_csv(report))
    Path(f"{base}_prompts.csv").write_bytes(report_prompts_csv(report))
    rate = report.cache_hit_rate
    print(f"cache hit rate {rate if rate is not None else 'n/a'} "
          f"({report.cache_hits}/{report.measured_accesses}) -> {base}.csv")
    return 0


def cmd_sweep(args) -> int:
    shape = _shape(args)
    traces = _read_traces(args.traces, shape)
    try:
        capacities = [float(c) for c in args.capacities.split(",") if c]
    except ValueError:
        raise ConfigError(f"bad --capacities list {args.capacities!r}") from None
    factory = _predictor_factory(args.predictor, args, shape, traces)
    points = sweep(traces, factory, args.predictor, capacities, shape,
                   prefetch_budget=args.budget, warmup_tokens=args.warmup,
                   jobs=args.jobs)
    base = _base(args.out)
    Path(f"{base}.csv").write_bytes(sweep_csv(points))
    Path(f"{base}_layers.csv").write_bytes(sweep_layers_csv(points))
    written = [f"{base}.csv", f"{base}_layers.csv"]
    if args.figures:
        from .viz import render_sweep_figure

        written += render_sweep_figure(points, base)
    print(f"swept {len(points)} capacities -> {', '.join(written)}")
    return 0


def cmd_eval_predictions(args) -> int:
    shape = _shape(args)
    traces = _read_traces(args.traces, shape)
    table = parse_predictions(Path(args.predictions).read_bytes(), shape)
    pred_sets = []
    truth_sets = []
    layer_ids = []
    covered = 0
    for trace in traces:
        for rec in trace.records:
            if rec.token_index < args.warmup:
                continue
            key = (rec.prompt_id, rec.token_index, rec.layer_id)
            if key in table:
                covered += 1
            pred_sets.append(table.get(key, frozenset()))
            truth_sets.append(frozenset(rec.expert_ids))
            layer_ids.append(rec.layer_id)
    n = len(truth_sets)
    base = _base(args.out)
    lines = [
        "positions,coverage,position_accuracy,macro_f1,macro_f1_all_experts,"
        "label_accuracy",
        f"{n},{repr(covered / n) if n else 'n/a'},"
        f"{repr(position_accuracy(pred_sets, truth_sets))},"
        f"{repr(macro_f1(pred_sets, truth_sets, shape.num_experts))},"
        f"{repr(macro_f1(pred_sets, truth_sets, shape.num_experts, include_all=True))},"
        f"{repr(label_accuracy(pred_sets, truth_sets, shape.num_experts))}",
    ]
    Path(f"{base}.csv").write_bytes(("\n".join(lines) + "\n").encode())

    layer_lines = ["layer_id,positions,position_accuracy,macro_f1"]
    for layer in range(shape.num_layers):
        idx = [i for i, l in enumerate(layer_ids) if l == layer]
        lp = [pred_sets[i] for i in idx]
        lt = [truth_sets[i] for i in idx]
        pa = repr(position_accuracy(lp, lt)) if idx else "n/a"
        mf = repr(macro_f1(lp, lt, shape.num_experts)) if idx else "n/a"
        layer_lines.append(f"{layer},{len(idx)},{pa},{mf}")
    Path(f"{base}_layers.csv").write_bytes(("\n".join(layer_lines) + "\n").encode())
    print(f"evaluated {n} positions -> {base}.csv")
    return 0


def cmd_report_activations(args) -> int:
    shape = _shape(args)
    traces = _read_traces(args.traces, shape)
    report = activation_report(traces, shape)
    base = _base(args.out)
    Path(f"{base}.csv").write_bytes(activation_report_csv(report))
    Path(f"{base}_distinct.csv").write_bytes(distinct_report_csv(report))
    written = [f"{base}.csv", f"{base}_distinct.csv"]
    if args.figures:
        from .viz import render_activation_figures

        written += render_activation_figures(report, base,
                                             bar_layer=args.figure_layer)
    print(f"reported {report.total_activations} activations -> "
          f"{', '.join(written)}")
    return 0


_FORMATS_HELP = """\
file schemas:
  trace CSV           header `prompt_id,token_index,layer_id,expert_ids,token_id,embedding`;
                      expert_ids and embedding are |-joined lists (embedding may be empty);
                      rows sorted by (prompt_id, token_index, layer_id); LF endings; every
                      token covers every layer exactly once, token indices contiguous from 0
  predictions JSONL   one object per line: {"prompt_id": int, "token_index": int,
                      "layer_id": int, "experts": [int, ...]}; duplicate keys rejected
  eamc/model JSON     config echo plus exact decimal float arrays, reloadable bit-for-bit
  report CSVs         sweep: capacity_fraction,predictor,cache_hit_rate,prediction_hit_rate,
                      measured_accesses (+ per-layer file); simulate: summary, per-layer and
                      per-prompt files; rates carry full precision, `n/a` for 0/0
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesim",
        description="Trace-driven simulator for expert prefetching in "
                    "Mixture-of-Experts inference.",
        epilog=_FORMATS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="generate seeded synthetic traces")
    _add_shape_flags(p)
    p.add_argument("--prompts", type=int, required=True, help="number of prompts")
    p.add_argument("--tokens", type=int, required=True, help="tokens per prompt")
    p.add_argument("--hot", type=int, default=8,
                   help="per-prompt per-layer hot set size (default 8)")
    p.add_argument("--skew", type=float, default=0.9,
                   help="probability a token draws from the hot set (default 0.9)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--start-prompt-id", type=int, default=0,
                   help="first prompt id, for disjoint splits from one seed")
    p.add_argument("--out", required=True, help="output trace CSV path")
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("build-eamc",
                       help="build a sketch collection from training traces")
    _add_shape_flags(p)
    p.add_argument("--traces", required=True, help="training trace CSV")
    p.add_argument("--mode", choices=("recent", "kmeans"), default="recent",
                   help="keep most recent sketches or k-means centroids")
    p.add_argument("--capacity", type=int, default=100,
                   help="max sketches (recent) or k (kmeans), default 100")
    p.add_argument("--binarize", action="store_true",
                   help="threshold counts to 0/1 before normalization")
    p.add_argument("--max-iters", type=int, default=100,
                   help="k-means iteration cap (default 100)")
    p.add_argument("--seed", type=int, default=0, help="k-means seed")
    p.add_argument("--out", required=True, help="output sketch JSON path")
    p.set_defaults(func=cmd_build_eamc)

    p = sub.add_parser("train-predictor",
                       help="train the linear multi-label expert predictor")
    _add_shape_flags(p)
    p.add_argument("--traces", required=True, help="training trace CSV")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate")
    p.add_argument("--epochs", type=int, default=10, help="max training epochs")
    p.add_argument("--decay", type=float, default=0.9,
                   help="history decay per token (default 0.9)")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.set_defaults(func=cmd_train_predictor)

    def add_replay_flags(p, capacities: bool):
        _add_shape_flags(p)
        p.add_argument("--traces", required=True, help="trace CSV to replay")
        p.add_argument("--predictor", choices=PREDICTOR_CHOICES, required=True)
        if capacities:
            p.add_argument("--capacities", required=True,
                           help="comma-separated capacity fractions")
        else:
            p.add_argument("--capacity", type=float, default=None,
                           help="cache capacity as a fraction of all experts")
            p.add_argument("--capacity-entries", type=int, default=None,
                           help="cache capacity as an entry count")
        p.add_argument("--budget", type=int, default=6,
                       help="prefetch budget per step (default 6)")
        p.add_argument("--warmup", type=int, default=8,
                       help="warm-up tokens per prompt (default 8)")
        p.add_argument("--eamc", help="sketch collection JSON (eam-cosine)")
        p.add_argument("--model", help="trained model JSON (learned-linear)")
        p.add_argument("--predictions", help="predictions JSONL (external)")
        p.add_argument("--train-traces",
                       help="workload CSV for global-frequency counts "
                            "(defaults to --traces)")
        p.add_argument("--threshold", action="store_true",
                       help="learned-linear: predict experts with "
                            "probability > 0.5 instead of top-k")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel prompt replays (output identical for all N)")
        p.add_argument("--out", required=True, help="output CSV path or prefix")

    p = sub.add_parser("simulate",
                       help="replay traces at one capacity and emit report CSVs")
    add_replay_flags(p, capacities=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep",
                       help="replay traces across capacities; emits CSVs and, "
                            "by default, a hit-rate figure")
    add_replay_flags(p, capacities=True)
    p.add_argument("--config",
                   help="key=value file supplying defaults for any flag above")
    p.add_argument("--no-figures", dest="figures", action="store_false",
                   help="skip the PNG figure")
    p.set_defaults(func=cmd_sweep, figures=True)

    p = sub.add_parser("eval-predictions",
                       help="score a predictions JSONL against a trace")
    _add_shape_flags(p)
    p.add_argument("--traces", required=True, help="ground-truth trace CSV")
    p.add_argument("--predictions", required=True, help="predictions JSONL")
    p.add_argument("--warmup", type=int, default=0,
                   help="skip the first N tokens per prompt (default 0)")
    p.add_argument("--out", required=True, help="output metrics CSV path")
    p.set_defaults(func=cmd_eval_predictions)

    p = sub.add_parser("report-activations",
                       help="emit activation-count CSVs and, by default, "
                            "distribution figures")
    _add_shape_flags(p)
    p.add_argument("--traces", required=True, help="trace CSV")
    p.add_argument("--figure-layer", type=int, default=1,
                   help="layer for the aggregate bar chart (default 1)")
    p.add_argument("--no-figures", dest="figures", action="store_false",
                   help="skip the PNG figures")
    p.add_argument("--out", required=True, help="output CSV path or prefix")
    p.set_defaults(func=cmd_report_activations, figures=True)

    parser.sub_parsers = dict(sub.choices)
    return parser


_CONFIG_KEYS = {
    "traces", "predictor", "capacities", "budget", "warmup", "eamc", "model",
    "predictions", "train_traces", "jobs", "out", "layers", "experts", "topk",
}


def _apply_config_file(argv: list[str], parser: argparse.ArgumentParser) -> None:
    """Load key=value defaults for `sweep --config` before parsing argv."""
    if "--config" not in argv:
        return
    try:
        path = argv[argv.index("--config") + 1]
    except IndexError:
        raise ConfigError("--config requires a file path") from None
    defaults = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {i}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path} line {i}: unknown key {key!r}")
        if key in ("budget", "warmup", "jobs", "layers", "experts", "topk"):
            defaults[key] = int(value.strip())
        else:
            defaults[key] = value.strip()
    sweep_parser = parser.sub_parsers["sweep"]
    sweep_parser.set_defaults(**defaults)
    # Keys supplied by the config file are no longer required on the CLI.
    for action in sweep_parser._actions:
        if action.dest in defaults:
            action.required = False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(argv, parser)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ParseError, ConfigError, RangeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic per contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
