"""Single command-line entry point for the whole pipeline.

Subcommands: gen-data, train, sparse-train, prune, finetune, eval,
report-cost, hmi-run, graph-validate.  A JSON config file supplies
defaults; explicit flags win.  Exit codes: 0 success, 1 validation/usage
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import (AdapterError, ConfigError, GraphError, InputError,
                     SlimkitError, StreamError, TrainingError)
from .util import atomic_write_json, child_seed

VALIDATION_ERRORS = (ConfigError, GraphError, InputError, StreamError,
                     FileNotFoundError, NotADirectoryError)
RUNTIME_ERRORS = (TrainingError, AdapterError, SlimkitError, OSError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


def _cfg(args, block, key, default):
    """Flag value if given, else config-file value, else default."""
    v = getattr(args, key.replace("-", "_"), None)
    if v is not None:
        return v
    cfg = args._config.get(block, {}) if block else args._config
    return cfg.get(key, default)


def _ensure_out(args):
    out = _cfg(args, None, "out", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _seed(args):
    return int(_cfg(args, None, "seed", 0))


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_data(args):
    from .bench.scenes import SceneConfig, generate_dataset

    out = _ensure_out(args)
    scene = args._config.get("scene", {})
    cfg = SceneConfig(
        image_size=int(_cfg(args, "scene", "image_size", scene.get("image_size", 96))),
        num_classes=int(_cfg(args, "scene", "classes", scene.get("classes", 4))),
        clutter=float(_cfg(args, "scene", "clutter", scene.get("clutter", 0.05))),
        noise_sigma=float(_cfg(args, "scene", "noise", scene.get("noise", 2.0))),
        seed=child_seed(_seed(args), "data"),
    )
    manifest = generate_dataset(cfg, int(args.train), int(args.val), out)
    print(f"wrote {manifest}")
    return 0


def _load_data(args):
    from .bench.scenes import load_split

    manifest = _cfg(args, None, "data", None)
    if manifest is None:
        raise ConfigError("--data (dataset manifest path) is required")
    train, meta = load_split(manifest, "train")
    val, _ = load_split(manifest, "val")
    return train, val, meta


def _train_cfg(args, lam: float):
    from .pruner import SparseConfig

    return SparseConfig(
        lam=lam,
        epochs=int(_cfg(args, "train", "epochs", 30)),
        learning_rate=float(_cfg(args, "train", "lr", 0.05)),
        batch_size=int(_cfg(args, "train", "batch", 16)),
        seed=child_seed(_seed(args), "shuffle"),
    )


def _cmd_train(args):
    from .bench.loop import evaluate, run_training, write_epoch_log
    from .bench.toydet import ToyDetConfig, build_toydet
    from .graph import save_graph

    train, val, meta = _load_data(args)
    out = _ensure_out(args)
    toy = ToyDetConfig(image_size=meta["image_size"],
                       num_classes=len(meta["classes"]),
                       base_width=int(_cfg(args, "toydet", "width", 8)),
                       seed=child_seed(_seed(args), "init"))
    model = build_toydet(toy)
    model, log = run_training(model, train, _train_cfg(args, 0.0))
    save_graph(model, os.path.join(out, "model.json"))
    write_epoch_log(log, os.path.join(out, "train_log.csv"))
    rep = evaluate(model, val)
    rep.save(os.path.join(out, "metrics.json"))
    print(f"trained: mAP50={rep.map50:.3f} mAP50-95={rep.map50_95:.3f}")
    return 0


def _cmd_sparse_train(args):
    from .bench.loop import write_epoch_log
    from .graph import load_graph, save_graph
    from .pruner import sparse_train

    train, _, _ = _load_data(args)
    out = _ensure_out(args)
    model = load_graph(args.model)
    lam = float(_cfg(args, "sparse", "lam", 1e-2))
    model, log = sparse_train(model, train, _train_cfg(args, lam))
    save_graph(model, os.path.join(out, "model_sparse.json"))
    write_epoch_log(log, os.path.join(out, "gamma_log.csv"))
    print(f"sparse-trained: final median |gamma| = "
          f"{log[-1]['median_abs_gamma']:.4f}" if log else "no epochs run")
    return 0


def _cmd_prune(args):
    from .graph import load_graph, save_graph
    from .pruner import PruneConfig, prune

    out = _ensure_out(args)
    model = load_graph(args.model)
    rates = args.rate or [0.2]
    for rate in rates:
        cfg = PruneConfig(rate=float(rate))
        pruned, rep = prune(model, cfg)
        tag = f"{int(round(float(rate) * 100)):02d}"
        save_graph(pruned, os.path.join(out, f"model_pruned_{tag}.json"))
        atomic_write_json(rep.to_dict(),
                          os.path.join(out, f"prune_report_{tag}.json"))
        print(f"rate {rate}: params {rep.params_before} -> {rep.params_after}, "
              f"flops {rep.flops_before} -> {rep.flops_after}")
    return 0


def _cmd_finetune(args):
    from .bench.loop import evaluate, write_epoch_log
    from .graph import load_graph, save_graph
    from .pruner import fine_tune

    train, val, _ = _load_data(args)
    out = _ensure_out(args)
    model = load_graph(args.model)
    model, log = fine_tune(model, train, _train_cfg(args, 0.0), val_set=val)
    save_graph(model, os.path.join(out, "model_finetuned.json"))
    write_epoch_log(log, os.path.join(out, "finetune_log.csv"))
    rep = evaluate(model, val)
    rep.save(os.path.join(out, "metrics_finetuned.json"))
    print(f"fine-tuned: mAP50={rep.map50:.3f}")
    return 0


def _cmd_eval(args):
    from .bench.loop import evaluate
    from .bench.scenes import load_split
    from .graph import load_graph

    out = _ensure_out(args)
    model = load_graph(args.model)
    data, _ = load_split(args.data, args.split)
    rep = evaluate(model, data)
    rep.save(os.path.join(out, "metrics.json"))
    print(f"mAP50={rep.map50:.4f} mAP50-95={rep.map50_95:.4f} "
          f"P={rep.precision:.4f} R={rep.recall:.4f} F={rep.f_score:.4f}")
    return 0


def _cmd_report_cost(args):
    from .cost import cost_report
    from .graph import load_graph

    model = load_graph(args.model)
    shape = None
    if args.input_shape:
        shape = tuple(int(v) for v in args.input_shape.split(","))
    rep = cost_report(model, shape)
    doc = rep.to_dict()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_json(doc, os.path.join(args.out, "cost_report.json"))
    print(json.dumps({k: doc[k] for k in
                      ("total_params", "total_flops", "gflops",
                       "model_size_bytes")}, indent=2))
    return 0


def _cmd_hmi_run(args):
    from .hmi import (CommandAdapter, MockAdapter, default_bindings,
                      load_bindings, load_event_stream, load_trial_script,
                      run_session)

    out = _ensure_out(args)
    stream = load_event_stream(args.events)
    templates = None
    if args.bindings:
        bindings, templates = load_bindings(args.bindings)
    else:
        bindings = default_bindings()
    script = load_trial_script(args.script) if args.script else None
    adapter = CommandAdapter(templates) if templates else MockAdapter()
    report = run_session(stream, bindings, adapter, script=script)
    atomic_write_json(report.to_dict(), os.path.join(out, "session_report.json"))
    print(report.render_table())
    return 0


def _cmd_graph_validate(args):
    from .graph import infer_shapes, load_graph

    model = load_graph(args.model)
    infer_shapes(model)
    print(f"{args.model}: valid ({len(model.nodes)} nodes, "
          f"{len(model.outputs)} outputs)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slimkit",
                description="channel-pruning toolkit for detector graphs")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file with defaults")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    common(sp)
    sp.add_argument("--train", type=int, default=200)
    sp.add_argument("--val", type=int, default=50)
    sp.add_argument("--image-size", type=int, dest="image_size")
    sp.add_argument("--classes", type=int)
    sp.add_argument("--clutter", type=float)
    sp.add_argument("--noise", type=float)
    sp.set_defaults(func=_cmd_gen_data)

    for name, func, needs_model in (
            ("train", _cmd_train, False),
            ("sparse-train", _cmd_sparse_train, True),
            ("finetune", _cmd_finetune, True)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--data", help="dataset manifest path")
        if needs_model:
            sp.add_argument("--model", required=True)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch", type=int)
        if name == "train":
            sp.add_argument("--width", type=int)
        if name == "sparse-train":
            sp.add_argument("--lambda", type=float, dest="lam")
        sp.set_defaults(func=func)

    sp = sub.add_parser("prune", help="prune a sparse-trained model")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--rate", action="append", type=float,
                    help="pruning rate; repeat for sweeps")
    sp.set_defaults(func=_cmd_prune)

    sp = sub.add_parser("eval")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val"))
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("report-cost")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input-shape", dest="input_shape",
                    help="c,h,w override for FLOP counting")
    sp.set_defaults(func=_cmd_report_cost)

    sp = sub.add_parser("hmi-run")
    common(sp)
    sp.add_argument("--events", required=True, help="JSONL event stream")
    sp.add_argument("--bindings", help="bindings/commands JSON config")
    sp.add_argument("--script", help="trial script JSON")
    sp.set_defaults(func=_cmd_hmi_run)

    sp = sub.add_parser("graph-validate")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=_cmd_graph_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._config = _load_config(args.config)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"slimkit: config error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"slimkit: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"slimkit: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
