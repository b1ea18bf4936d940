"""Command-line surface.

Subcommands: train, explain, batch-explain, evaluate, fidelity, render.
Every command takes --seed and --config (JSON file; explicit flags override
file values).  All randomness flows from named substreams of the run seed, so
identical invocations produce bit-identical artifacts.  Failures exit nonzero
after printing one machine-readable `error: {...}` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import Dataset, gen_shapes, load_idx
from .errors import CfeditError
from .metrics import avg_edit_count, relaxation_fidelity
from .network import (
    ModelBundle,
    TrainConfig,
    forward_features,
    load_model,
    predict_batch,
    reference_extractor_specs,
    reference_head_specs,
    save_model,
    train,
)
from .relaxed import RelaxOptConfig
from .render import (
    read_explanation,
    receptive_field_map,
    render_explanation,
    write_explanation,
)
from .rng import substream
from .search import SearchConfig, greedy_counterfactual


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    p.add_argument("--config", help="JSON config file; flags override its values")


def _add_dataset_args(p):
    p.add_argument("--dataset", choices=["shapes", "idx"], default=None)
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--shapes-count", type=int, default=None)
    p.add_argument("--shapes-size", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="cfedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model bundle on a dataset")
    _add_common(p)
    _add_dataset_args(p)
    p.add_argument("--test-idx-images")
    p.add_argument("--test-idx-labels")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--out", required=True, help="output model directory")

    p = sub.add_parser("explain", help="counterfactual explanation for one query/distractor pair")
    _add_common(p)
    _add_dataset_args(p)
    _add_search_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--query-index", type=int, required=True)
    p.add_argument("--distractor-index", type=int, default=None)
    p.add_argument("--distractor-class", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("batch-explain", help="explanations for sampled query/distractor pairs")
    _add_common(p)
    _add_dataset_args(p)
    _add_search_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--no-rasters", action="store_true", help="write records only")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="edit-count metrics over a directory of records")
    _add_common(p)
    p.add_argument("--records", required=True, help="directory of explanation records")
    p.add_argument("--out", required=True, help="output report JSON")

    p = sub.add_parser("fidelity", help="relaxed vs exhaustive best-edit fidelity")
    _add_common(p)
    _add_dataset_args(p)
    _add_search_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--out", required=True, help="output report JSON")

    p = sub.add_parser("render", help="re-render rasters from an explanation record")
    _add_common(p)
    _add_dataset_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    return parser


def _add_search_args(p):
    p.add_argument("--strategy", choices=["exhaustive", "relaxed"], default=None)
    p.add_argument("--max-edits", type=int, default=None)
    p.add_argument(
        "--exclusion-policy",
        choices=["query-cells-only", "query-and-distractor-cells"],
        default=None,
    )
    p.add_argument("--relax-lr", type=float, default=None)
    p.add_argument("--relax-steps", type=int, default=None)


DEFAULTS = {
    "seed": 0,
    "dataset": "shapes",
    "shapes_count": 400,
    "shapes_size": 28,
    "epochs": 10,
    "learning_rate": 0.01,
    "batch_size": 64,
    "strategy": "exhaustive",
    "max_edits": None,
    "exclusion_policy": "query-and-distractor-cells",
    "relax_lr": 0.3,
    "relax_steps": 300,
    "pairs": 50,
    "instances": 100,
}


def resolve_config(args) -> dict:
    """DEFAULTS < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise CfeditError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _load_dataset(args, cfg, split="data") -> Dataset:
    if cfg["dataset"] == "idx":
        if not (args.idx_images and args.idx_labels):
            raise CfeditError("idx dataset requires --idx-images and --idx-labels")
        return load_idx(args.idx_images, args.idx_labels, split=split)
    return gen_shapes(cfg["shapes_count"], size=cfg["shapes_size"], seed=cfg["seed"], split=split)


def _search_config(cfg) -> SearchConfig:
    relax = RelaxOptConfig(learning_rate=cfg["relax_lr"], max_steps=cfg["relax_steps"])
    return SearchConfig(
        exclusion_policy=cfg["exclusion_policy"],
        max_edits=cfg["max_edits"],
        strategy=cfg["strategy"],
        relax=relax if cfg["strategy"] == "relaxed" else None,
    )


def _extractor_specs_of(model: ModelBundle):
    return [ly.spec for ly in model.extractor]


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    dataset = _load_dataset(args, cfg, split="train")
    test_images = test_labels = None
    if args.test_idx_images and args.test_idx_labels:
        test = load_idx(args.test_idx_images, args.test_idx_labels, split="test")
        test_images, test_labels = test.images, test.labels
    elif cfg["dataset"] == "shapes":
        test = gen_shapes(
            max(cfg["shapes_count"] // 4, 40), size=cfg["shapes_size"], seed=cfg["seed"], split="test"
        )
        test_images, test_labels = test.images, test.labels
    tc = TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
    )
    model = train(
        reference_extractor_specs(),
        reference_head_specs(dataset.class_count),
        dataset.images,
        dataset.labels,
        tc,
        test_images=test_images,
        test_labels=test_labels,
        class_count=dataset.class_count,
    )
    save_model(model, args.out)
    print(json.dumps({"model": args.out, "metrics": model.metrics}, sort_keys=True))
    return 0


def _explain_one(model, dataset, cfg, query_index, distractor_index, out_dir, prefix, rasters=True):
    sc = _search_config(cfg)
    result = greedy_counterfactual(
        model,
        dataset.images[query_index],
        dataset.images[distractor_index],
        int(predict_batch(model, dataset.images[distractor_index][None])[0]),
        sc,
        query_id=dataset.ids[query_index],
        distractor_id=dataset.ids[distractor_index],
    )
    rf = receptive_field_map(_extractor_specs_of(model), model.input_shape[0], model.input_shape[1])
    renders = None
    if rasters:
        renders = render_explanation(
            dataset.images[query_index], dataset.images[distractor_index], result, rf
        )
    extra = {
        "query_index": int(query_index),
        "distractor_index": int(distractor_index),
        "run_config": cfg,
    }
    write_explanation(result, renders, out_dir, rf, rf, sc, prefix=prefix, extra=extra)
    return result


def cmd_explain(args) -> int:
    cfg = resolve_config(args)
    model = load_model(args.model)
    dataset = _load_dataset(args, cfg)
    if (args.distractor_index is None) == (args.distractor_class is None):
        raise CfeditError("give exactly one of --distractor-index / --distractor-class")
    d_index = args.distractor_index
    if d_index is None:
        preds = predict_batch(model, dataset.images)
        candidates = np.flatnonzero(preds == args.distractor_class)
        if not len(candidates):
            raise CfeditError(f"no image predicted as class {args.distractor_class}")
        d_index = int(candidates[substream(cfg["seed"], "distractor-pick").integers(len(candidates))])
    result = _explain_one(model, dataset, cfg, args.query_index, d_index, args.out, "explanation")
    print(json.dumps({"status": result.status, "edits": result.edit_count}, sort_keys=True))
    return 0


def cmd_batch_explain(args) -> int:
    cfg = resolve_config(args)
    model = load_model(args.model)
    dataset = _load_dataset(args, cfg)
    preds = predict_batch(model, dataset.images)
    rng = substream(cfg["seed"], "pairs")
    made = 0
    attempts = 0
    statuses = []
    while made < cfg["pairs"] and attempts < cfg["pairs"] * 20:
        attempts += 1
        q = int(rng.integers(len(dataset)))
        c = int(preds[q])
        others = np.flatnonzero(preds != c)
        if not len(others):
            continue
        d = int(others[rng.integers(len(others))])
        result = _explain_one(
            model, dataset, cfg, q, d, args.out, f"pair_{made:04d}", rasters=not args.no_rasters
        )
        statuses.append(result.status)
        made += 1
    print(json.dumps({"pairs": made, "flipped": statuses.count("flipped")}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    names = sorted(f for f in os.listdir(args.records) if f.endswith(".json"))
    results = [read_explanation(os.path.join(args.records, n))[0] for n in names]
    if not results:
        raise CfeditError(f"no records found in {args.records}")
    report = avg_edit_count(results)
    payload = report.to_json()
    payload["run_config"] = cfg
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    print(json.dumps({"value": report.value, "count": report.count}, sort_keys=True))
    return 0


def cmd_fidelity(args) -> int:
    cfg = resolve_config(args)
    model = load_model(args.model)
    dataset = _load_dataset(args, cfg)
    preds = predict_batch(model, dataset.images)
    rng = substream(cfg["seed"], "fidelity")
    instances = []
    attempts = 0
    while len(instances) < cfg["instances"] and attempts < cfg["instances"] * 20:
        attempts += 1
        q = int(rng.integers(len(dataset)))
        others = np.flatnonzero(preds != preds[q])
        if not len(others):
            continue
        d = int(others[rng.integers(len(others))])
        F = forward_features(model, dataset.images[q])
        F2 = forward_features(model, dataset.images[d])
        instances.append((F, F2, int(preds[d]), (), ()))
    report = relaxation_fidelity(
        model,
        instances,
        RelaxOptConfig(learning_rate=cfg["relax_lr"], max_steps=cfg["relax_steps"]),
        use_relaxed=cfg["strategy"] == "relaxed",
    )
    payload = report.to_json()
    payload["run_config"] = cfg
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    print(json.dumps(report.extras, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    cfg = resolve_config(args)
    model = load_model(args.model)
    dataset = _load_dataset(args, cfg)
    result, record = read_explanation(args.record)
    if "query_index" not in record or "distractor_index" not in record:
        raise CfeditError("record carries no dataset indices; cannot re-render")
    rf = receptive_field_map(_extractor_specs_of(model), model.input_shape[0], model.input_shape[1])
    renders = render_explanation(
        dataset.images[record["query_index"]],
        dataset.images[record["distractor_index"]],
        result,
        rf,
    )
    prefix = os.path.splitext(os.path.basename(args.record))[0]
    write_explanation(result, renders, args.out, rf, rf, None, prefix=prefix, extra={
        "query_index": record["query_index"],
        "distractor_index": record["distractor_index"],
        "run_config": cfg,
    })
    print(json.dumps({"rendered": prefix}, sort_keys=True))
    return 0


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "batch-explain": cmd_batch_explain,
    "evaluate": cmd_evaluate,
    "fidelity": cmd_fidelity,
    "render": cmd_render,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CfeditError, OSError, json.JSONDecodeError) as exc:
        print(
            "error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
