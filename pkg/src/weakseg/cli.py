"""Command-line surface: synth, derive, train, predict, eval, sweep.

Every command is deterministic given its seed and flags.  Reports and
manifests embed the resolved configuration and sha256 hashes of their inputs.
Wall-clock timings go to a separate .timing.json sidecar so the primary
outputs stay byte-identical across reruns.

Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import data as data_mod
from . import losses as losses_mod
from .core import FullLabelling, Instance
from .errors import InvariantBreachError, ValidationError
from .inference import map_inference
from .learn import (
    TrainConfig,
    hallucinated_baseline,
    load_model,
    save_model,
    train_multi_utility,
    train_ssvm,
    _strong_items,
)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k != "wall_time_s"}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _collect_timing(obj, prefix="root"):
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k == "wall_time_s":
                out[prefix] = v
            else:
                out.update(_collect_timing(v, f"{prefix}.{k}"))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            out.update(_collect_timing(v, f"{prefix}[{i}]"))
    return out


def _derive_mix(dataset, full_ids, use_boxes, use_seeds):
    out = []
    for inst in dataset.instances:
        if inst.id in full_ids:
            out.append(inst)
        else:
            ann = data_mod.derive_weak_annotation(
                inst, dataset.header, use_boxes=use_boxes, use_seeds=use_seeds
            )
            out.append(
                Instance(
                    id=inst.id,
                    node_features=inst.node_features,
                    pixel_counts=inst.pixel_counts,
                    edges=inst.edges,
                    edge_features=inst.edge_features,
                    label_space=inst.label_space,
                    pixel_grid=inst.pixel_grid,
                    annotation=ann,
                )
            )
    return data_mod.Dataset(header=dataset.header, instances=out)


def _full_count(fraction: float, n: int) -> int:
    if fraction <= 0:
        return 0
    if fraction >= 1:
        return n
    return max(1, int(fraction * n))


def cmd_synth(args) -> int:
    cfg = data_mod.SynthConfig(
        grid=args.grid,
        scale=args.scale,
        n_stuff=args.stuff,
        n_things=args.things,
        noise=args.noise,
        n_instances=args.train_count,
        seed=args.seed,
    )
    train = data_mod.synth_generate(cfg)
    test_cfg = data_mod.SynthConfig(
        grid=args.grid,
        scale=args.scale,
        n_stuff=args.stuff,
        n_things=args.things,
        noise=args.noise,
        n_instances=args.test_count,
        seed=args.seed + 1,
    )
    test = data_mod.synth_generate(test_cfg)
    n_full = _full_count(args.full_fraction, len(train))
    if n_full == len(train):
        full_ids = frozenset(inst.id for inst in train.instances)
    elif n_full == 0:
        full_ids = frozenset()
    else:
        full_ids = data_mod.sample_subset(train, n_full, args.seed)
    train = _derive_mix(train, full_ids, args.boxes, args.seeds)
    data_mod.save(train, args.out_train)
    data_mod.save(test, args.out_test)
    manifest = {
        "command": "synth",
        "config": vars(args) | {"n_full": n_full, "full_ids": sorted(full_ids)},
        "outputs": {
            "train": {"path": args.out_train, "sha256": _sha256(args.out_train)},
            "test": {"path": args.out_test, "sha256": _sha256(args.out_test)},
        },
    }
    _write_json(args.manifest, _strip_cmd(manifest))
    return 0


def _strip_cmd(manifest):
    manifest["config"].pop("func", None)
    return manifest


def cmd_derive(args) -> int:
    dataset = data_mod.load(args.data)
    for inst in dataset.instances:
        if not isinstance(inst.annotation, FullLabelling):
            raise ValidationError(f"instance {inst.id} is not fully labelled")
    n_full = _full_count(args.full_fraction, len(dataset))
    if n_full == len(dataset):
        full_ids = frozenset(inst.id for inst in dataset.instances)
    elif n_full == 0:
        full_ids = frozenset()
    else:
        full_ids = data_mod.sample_subset(dataset, n_full, args.seed)
    out = _derive_mix(dataset, full_ids, args.boxes, args.seeds)
    data_mod.save(out, args.out)
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        C=args.C,
        alpha_balance=args.alpha,
        epsilon=args.epsilon,
        max_cutting_plane_iters=args.max_cp,
        max_cccp_iters=args.max_cccp,
        warm_start=not args.no_warm_start,
        jobs=args.jobs,
    )


def _loss_config(args, dataset) -> losses_mod.LossConfig:
    estimates = None
    if args.area_estimates:
        estimates = data_mod.estimate_label_areas(
            dataset.instances, dataset.header.K
        )
        if not estimates:
            raise ValidationError("--area-estimates needs fully-labelled instances")
    return losses_mod.LossConfig(beta=args.beta, area_estimates=estimates)


def _run_train(dataset, args):
    config = _train_config(args)
    loss_config = _loss_config(args, dataset)
    if args.mode == "strong":
        strong = [
            i for i in dataset.instances if isinstance(i.annotation, FullLabelling)
        ]
        if not strong:
            raise ValidationError("mode=strong needs fully-labelled instances")
        model, report, _, _ = train_ssvm(_strong_items(strong), config, None, loss_config)
        report = {"phases": {"inner": report}}
    elif args.mode == "multi":
        model, report = train_multi_utility(dataset.instances, config, loss_config)
    elif args.mode == "baseline":
        model, report = hallucinated_baseline(dataset.instances, config, loss_config)
    else:
        raise ValidationError(f"unknown mode {args.mode}")
    return model, report, config, loss_config


def cmd_train(args) -> int:
    dataset = data_mod.load(args.train)
    t0 = time.perf_counter()
    model, report, config, loss_config = _run_train(dataset, args)
    wall = time.perf_counter() - t0
    save_model(model, args.model)
    cccp_rounds = report.get("phases", {}).get("cccp", [])
    payload = {
        "command": "train",
        "mode": args.mode,
        "input": {"path": args.train, "sha256": _sha256(args.train)},
        "config": {
            "C": config.C,
            "alpha_balance": config.alpha_balance,
            "epsilon": config.epsilon,
            "max_cutting_plane_iters": config.max_cutting_plane_iters,
            "max_cccp_iters": config.max_cccp_iters,
            "warm_start": config.warm_start,
            "jobs": config.jobs,
            "beta": loss_config.beta,
            "area_estimates": loss_config.area_estimates,
        },
        "report": _strip_timing(report),
        "cccp_monotone": _monotone(cccp_rounds),
        "model": {"path": args.model, "sha256": _sha256(args.model)},
    }
    _write_json(args.report, payload)
    _write_json(
        args.report + ".timing.json",
        {"total_wall_time_s": wall, **_collect_timing(report)},
    )
    return 0


def _monotone(rounds) -> bool:
    objs = [r["objective"] for r in rounds]
    return all(b <= a + 1e-6 for a, b in zip(objs, objs[1:]))


def cmd_predict(args) -> int:
    model = load_model(args.model)
    dataset = data_mod.load(args.data)
    with open(args.out, "w") as fh:
        for inst in dataset.instances:
            y = map_inference(model, inst)
            fh.write(
                json.dumps(
                    {"id": inst.id, "labels": [int(v) - 1 for v in y]},
                    separators=(",", ":"),
                )
                + "\n"
            )
    return 0


def _metric_rows(model, dataset, excluded, experiment_id, split):
    preds, gts, counts = [], [], []
    for inst in dataset.instances:
        if not isinstance(inst.annotation, FullLabelling):
            raise ValidationError(f"instance {inst.id} lacks ground truth for eval")
        preds.append(map_inference(model, inst))
        gts.append(inst.annotation.labels)
        counts.append(inst.pixel_counts)
    res = data_mod.evaluate(
        preds, gts, counts, excluded_labels=excluded, n_labels=dataset.header.K
    )
    row = {
        "experiment_id": experiment_id,
        "split": split,
        "accuracy": f"{res.accuracy:.6f}",
        "recall": f"{res.recall:.6f}",
    }
    for k in range(1, dataset.header.K + 1):
        v = res.per_label_recall.get(k)
        row[f"recall_label_{k}"] = "" if v is None else f"{v:.6f}"
    return res, row


def _metrics_fieldnames(K):
    return ["experiment_id", "split", "accuracy", "recall"] + [
        f"recall_label_{k}" for k in range(1, K + 1)
    ]


def cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = data_mod.load(args.data)
    excluded = _parse_labels(args.exclude_labels)
    _, row = _metric_rows(model, dataset, excluded, args.experiment_id, args.split)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_metrics_fieldnames(dataset.header.K))
        writer.writeheader()
        writer.writerow(row)
    return 0


def _parse_labels(text) -> frozenset[int]:
    if not text:
        return frozenset()
    return frozenset(int(tok) for tok in text.split(",") if tok.strip())


def cmd_sweep(args) -> int:
    source = data_mod.load(args.train)
    test = data_mod.load(args.test)
    grid = [float(tok) for tok in args.grid.split(",") if tok.strip()]
    if not grid:
        raise ValidationError("empty sweep grid")
    fieldnames = ["parameter", "value", "accuracy", "recall"]
    done = set()
    rows = []
    if os.path.exists(args.out):
        with open(args.out, newline="") as fh:
            for row in csv.DictReader(fh):
                done.add(row["value"])
                rows.append(row)
    for value in grid:
        key = f"{value:g}"
        if key in done:
            continue
        ns = argparse.Namespace(**vars(args))
        if args.param == "alpha":
            ns.alpha = value
            fraction = args.full_fraction
        elif args.param == "beta":
            ns.beta = value
            fraction = args.full_fraction
        elif args.param == "full-fraction":
            fraction = value
        else:
            raise ValidationError(f"unknown sweep parameter {args.param}")
        n_full = _full_count(fraction, len(source))
        if n_full == len(source):
            full_ids = frozenset(i.id for i in source.instances)
        elif n_full == 0:
            full_ids = frozenset()
        else:
            full_ids = data_mod.sample_subset(source, n_full, args.seed)
        mixed = _derive_mix(source, full_ids, args.boxes, args.seeds)
        model, _, _, _ = _run_train(mixed, ns)
        res, _ = _metric_rows(
            model, test, _parse_labels(args.exclude_labels), "sweep", "test"
        )
        rows.append(
            {
                "parameter": args.param,
                "value": key,
                "accuracy": f"{res.accuracy:.6f}",
                "recall": f"{res.recall:.6f}",
            }
        )
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
    return 0


def _add_train_flags(p):
    p.add_argument("--mode", choices=["strong", "multi", "baseline"], default="multi")
    p.add_argument("--C", type=float, default=10.0, help="regularization trade-off")
    p.add_argument("--alpha", type=float, default=0.1, help="weak-slack balance")
    p.add_argument("--beta", type=float, default=1.0, help="box/seed loss weight")
    p.add_argument("--epsilon", type=float, default=1e-3,
                   help="cutting-plane tolerance, relative to mean pixel count")
    p.add_argument("--max-cp", type=int, default=200)
    p.add_argument("--max-cccp", type=int, default=10)
    p.add_argument("--no-warm-start", action="store_true")
    p.add_argument("--area-estimates", action="store_true",
                   help="estimate per-label areas from the fully-labelled part")
    p.add_argument("--jobs", type=int, default=1, help="parallel separation oracles")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakseg",
        description="Semantic-labelling models from mixed full and weak annotations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/test datasets")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", type=int, default=6, help="superpixels per side")
    p.add_argument("--scale", type=int, default=8, help="pixels per superpixel side")
    p.add_argument("--stuff", type=int, default=2)
    p.add_argument("--things", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.4)
    p.add_argument("--train-count", type=int, default=40)
    p.add_argument("--test-count", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-fraction", type=float, default=1.0)
    p.add_argument("--boxes", action="store_true", help="derive bounding boxes")
    p.add_argument("--seeds", action="store_true", help="derive object seeds")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("derive", help="derive weak annotations from full labels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--full-fraction", type=float, default=0.0)
    p.add_argument("--boxes", action="store_true")
    p.add_argument("--seeds", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write MAP labellings for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a model on a labelled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--experiment-id", default="default")
    p.add_argument("--split", default="test")
    p.add_argument("--exclude-labels", default="",
                   help="comma-separated label ids left out of the recall mean")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep alpha, beta, or the full fraction")
    p.add_argument("--train", required=True, help="fully-labelled source dataset")
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", choices=["alpha", "beta", "full-fraction"], required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--full-fraction", type=float, default=0.1)
    p.add_argument("--boxes", action="store_true")
    p.add_argument("--seeds", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclude-labels", default="")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InvariantBreachError as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
