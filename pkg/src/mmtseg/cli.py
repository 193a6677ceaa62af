"""Command-line entry point for reproducible phantom experiments.

Subcommands: generate, train, eval, infer, gradcheck, compare. Every
command is deterministic under a fixed --seed; reruns produce bitwise
identical artifacts. Exit codes: 0 success, 1 runtime failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .gradcheck import run_suite
from .losses import LossWeights
from .metrics import REGIONS, aggregate_reports, evaluate_volume
from .model import VARIANTS
from .phantom import (
    GenerationError,
    generate_phantom,
    read_labels,
    read_volume,
    write_labels,
    write_volume,
)
from .pipeline import build_grid, extract_patches, normalize, probs_to_labels, reassemble
from .trainer import TrainConfig, TrainingError, load_checkpoint, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

COMPARE_METHODS = (
    ("MMTSN", "MMTSN", None),
    ("3D Unet-pre", "UNET_PRE", None),
    ("3D Unet-post", "UNET_POST", None),
    ("MMTSN-no-SCFB", "MMTSN_NO_SCFB", None),
    ("MMTSN-no-SC", "MMTSN", 0.0),  # containment weight zeroed
)


class UsageError(ValueError):
    pass


def _config_hash(config_dict):
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


def _run_manifest(command, config_dict, seed):
    return {
        "command": command,
        "config_hash": _config_hash(config_dict),
        "seed": seed,
        "build": f"mmtseg {__version__}",
    }


def _write_json(path, payload):
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_extents(text):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"extents must be comma-separated integers, got {text!r}")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise UsageError(f"extents need one or three values, got {text!r}")
    return parts


def _load_config(path, overrides):
    data = {}
    if path is not None:
        if not os.path.isfile(path):
            raise UsageError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _normalize_variant(name):
    if name is None:
        return None
    variant = name.upper()
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return variant


def _case_name(seed, index):
    return f"case_{seed}_{index}"


def _list_cases(data_dir):
    if not os.path.isdir(data_dir):
        raise UsageError(f"data directory not found: {data_dir}")
    names = sorted(
        f[: -len("_img.mmts")] for f in os.listdir(data_dir) if f.endswith("_img.mmts")
    )
    cases = []
    for name in names:
        img = os.path.join(data_dir, name + "_img.mmts")
        lbl = os.path.join(data_dir, name + "_lbl.mmts")
        if not os.path.isfile(lbl):
            raise UsageError(f"case {name}: label file missing")
        cases.append((name, img, lbl))
    if not cases:
        raise UsageError(f"no cases found in {data_dir}")
    return cases


def _load_cases(data_dir):
    return [
        (name, read_volume(img), read_labels(lbl)) for name, img, lbl in _list_cases(data_dir)
    ]


def _threads():
    value = os.environ.get("MMTS_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise UsageError(f"MMTS_THREADS must be an integer, got {value!r}")


def cmd_generate(args):
    extents = _parse_extents(args.extents)
    os.makedirs(args.out_dir, exist_ok=True)
    for i in range(args.count):
        try:
            volume, labels = generate_phantom(args.seed + i, extents)
        except GenerationError as exc:
            raise UsageError(str(exc)) from exc
        stem = os.path.join(args.out_dir, _case_name(args.seed, i))
        write_volume(stem + "_img.mmts", volume)
        write_labels(stem + "_lbl.mmts", labels)
    manifest = _run_manifest(
        "generate", {"extents": list(extents), "count": args.count}, args.seed
    )
    _write_json(os.path.join(args.out_dir, "run_manifest.json"), manifest)
    print(f"wrote {args.count} cases to {args.out_dir}")
    return EXIT_OK


def cmd_train(args):
    config = _load_config(
        args.config,
        {"variant": _normalize_variant(args.variant), "seed": args.seed, "steps": args.steps},
    )
    cases = [(vol, lbl) for _, vol, lbl in _load_cases(args.data_dir)]
    result = train(config, cases, args.out_dir)
    manifest = _run_manifest("train", config.to_dict(), config.seed)
    _write_json(os.path.join(args.out_dir, "run_manifest.json"), manifest)
    print(f"trained {result.steps_run} steps; checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def _predict_labels(graph, patch_extents, volume):
    norm = normalize(volume)
    grid = build_grid(norm.extents, patch_extents)
    probs = [graph.forward(img).main_probs.data for img, _ in extract_patches(norm, None, grid)]
    return probs_to_labels(reassemble(probs, grid))


def _evaluate_cases(named_cases, predict_fn, threads):
    def one(case):
        name, volume, labels = case
        return name, evaluate_volume(predict_fn(volume, labels), labels)

    if threads == 1:
        return [one(c) for c in named_cases]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, named_cases))


def _report_payload(command, config_dict, seed, results):
    reports = [r for _, r in results]
    return {
        "run": _run_manifest(command, config_dict, seed),
        "cases": {name: r.to_dict() for name, r in results},
        "aggregates": aggregate_reports(reports),
    }


def cmd_eval(args):
    named_cases = _load_cases(args.data_dir)
    if args.self_check:
        predict = lambda volume, labels: labels  # ground truth against itself
        config_dict = {"self_check": True}
        seed = args.seed if args.seed is not None else 0
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required unless --self-check is given")
        meta_path = args.checkpoint + ".json"
        if not os.path.isfile(meta_path):
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        with open(meta_path, "r", encoding="ascii") as fh:
            meta = json.load(fh)["meta"]
        config = TrainConfig(
            variant=meta["variant"],
            depth=meta["depth"],
            base_channels=meta["base_channels"],
            patch_extents=tuple(meta["patch_extents"]),
            seed=meta["seed"],
        )
        graph, _, _ = load_checkpoint(args.checkpoint, config)
        predict = lambda volume, labels: _predict_labels(
            graph, config.patch_extents, volume
        )
        config_dict = config.to_dict()
        seed = config.seed

    results = _evaluate_cases(named_cases, predict, _threads())
    payload = _report_payload("eval", config_dict, seed, results)
    _write_json(args.report, payload)
    print(f"evaluated {len(results)} cases; report at {args.report}")
    return EXIT_OK


def cmd_infer(args):
    if not os.path.isfile(args.checkpoint + ".json"):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    with open(args.checkpoint + ".json", "r", encoding="ascii") as fh:
        meta = json.load(fh)["meta"]
    config = TrainConfig(
        variant=meta["variant"],
        depth=meta["depth"],
        base_channels=meta["base_channels"],
        patch_extents=tuple(meta["patch_extents"]),
        seed=meta["seed"],
    )
    graph, _, _ = load_checkpoint(args.checkpoint, config)
    os.makedirs(args.out_dir, exist_ok=True)
    for name, volume, _ in _load_cases(args.data_dir):
        pred = _predict_labels(graph, config.patch_extents, volume)
        write_labels(os.path.join(args.out_dir, name + "_pred.mmts"), pred)
    manifest = _run_manifest("infer", config.to_dict(), config.seed)
    _write_json(os.path.join(args.out_dir, "run_manifest.json"), manifest)
    print(f"wrote predictions to {args.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suite(seed=args.seed if args.seed is not None else 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def _mean_or_nan(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else float("nan")


def _format_table(rows, seed):
    cols = ["dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt"]
    heads = ["Dice ET", "Dice TC", "Dice WT", "HD95 ET", "HD95 TC", "HD95 WT"]
    lines = ["Phantom benchmark (desk scale; not comparable to any clinical result)"]
    lines.append(f"{'Method':<16}" + "".join(f"{h:>10}" for h in heads))
    for name, values in rows:
        cells = "".join(
            f"{'n/a':>10}" if np.isnan(values[c]) else f"{values[c]:>10.4f}" for c in cols
        )
        lines.append(f"{name:<16}" + cells)
    lines.append(f"shared seed: {seed}")
    return "\n".join(lines) + "\n"


def cmd_compare(args):
    base = _load_config(args.config, {"seed": args.seed, "steps": args.steps})
    named_cases = _load_cases(args.data_dir)
    cases = [(vol, lbl) for _, vol, lbl in named_cases]
    os.makedirs(args.out_dir, exist_ok=True)
    threads = _threads()

    table_rows = []
    for method, variant, lambda_sc in COMPARE_METHODS:
        weights = base.weights
        if lambda_sc is not None:
            weights = LossWeights(
                lambda_wt=weights.lambda_wt,
                lambda_tc=weights.lambda_tc,
                lambda_et=weights.lambda_et,
                lambda_sc=lambda_sc,
            )
        config = TrainConfig.from_dict(
            dict(base.to_dict(), variant=variant, weights=vars(weights))
        )
        run_dir = os.path.join(args.out_dir, method.lower().replace(" ", "_"))
        result = train(config, cases, run_dir)
        graph, _, _ = load_checkpoint(result.checkpoint_path, config)
        predict = lambda volume, labels, g=graph: _predict_labels(
            g, config.patch_extents, volume
        )
        results = _evaluate_cases(named_cases, predict, threads)
        _write_json(
            os.path.join(run_dir, "report.json"),
            _report_payload("compare", config.to_dict(), config.seed, results),
        )
        reports = [r for _, r in results]
        values = {}
        for region in REGIONS:
            values[f"dice_{region}"] = _mean_or_nan([r.dice[region] for r in reports])
            values[f"hd95_{region}"] = _mean_or_nan([r.hd95[region] for r in reports])
        table_rows.append((method, values))
        print(f"{method}: trained {result.steps_run} steps, evaluated {len(reports)} cases")

    table = _format_table(table_rows, base.seed)
    with open(os.path.join(args.out_dir, "table.txt"), "w", encoding="ascii") as fh:
        fh.write(table)
    cols = ["dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt"]
    with open(os.path.join(args.out_dir, "table.csv"), "w", encoding="ascii") as fh:
        fh.write("method," + ",".join(cols) + "\n")
        for name, values in table_rows:
            fh.write(name + "," + ",".join(repr(values[c]) for c in cols) + "\n")
    manifest = _run_manifest("compare", base.to_dict(), base.seed)
    _write_json(os.path.join(args.out_dir, "run_manifest.json"), manifest)
    print(table, end="")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmtseg",
        description="Multi-modal tumor segmentation experiments on synthetic phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write deterministic phantom cases")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extents", default="32,32,32")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant on a phantom set")
    p.add_argument("--config", help="JSON file mirroring the training config")
    p.add_argument("--variant", help="override the config variant")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sliding-window inference plus metrics report")
    p.add_argument("--checkpoint", help="checkpoint path prefix (no extension)")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--self-check",
        action="store_true",
        help="score ground truth against itself instead of running a model",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write predicted label volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="train and evaluate all method variants")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
