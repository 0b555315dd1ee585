"""Command-line pipeline: lab generation, merging, expert extraction,
evaluation, and the filter sweep.

Every command resolves its settings as defaults < --config JSON < explicit
flags, writes output files atomically (temp then rename), and uses exit code
0 for success, 1 for runtime failures, 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import lab as labmod
from .errors import FreqMergeError
from .experts import (
    ExpertBundle,
    backbone_checksum,
    bundle_to_bytes,
    compose,
    extract_expert,
    load_bundle,
)
from .lab import LabConfig, TrainConfig, evaluate, forward
from .merge import (
    DEFAULT_RHO,
    filtered_merge,
    fr_merge,
    dare_drop,
    merging_coefficients,
    task_arithmetic,
    ties_merge,
    weight_average,
)
from .params import (
    Checkpoint,
    checkpoint_to_bytes,
    load_checkpoint,
    task_vector,
)
from .router import perfect_router, random_router, route, train_router
from .spectral import FilterSpec, spectrum_rows

MODE_NAMES = {"high": "high_pass", "low": "low_pass", "band": "band_stop"}


class UsageError(Exception):
    """Configuration problem; maps to exit code 2."""


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _require_files(paths) -> None:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise UsageError(f"input file(s) not found: {', '.join(missing)}")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _pick(flag_value, config: dict, key: str, default):
    """defaults < config JSON < explicitly passed flag."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _csv_bytes(header: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _report_path(out: Path) -> Path:
    stem = out.stem if out.suffix else out.name
    return out.with_name(stem + ".report.json")


def _json_bytes(payload) -> bytes:
    return (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# lab serialization helpers shared by lab / eval / sweep
# ---------------------------------------------------------------------------


def _dataset_csv(ds: labmod.Dataset, split: str) -> bytes:
    x = ds.train_x if split == "train" else ds.test_x
    y = ds.train_labels_global if split == "train" else ds.test_labels_global
    header = [f"x{i}" for i in range(x.shape[1])] + ["label"]
    rows = [[repr(float(v)) for v in row] + [int(label)] for row, label in zip(x, y)]
    return _csv_bytes(header, rows)


def _lab_config_from_dict(raw: dict) -> LabConfig:
    cfg = LabConfig()
    train_keys = {"pretrain", "finetune"}
    simple = {k: v for k, v in raw.items() if k not in train_keys}
    for key in simple:
        if not hasattr(cfg, key):
            raise UsageError(f"unknown lab config key {key!r}")
    if "hidden" in simple:
        simple["hidden"] = tuple(simple["hidden"])
    for key in ("finetune_epoch_scale", "finetune_lr_scale"):
        if key in simple:
            simple[key] = tuple(simple[key])
    kwargs = dict(simple)
    for key in train_keys:
        if key in raw:
            kwargs[key] = TrainConfig(**raw[key])
    try:
        return replace(cfg, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid lab config: {exc}") from exc


def _load_lab_dir(lab_dir: Path) -> tuple[dict, list[labmod.Dataset]]:
    manifest_path = lab_dir / "lab_manifest.json"
    _require_files([manifest_path])
    manifest = json.loads(manifest_path.read_text())
    datasets = []
    for entry in manifest["tasks"]:
        def read_split(split):
            path = lab_dir / entry[f"{split}_csv"]
            _require_files([path])
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                rows = list(reader)
            dim = len(header) - 1
            x = np.array([[float(v) for v in row[:dim]] for row in rows], dtype=np.float32)
            y = np.array([int(row[dim]) for row in rows], dtype=np.int64)
            return x, y - entry["class_offset"]

        train_x, train_y = read_split("train")
        test_x, test_y = read_split("test")
        datasets.append(
            labmod.Dataset(
                task_id=entry["task_id"],
                class_offset=entry["class_offset"],
                n_classes=entry["n_classes"],
                train_x=train_x,
                train_y=train_y,
                test_x=test_x,
                test_y=test_y,
            )
        )
    return manifest, datasets


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_lab(args) -> int:
    config = _load_config(args.config)
    seed = int(_pick(args.seed, config, "seed", 0))
    lab_cfg = _lab_config_from_dict(config.get("lab", {}))
    out_dir = Path(args.out)

    artifacts = labmod.build_lab(lab_cfg, seed)
    out_dir.mkdir(parents=True, exist_ok=True)

    pre_name = "pretrained.safetensors"
    _write_atomic(out_dir / pre_name, checkpoint_to_bytes(artifacts.pretrained))
    tasks = []
    for ckpt, ds in zip(artifacts.finetuned, artifacts.datasets):
        ck_name = f"{ds.task_id}.safetensors"
        _write_atomic(out_dir / ck_name, checkpoint_to_bytes(ckpt))
        train_csv = f"dataset_{ds.task_id}_train.csv"
        test_csv = f"dataset_{ds.task_id}_test.csv"
        _write_atomic(out_dir / train_csv, _dataset_csv(ds, "train"))
        _write_atomic(out_dir / test_csv, _dataset_csv(ds, "test"))
        tasks.append(
            {
                "task_id": ds.task_id,
                "checkpoint": ck_name,
                "train_csv": train_csv,
                "test_csv": test_csv,
                "class_offset": ds.class_offset,
                "n_classes": ds.n_classes,
                "finetuned_accuracy": evaluate(ckpt, ds),
            }
        )
    manifest = {
        "seed": seed,
        "pretrained": pre_name,
        "tasks": tasks,
        "pretrained_accuracy": {
            ds.task_id: evaluate(artifacts.pretrained, ds) for ds in artifacts.datasets
        },
    }
    _write_atomic(out_dir / "lab_manifest.json", _json_bytes(manifest))
    print(f"lab written to {out_dir} ({len(tasks)} tasks, seed {seed})")
    return 0


def _load_merge_inputs(args, need_pre: bool):
    fine_paths = [Path(p) for p in args.fine]
    to_check = list(fine_paths)
    pre = None
    if args.pre is not None:
        to_check.append(Path(args.pre))
    elif need_pre:
        raise UsageError("this method needs --pre (the shared pretrained checkpoint)")
    _require_files(to_check)
    if args.pre is not None:
        pre = load_checkpoint(args.pre)
    fines = [load_checkpoint(p) for p in fine_paths]
    return pre, fines, fine_paths


def _task_vectors(pre: Checkpoint, fines, fine_paths) -> list:
    tvs = []
    seen = set()
    for ckpt, path in zip(fines, fine_paths):
        tv = task_vector(ckpt, pre)
        if tv.task_id in seen or tv.task_id == "task":
            tv = task_vector(ckpt, pre, task_id=Path(path).stem)
        seen.add(tv.task_id)
        tvs.append(tv)
    return tvs


def cmd_merge(args) -> int:
    config = _load_config(args.config)
    method = _pick(args.method, config, "method", "fr")
    rho = float(_pick(args.rho, config, "rho", DEFAULT_RHO))
    mode = _pick(args.mode, config, "mode", "high")
    seed = int(_pick(args.seed, config, "seed", 0))
    lam = _pick(args.lam, config, "lam", None)
    keep_frac = float(_pick(args.keep_frac, config, "keep_frac", 0.2))
    drop_p = float(_pick(args.drop_p, config, "drop_p", 0.5))
    out = Path(args.out)

    need_pre = method in ("fr", "ta", "ties", "dare")
    pre, fines, fine_paths = _load_merge_inputs(args, need_pre)
    tvs = _task_vectors(pre, fines, fine_paths) if pre is not None else []

    if method == "fr":
        if mode == "band":
            spec = FilterSpec.median(rho if rho > 0 else DEFAULT_RHO)
        else:
            spec = FilterSpec(MODE_NAMES[mode], rho=rho)
        merged, report = filtered_merge(pre, tvs, spec, method="fr" if mode == "high" else mode)
    else:
        if method == "avg":
            merged = weight_average(fines)
            lambdas = [1.0 / len(fines)] * len(fines)
        elif method == "ta":
            lam_value = float(lam) if lam is not None else 1.0 / len(tvs)
            merged = task_arithmetic(pre, tvs, lam_value)
            lambdas = [lam_value] * len(tvs)
        elif method == "ties":
            merged = ties_merge(pre, tvs, keep_frac)
            lambdas = [1.0 / len(tvs)] * len(tvs)
        else:  # dare
            dropped = [dare_drop(tv, drop_p, seed + i) for i, tv in enumerate(tvs)]
            lam_value = float(lam) if lam is not None else 1.0 / len(tvs)
            merged = task_arithmetic(pre, dropped, lam_value)
            merged = Checkpoint(dict(merged.tensors), origin_tag="merged:dare")
            lambdas = [lam_value] * len(tvs)
        from .merge import MergeReport

        report = MergeReport(
            method=method,
            rho=0.0,
            lambdas=lambdas,
            energy_ratios={},
            wall_time_ms=0.0,
            param_count=merged.num_params,
            task_count=len(fines),
        )

    if args.dump_spectrum:
        rows = []
        for tv in tvs:
            for name, arr in tv.items():
                for idx, radius, re_part, im_part in spectrum_rows(arr):
                    rows.append([tv.task_id, name, idx, repr(radius), repr(re_part), repr(im_part)])
        _write_atomic(
            Path(args.dump_spectrum),
            _csv_bytes(["task_id", "tensor", "flat_index", "radius", "re", "im"], rows),
        )

    _write_atomic(out, checkpoint_to_bytes(merged))
    _write_atomic(_report_path(out), _json_bytes(report.to_dict()))
    print(f"merged {len(fines)} checkpoints with method={method} -> {out}")
    return 0


def cmd_extract(args) -> int:
    config = _load_config(args.config)
    d = float(_pick(args.d, config, "d", 0.1))
    out = Path(args.out)

    _require_files([args.backbone, args.pre, *args.fine])
    backbone = load_checkpoint(args.backbone)
    pre = load_checkpoint(args.pre)
    fines = [load_checkpoint(p) for p in args.fine]
    tvs = _task_vectors(pre, fines, [Path(p) for p in args.fine])

    lambdas = merging_coefficients(tvs).lambdas
    experts = {
        tv.task_id: extract_expert(tv, d, lam) for tv, lam in zip(tvs, lambdas)
    }
    bundle = ExpertBundle(backbone_checksum(backbone), experts)
    _write_atomic(out, bundle_to_bytes(bundle))
    print(f"extracted {len(experts)} experts at d={d} -> {out}")
    return 0


def _composed_models(backbone: Checkpoint, bundle: ExpertBundle | None):
    if bundle is None:
        return [backbone], ["__backbone__"]
    task_ids = bundle.task_ids
    models = [
        compose(backbone, bundle, [1.0 if i == k else 0.0 for i in range(len(task_ids))])
        for k in range(len(task_ids))
    ]
    return models, task_ids


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    router_mode = _pick(args.router, config, "router", "perfect")
    seed = int(_pick(args.seed, config, "seed", 0))
    out = Path(args.out)

    _require_files([args.backbone])
    backbone = load_checkpoint(args.backbone)
    bundle = None
    if args.bundle:
        _require_files([args.bundle])
        bundle = load_bundle(args.bundle)
        if bundle.backbone_fnv1a != backbone_checksum(backbone):
            raise FreqMergeError("bundle checksum does not match the backbone")

    manifest, datasets = _load_lab_dir(Path(args.lab))
    method = "backbone" if bundle is None else "free"

    rows = []
    if bundle is None:
        for ds in datasets:
            rows.append([ds.task_id, method, router_mode, repr(evaluate(backbone, ds)), seed])
    else:
        task_ids = bundle.task_ids
        models, _ = _composed_models(backbone, bundle)
        if router_mode == "perfect":
            router = perfect_router(task_ids)
        elif router_mode == "random":
            router = random_router(task_ids, seed=seed)
        else:
            router = train_router(
                [ds.train_x for ds in datasets],
                TrainConfig(lr=0.05, epochs=30, seed=seed),
                task_ids=[ds.task_id for ds in datasets],
            )
        call_index = 0
        for ds in datasets:
            hits = 0
            for row, label in zip(ds.test_x, ds.test_labels_global):
                decision = route(router, row, true_task_id=ds.task_id, call_index=call_index)
                call_index += 1
                logits = forward(models[decision.chosen], row[None, :])[0]
                hits += int(int(np.argmax(logits)) == label)
            rows.append([ds.task_id, method, router_mode, repr(hits / ds.test_x.shape[0]), seed])

    header = ["task_id", "method", "router_mode", "accuracy", "seed"]
    _write_atomic(out.with_suffix(".csv"), _csv_bytes(header, rows))
    payload = [dict(zip(header, row)) for row in rows]
    for entry in payload:
        entry["accuracy"] = float(entry["accuracy"])
    _write_atomic(out.with_suffix(".json"), _json_bytes(payload))
    mean_acc = float(np.mean([float(r[3]) for r in rows]))
    print(f"evaluated {len(rows)} task(s), router={router_mode}, mean accuracy {mean_acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    seed0 = int(_pick(args.seed, config, "seed", 0))
    n_seeds = int(_pick(args.seeds, config, "seeds", 1))
    rhos = _pick(args.rhos, config, "rhos", "0,0.1,0.2,0.3,0.4,0.5,0.6")
    modes = _pick(args.modes, config, "modes", "high,low,band")
    lab_cfg = _lab_config_from_dict(config.get("lab", {}))
    out = Path(args.out)

    if isinstance(rhos, str):
        rho_grid = [float(tok) for tok in rhos.split(",") if tok != ""]
    else:
        rho_grid = [float(v) for v in rhos]
    mode_list = [tok.strip() for tok in (modes.split(",") if isinstance(modes, str) else modes)]
    for mode in mode_list:
        if mode not in MODE_NAMES:
            raise UsageError(f"unknown filter mode {mode!r} (use high, low, band)")

    rows = []
    task_ids = None
    for seed in range(seed0, seed0 + n_seeds):
        artifacts = labmod.build_lab(lab_cfg, seed)
        task_ids = [ds.task_id for ds in artifacts.datasets]
        for mode in mode_list:
            for rho in rho_grid:
                if mode == "band":
                    if rho <= 0.0:
                        spec = FilterSpec.high_pass(0.0)  # empty annulus: identity
                    else:
                        spec = FilterSpec.median(rho)
                else:
                    spec = FilterSpec(MODE_NAMES[mode], rho=rho)
                merged, _ = filtered_merge(
                    artifacts.pretrained, artifacts.task_vectors, spec, method=mode
                )
                accs = [evaluate(merged, ds) for ds in artifacts.datasets]
                rows.append(
                    [repr(float(rho)), mode, repr(float(np.mean(accs)))]
                    + [repr(float(a)) for a in accs]
                    + [seed]
                )
    header = ["rho", "mode", "mean_accuracy"] + [f"acc_{tid}" for tid in task_ids] + ["seed"]
    _write_atomic(out, _csv_bytes(header, rows))
    print(f"sweep wrote {len(rows)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqmerge",
        description="Merge fine-tuned checkpoints with spectral filtering and routed sparse experts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    lab = sub.add_parser("lab", help="generate pretrained/fine-tuned checkpoints and datasets")
    lab.add_argument("--out", required=True, help="output directory")
    lab.add_argument("--seed", type=int, default=None)
    lab.add_argument("--config", default=None, help="JSON config (flags win on conflict)")
    lab.set_defaults(func=cmd_lab)

    merge = sub.add_parser("merge", help="merge checkpoints into a backbone")
    merge.add_argument("fine", nargs="+", help="fine-tuned checkpoint paths")
    merge.add_argument("--pre", default=None, help="pretrained checkpoint path")
    merge.add_argument("--method", choices=["fr", "avg", "ta", "ties", "dare"], default=None)
    merge.add_argument("--rho", type=float, default=None, help="removed-coefficient fraction")
    merge.add_argument("--mode", choices=["high", "low", "band"], default=None)
    merge.add_argument("--lam", type=float, default=None, help="task-arithmetic coefficient")
    merge.add_argument("--keep-frac", dest="keep_frac", type=float, default=None)
    merge.add_argument("--drop-p", dest="drop_p", type=float, default=None)
    merge.add_argument("--seed", type=int, default=None)
    merge.add_argument("--out", required=True)
    merge.add_argument("--config", default=None)
    merge.add_argument("--dump-spectrum", default=None, help="write task-vector spectra as CSV")
    merge.set_defaults(func=cmd_merge)

    extract = sub.add_parser("extract", help="extract a sparse expert bundle")
    extract.add_argument("fine", nargs="+", help="fine-tuned checkpoint paths")
    extract.add_argument("--pre", required=True)
    extract.add_argument("--backbone", required=True)
    extract.add_argument("--d", type=float, default=None, help="kept fraction per expert")
    extract.add_argument("--out", required=True)
    extract.add_argument("--config", default=None)
    extract.set_defaults(func=cmd_extract)

    ev = sub.add_parser("eval", help="evaluate a backbone (optionally with experts) on a lab")
    ev.add_argument("--backbone", required=True)
    ev.add_argument("--bundle", default=None)
    ev.add_argument("--router", choices=["perfect", "random", "learned"], default=None)
    ev.add_argument("--lab", required=True, help="directory written by the lab command")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--out", required=True, help="basename for .csv/.json outputs")
    ev.add_argument("--config", default=None)
    ev.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep", help="filter mode x rho x seed factorial study")
    sweep.add_argument("--rhos", default=None, help="comma-separated removed fractions")
    sweep.add_argument("--modes", default=None, help="comma-separated subset of high,low,band")
    sweep.add_argument("--seed", type=int, default=None, help="first seed")
    sweep.add_argument("--seeds", type=int, default=None, help="number of seeds")
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--config", default=None)
    sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FreqMergeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())
