"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
error, 3 numeric failure. Progress is written to stdout as JSON lines.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (DataError, Dataset, SplitError, ZsSplit, generate_dataset, load_dataset,
                   save_dataset, zs_split)
from .detr_lite import CheckpointFormatError, ConfigError, load_checkpoint
from .nominators import NominationError, nominate
from .numerics import NumericError, ShapeError
from .semantics import TableFormatError, over_matrix
from .taxonomy import TaxonomyError
from .train import (RunConfig, build_model, coerce_override, evaluate, gradcheck, run_ablation,
                    run_training, save_json, train_scenes, write_ablation_csv)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


# ------------------------------------------------------------------ config


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    profile = raw.pop("profile", "toy")
    if profile not in ("toy", "full"):
        raise ConfigError(f"profile must be 'toy' or 'full', got {profile!r}")
    base = RunConfig.full_scale() if profile == "full" else RunConfig.toy()
    try:
        cfg = base.updated(**raw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    sets = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = coerce_override(cfg, k.strip(), v)
    return cfg.updated(**sets) if sets else cfg


def resolve_split(ds: Dataset, cfg: RunConfig, choice: str | None) -> ZsSplit:
    if choice is None:
        return ds.split
    if choice.endswith(".json"):
        try:
            return ZsSplit.load(choice)
        except OSError as e:
            raise DataError(f"cannot read split {choice}: {e.strerror}") from None
    return zs_split(ds.taxonomy, choice, cfg.seed, cfg.unseen_objects, cfg.unseen_verbs)


def _load_model(ds: Dataset, cfg: RunConfig, ckpt: str):
    model = build_model(ds, cfg)
    loaded = load_checkpoint(ckpt)
    expect = {k: v.shape for k, v in model.params.items()}
    got = {k: v.shape for k, v in loaded.items()}
    if expect != got:
        diff = sorted(k for k in set(expect) | set(got) if expect.get(k) != got.get(k))
        raise ShapeError(f"checkpoint does not fit the model; mismatched tensors: {diff[:5]}")
    model.params.update(loaded)
    return model


def _scene(ds: Dataset, which: str, index: int):
    scenes = ds.test if which == "test" else ds.train
    if not 0 <= index < len(scenes):
        raise DataError(f"scene index {index} outside 0..{len(scenes) - 1} of {which} scenes")
    return scenes[index]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = generate_dataset(cfg.data_config())
    save_dataset(ds, args.out)
    emit({"event": "dataset", "out": str(args.out), "objects": ds.taxonomy.n_objects,
          "actions": ds.taxonomy.n_actions, "classes": ds.taxonomy.n_classes,
          "seen": len(ds.split.seen), "unseen": len(ds.split.unseen),
          "train_scenes": len(ds.train), "test_scenes": len(ds.test), "split": ds.split.setting})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = load_dataset(args.data)
    split = resolve_split(ds, cfg, args.split)
    emit({"event": "start", "train_scenes": len(train_scenes(ds, split)),
          "seen": len(split.seen), "epochs": cfg.epochs})
    _, rec = run_training(ds, split, cfg, ckpt_path=args.out, log=emit)
    if args.record:
        save_json({"epochs": rec.epochs, "checkpoint": rec.checkpoint,
                   "config": cfg.to_json()}, args.record)
    done = {"event": "done", "checkpoint": str(args.out), "final_loss": rec.epochs[-1]["loss"]}
    if args.timing:
        done["wall_time"] = rec.wall_time
    emit(done)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = load_dataset(args.data)
    split = resolve_split(ds, cfg, args.split)
    model = _load_model(ds, cfg, args.ckpt)
    rep = evaluate(model, ds.test, split, cfg.top_n)
    if args.out:
        rep.save(args.out)
    emit({"event": "eval", "map_seen": rep.map_seen, "map_unseen": rep.map_unseen,
          "map_full": rep.map_full, "report": args.out})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.set)
    rep = gradcheck(cfg, n_scenes=args.scenes, max_coords=args.max_coords,
                    directions=args.directions, rel_tol=args.tol)
    out = {"event": "gradcheck", "max_rel_err": rep.max_rel_err, "tol": args.tol,
           "passed": rep.passed, "n_coords": rep.n_coords,
           "n_params": len(rep.per_param), "worst": [list(w) for w in rep.worst]}
    emit(out)
    if not rep.passed:
        print("gradient check failed; worst parameters: "
              + ", ".join(f"{k} ({v:.3g})" for k, v in rep.worst), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_nominate(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = load_dataset(args.data)
    scene = _scene(ds, args.which, args.scene)
    noms = nominate(ds.objects, ds.actions, over_matrix(ds.objects, ds.actions), scene.v_c,
                    cfg.k_o, cfg.k_a, cfg.k, ds.taxonomy.person_object_idx)
    emit({"event": "nominate", "scene": args.scene, "which": args.which,
          "objects": noms.objects.as_dict(ds.objects),
          "actions": noms.actions.as_dict(ds.actions),
          "ground_truth": sorted(ds.taxonomy.class_name(c) for c in scene.classes())})
    return EXIT_OK


def write_csv(mat: np.ndarray, path: Path) -> None:
    path.write_text("".join(",".join(repr(float(v)) for v in row) + "\n" for row in mat))


def write_pgm(mat: np.ndarray, path: Path) -> None:
    """8-bit binary greymap, min-max scaled over the whole map."""
    lo, hi = float(mat.min()), float(mat.max())
    scaled = np.zeros(mat.shape) if hi == lo else (mat - lo) / (hi - lo)
    px = np.round(scaled * 255).astype(np.uint8)
    h, w = px.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def cmd_export_attention(args) -> int:
    cfg = load_config(args.config, args.set)
    if cfg.fusion != "full":
        raise ConfigError("export-attention needs fusion=full")
    ds = load_dataset(args.data)
    model = _load_model(ds, cfg, args.ckpt) if args.ckpt else build_model(ds, cfg)
    scene = _scene(ds, args.which, args.scene)
    _, tr = model.forward(scene, range(ds.taxonomy.n_classes), mode="eval", trace=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for block, probe, idx, table in (("osaca", tr.f_o, tr.nominations.objects.indices, ds.objects),
                                     ("ovaca", tr.f_a, tr.nominations.actions.indices, ds.actions)):
        for n, i in enumerate(idx):
            stem = f"{block}_cand{n}_{table.names[i]}"
            m = probe.per_candidate_maps.data[n]
            write_csv(m, out / f"{stem}.csv")
            write_pgm(m, out / f"{stem}.pgm")
            files += [f"{stem}.csv", f"{stem}.pgm"]
        write_csv(probe.map.data, out / f"{block}_fused.csv")
        files.append(f"{block}_fused.csv")
    manifest = {"scene": args.scene, "which": args.which, "grid": list(cfg.stack_config().grid),
                "objects": [ds.objects.names[i] for i in tr.nominations.objects.indices],
                "actions": [ds.actions.names[i] for i in tr.nominations.actions.indices],
                "files": files}
    save_json(manifest, out / "manifest.json")
    emit({"event": "export", "out": str(out), "files": len(files)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = load_dataset(args.data)
    split = resolve_split(ds, cfg, args.split)
    rows = run_ablation(ds, split, cfg, log=emit)
    write_ablation_csv(rows, args.out)
    emit({"event": "ablate", "rows": len(rows), "out": str(args.out)})
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topdown-hoi", description="Zero-shot HOI detection on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable)")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train on a dataset and write a checkpoint")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", help="setting name or split JSON (default: dataset split)")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--record", help="write the per-epoch run record as JSON")
    sp.add_argument("--timing", action="store_true", help="report wall time")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test scenes")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split")
    sp.add_argument("--out", help="report JSON path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    common(sp)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--scenes", type=int, default=2)
    sp.add_argument("--max-coords", type=int, default=8, help="sampled coordinates per tensor")
    sp.add_argument("--directions", type=int, default=4, help="random directions per tensor")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("nominate", help="print object and verb nominations for a scene")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--which", choices=("train", "test"), default="test")
    sp.set_defaults(func=cmd_nominate)

    sp = sub.add_parser("export-attention", help="write co-attention maps as CSV and PGM")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", help="checkpoint (default: freshly initialised weights)")
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--which", choices=("train", "test"), default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_attention)

    sp = sub.add_parser("ablate", help="train and evaluate every loss-factor subset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--out", required=True, help="CSV path")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SplitError, NominationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TableFormatError, TaxonomyError, CheckpointFormatError,
            ShapeError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
