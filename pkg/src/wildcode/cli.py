"""Command-line entry point: ``wildcode <gen|train|reconstruct|eval|roundtrip|ablate>``.

Exit codes: 0 success, 1 validation failure (bad flags, non-canonical or
invalid inputs), 2 IO error, 3 internal error. ``--json`` prints one
machine-readable object on stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _non_negative(v: str) -> int:
    n = int(v)
    if n < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return n


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("WILDCODE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationFailure(f"WILDCODE_SEED={env!r} is not an integer") from None


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=float))
    else:
        print(text)


# -- subcommands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    from wildcode import scenegen as sg

    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    for key in ("embed_dim", "feature_dim", "max_objects"):
        if getattr(args, key) is not None:
            base[key] = getattr(args, key)
    base["seed"] = _seed(args)
    try:
        cfg = sg.GenConfig(**base)
    except (TypeError, ValueError) as e:
        raise ValidationFailure(f"generator config: {e}") from e
    m = sg.emit_dataset(cfg, args.scenes, args.views, args.out, jobs=args.jobs)
    n_held = len(m.split("heldout"))
    _emit(args, {"out": str(m.root), "records": len(m.records), "heldout": n_held, "seed": cfg.seed},
          f"wrote {len(m.records)} samples ({n_held} held out) to {m.root}")
    return EXIT_OK


def _decoder_config(args, manifest):
    from wildcode import decoder

    over = {"variant": args.variant, "pixels": args.pixels, "fuzz": args.fuzz, "seed": _seed(args)}
    for key in ("layers", "width", "heads", "lr", "batch_size"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    try:
        return decoder.config_for(manifest.config, **over)
    except ValueError as e:
        raise ValidationFailure(f"decoder config: {e}") from e


def cmd_train(args) -> int:
    from wildcode import decoder
    from wildcode.scenegen import Manifest

    manifest = Manifest.load(args.data)
    cfg = _decoder_config(args, manifest)
    state = decoder.train(cfg, manifest, args.steps, out_dir=args.out, log_every=args.log_every)
    last = state.log[-1] if state.log else {}
    _emit(args, {"out": str(args.out), "steps": state.step, "final": last},
          f"trained {state.step} steps; checkpoint in {args.out}" +
          (f"; last loss {last['total']:.4f}" if last else ""))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from wildcode import ablation, codec, decoder
    from wildcode.scenegen import Manifest
    from wildcode.scenelang import emit_program

    state = decoder.load_checkpoint(args.checkpoint)
    manifest = Manifest.load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec, pred in ablation.reconstruct(state, manifest, args.split):
        stem = rec["sample_id"]
        if isinstance(pred, decoder.MalformedGeneration):
            rows.append({"sample_id": stem, "ok": False, "error": pred.error})
            continue
        (out / f"{stem}.rawcode").write_text(emit_program(pred))
        codec.write_stream(out / f"{stem}.wcs", codec.encode(pred))
        rows.append({"sample_id": stem, "ok": True})
    (out / "reconstruct.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    n_bad = sum(not r["ok"] for r in rows)
    _emit(args, {"out": str(out), "samples": len(rows), "malformed": n_bad},
          f"reconstructed {len(rows)} samples into {out} ({n_bad} malformed)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from wildcode import codec, metrics
    from wildcode.assets import AssetIndex
    from wildcode.scenegen import ATTRIBUTE_RANGES, Manifest

    gt = Manifest.load(args.gt)
    recs = gt.split(args.split) if args.split != "all" else gt.records
    index = AssetIndex.load(gt.root / "assets.wcae")
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory {pred_dir} does not exist")
    reports, missing = [], []
    for rec in recs:
        path = pred_dir / f"{rec['sample_id']}.wcs"
        if not path.exists():
            missing.append(rec["sample_id"])
            continue
        pred = codec.decode(codec.read_stream(path))
        truth = codec.decode(codec.read_stream(gt.path(rec, "stream")))
        reports.append(metrics.match_objects(pred, truth, args.max_dist, index))
    summary = metrics.scene_metrics(reports, index)
    summary["n_missing"] = len(missing)
    summary["missing_rate"] = len(missing) / len(recs) if recs else 0.0
    summary["attribute_nmae"] = (metrics.normalized_attribute_mae(reports, ATTRIBUTE_RANGES)
                                 if reports else float("nan"))
    if args.report:
        Path(args.report).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    keys = ("precision", "recall", "loc_error", "rot_error", "category_top1", "retrieval_top1", "attribute_mae")
    _emit(args, summary, "\n".join(f"{k}\t{summary[k]:.4f}" for k in keys if k in summary))
    return EXIT_OK


def _rawcode_files(paths):
    for p in map(Path, paths):
        if p.is_dir():
            yield from sorted(p.rglob("*.rawcode"))
        elif p.exists():
            yield p
        else:
            raise FileNotFoundError(f"{p} does not exist")


def cmd_roundtrip(args) -> int:
    from wildcode.scenelang import ParseError, emit_program, parse_program

    files = list(_rawcode_files(args.paths))
    bad = []
    for f in files:
        text = f.read_text(encoding="utf-8")
        try:
            first = emit_program(parse_program(text))
            second = emit_program(parse_program(first))
        except ParseError as e:
            bad.append({"file": str(f), "problem": f"parse error {e}"})
            continue
        if first != second:
            bad.append({"file": str(f), "problem": "emit is not a fixed point"})
        elif first != text:
            pairs = zip(text.split("\n"), first.split("\n"))
            line = next((i for i, (a, b) in enumerate(pairs, 1) if a != b), None)
            where = f"first difference on line {line}" if line else "line endings differ"
            bad.append({"file": str(f), "problem": f"non-canonical ({where})"})
    lines = [f"{len(files)} files, {len(bad)} non-canonical"] + [f"{b['file']}: {b['problem']}" for b in bad]
    _emit(args, {"files": len(files), "failures": bad}, "\n".join(lines))
    return EXIT_INVALID if bad else EXIT_OK


def cmd_ablate(args) -> int:
    from wildcode import ablation
    from wildcode.scenegen import Manifest

    manifest = Manifest.load(args.data)
    base = _decoder_config(args, manifest)
    seeds = args.seeds if args.seeds else [_seed(args)]
    rows = ablation.run_ablation(manifest, base, args.steps, ablation.grid(quick=not args.full), seeds)
    if args.out:
        Path(args.out).write_text(json.dumps(ablation.rows_to_json(rows), indent=2, sort_keys=True, default=float) + "\n")
    _emit(args, {"rows": ablation.rows_to_json(rows)}, ablation.format_table(rows))
    for r in rows:
        if r.error:
            print(f"run {r.variant} fuzz={r.fuzz} pixels={r.pixels} seed={r.seed} failed:\n{r.error}", file=sys.stderr)
    return EXIT_INTERNAL if any(r.error for r in rows) else EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wildcode", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.add_argument("--seed", type=int, default=None, help="global seed (default: $WILDCODE_SEED or 0)")
        sp.add_argument("--jobs", type=_positive, default=1, help="worker processes where parallelism applies")
        return sp

    def model_flags(sp):
        sp.add_argument("--data", required=True, help="dataset directory written by `gen`")
        sp.add_argument("--variant", choices=("clip", "discrete"), default="clip")
        sp.add_argument("--pixels", type=_on_off, default=True, metavar="on|off")
        sp.add_argument("--fuzz", type=_on_off, default=False, metavar="on|off")
        sp.add_argument("--steps", type=_non_negative, required=True)
        sp.add_argument("--layers", type=_positive)
        sp.add_argument("--width", type=_positive)
        sp.add_argument("--heads", type=_positive)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=_positive)
        return sp

    g = common(sub.add_parser("gen", help="generate a synthetic dataset"))
    g.add_argument("--scenes", type=_positive, required=True)
    g.add_argument("--views", type=_positive, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file of generator settings")
    g.add_argument("--embed-dim", type=_positive)
    g.add_argument("--feature-dim", type=_positive)
    g.add_argument("--max-objects", type=_positive)
    g.set_defaults(func=cmd_gen)

    t = model_flags(common(sub.add_parser("train", help="train a decoder")))
    t.add_argument("--out", required=True, help="directory for checkpoint.pt and metrics.csv")
    t.add_argument("--log-every", type=_positive, default=10)
    t.set_defaults(func=cmd_train)

    r = common(sub.add_parser("reconstruct", help="decode programs from dataset features"))
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", choices=("train", "heldout"), default="heldout")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    e = common(sub.add_parser("eval", help="score reconstructions against ground truth"))
    e.add_argument("--pred", required=True, help="directory of <sample_id>.wcs predictions")
    e.add_argument("--gt", required=True, help="dataset directory")
    e.add_argument("--split", choices=("train", "heldout", "all"), default="heldout")
    e.add_argument("--max-dist", type=float, default=5.0)
    e.add_argument("--report", help="write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    rt = common(sub.add_parser("roundtrip", help="check .rawcode files are canonical"))
    rt.add_argument("paths", nargs="+")
    rt.set_defaults(func=cmd_roundtrip)

    a = model_flags(common(sub.add_parser("ablate", help="train and compare decoder variants")))
    a.add_argument("--full", action="store_true", help="all 8 variant x fuzz x pixels runs instead of clip vs discrete")
    a.add_argument("--seeds", type=lambda v: [int(x) for x in v.split(",")], help="comma-separated seeds")
    a.add_argument("--out", help="write rows as JSON here")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ValidationFailure as e:
        print(f"wildcode: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"wildcode: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # malformed inputs surfaced by the parsers and codecs
        print(f"wildcode: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
