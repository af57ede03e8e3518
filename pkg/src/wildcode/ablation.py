"""Train/evaluate decoder variants on a shared dataset and tabulate metrics."""
from __future__ import annotations

import hashlib
import itertools
import time
import traceback
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from wildcode import codec, decoder, metrics
from wildcode.assets import AssetIndex
from wildcode.scenegen import ATTRIBUTE_RANGES, GenConfig, Manifest
from wildcode.scenelang import SceneProgram


@dataclass
class AblationRow:
    variant: str
    fuzz: bool
    pixels: bool
    seed: int
    steps: int
    data_hash: str
    metrics: dict = field(default_factory=dict)
    final_loss: float = float("nan")
    seconds: float = 0.0
    error: str | None = None


def data_hash(manifest: Manifest, split: str = "train") -> str:
    """Digest of the sample files and targets a run trains on."""
    h = hashlib.sha256()
    for rec in manifest.split(split):
        h.update(rec["sample_id"].encode())
        h.update(manifest.path(rec, "stream").read_bytes())
        h.update(manifest.path(rec, "features").read_bytes())
        h.update(repr(sorted(rec["fuzzed_attributes"].items())).encode())
    return h.hexdigest()[:16]


def ground_truth(manifest: Manifest, rec: dict) -> SceneProgram:
    return codec.decode(codec.read_stream(manifest.path(rec, "stream")))


def reconstruct(state: decoder.TrainState, manifest: Manifest, split: str = "heldout", batch: int = 64):
    """(record, program or MalformedGeneration) for every sample of ``split``."""
    recs = manifest.split(split)
    out = []
    for i in range(0, len(recs), batch):
        chunk = recs[i:i + batch]
        feats = np.stack([np.load(manifest.path(r, "features")).astype(np.float64) for r in chunk])
        streams = decoder.generate(state.model, feats)
        out.extend((r, decoder.decode_generated(s, state.cfg.profile)) for r, s in zip(chunk, streams))
    return out


def evaluate(state: decoder.TrainState, manifest: Manifest, split: str = "heldout",
             max_dist: float = metrics.DEFAULT_MAX_DIST, index: AssetIndex | None = None) -> dict:
    index = index or AssetIndex.load(manifest.root / "assets.wcae")
    reports = []
    malformed = 0
    for rec, pred in reconstruct(state, manifest, split):
        gt = ground_truth(manifest, rec)
        if isinstance(pred, decoder.MalformedGeneration):
            malformed += 1
            continue
        reports.append(metrics.match_objects(pred, gt, max_dist, index))
    summary = metrics.scene_metrics(reports, index)
    total = len(reports) + malformed
    summary["malformed_rate"] = malformed / total if total else 0.0
    summary["n_malformed"] = malformed
    summary["attribute_nmae"] = metrics.normalized_attribute_mae(reports, ATTRIBUTE_RANGES) if reports else float("nan")
    return summary


def run_variant(manifest: Manifest, cfg: decoder.DecoderConfig, steps: int, log_every: int = 0,
                split: str = "heldout") -> AblationRow:
    row = AblationRow(cfg.variant, cfg.fuzz, cfg.pixels, cfg.seed, steps, data_hash(manifest))
    t0 = time.time()
    try:
        state = decoder.train(cfg, manifest, steps, log_every=log_every)
        row.final_loss = float(np.mean([r["total"] for r in state.log[-50:]])) if state.log else float("nan")
        row.metrics = evaluate(state, manifest, split)
    except Exception as e:  # noqa: BLE001 - keep the other rows of the grid
        row.error = f"{type(e).__name__}: {e}\n{traceback.format_exc()}"
    row.seconds = time.time() - t0
    return row


def grid(quick: bool = True):
    if quick:
        return [("discrete", False, True), ("clip", False, True)]
    return list(itertools.product(("discrete", "clip"), (False, True), (False, True)))


def run_ablation(manifest: Manifest, base: decoder.DecoderConfig, steps: int, variants=None,
                 seeds=(0,), log_every: int = 0) -> list[AblationRow]:
    rows = []
    for seed in seeds:
        for variant, fuzz, pixels in variants or grid():
            cfg = replace(base, variant=variant, fuzz=fuzz, pixels=pixels, seed=seed)
            rows.append(run_variant(manifest, cfg, steps, log_every))
    return rows


# -- desk benchmark: clip vs discrete names, fuzzing on vs off -----------------------

BENCH_SCENES = 2000
BENCH_VIEWS = 2
BENCH_STEPS = 2000
BENCH_SEEDS = (0, 1, 2)
BENCH_VARIANTS = (("discrete", False, True), ("clip", False, True), ("clip", True, True))
MIN_TOP1_GAP = 0.05


def benchmark_gen_config(seed: int = 0) -> GenConfig:
    """60-asset pool, one to three objects of random categories per scene."""
    return GenConfig(objects_per_scene=(1, 3), embed_dim=32, feature_dim=256, max_objects=3,
                     place_radius=6.0, cam_distance=(12.0, 18.0), seed=seed)


def benchmark_model(manifest: Manifest) -> decoder.DecoderConfig:
    return decoder.config_for(manifest.config, width=128, heads=4, layers=2, lr=1e-3, batch_size=32)


def direction_summary(rows, seeds=BENCH_SEEDS) -> dict:
    """Per seed: does clip beat discrete on category top-1 by MIN_TOP1_GAP, and
    does fuzzing leave held-out attribute error no worse (both with clip)."""
    by = {(r.variant, r.fuzz, r.seed): r for r in rows}
    per_seed = []
    for s in seeds:
        d, c, f = by[("discrete", False, s)].metrics, by[("clip", False, s)].metrics, by[("clip", True, s)].metrics
        gap = c["category_top1"] - d["category_top1"]
        per_seed.append({
            "seed": s,
            "top1_clip": c["category_top1"],
            "top1_discrete": d["category_top1"],
            "top1_gap": gap,
            "clip_wins": gap >= MIN_TOP1_GAP,
            "nmae_clean": c["attribute_nmae"],
            "nmae_fuzz": f["attribute_nmae"],
            "fuzz_ok": f["attribute_nmae"] <= c["attribute_nmae"],
        })
    n = len(per_seed)
    wins = sum(p["clip_wins"] for p in per_seed)
    fuzz_ok = sum(p["fuzz_ok"] for p in per_seed)
    return {"per_seed": per_seed, "clip_wins": wins, "fuzz_ok": fuzz_ok,
            "holds": 2 * wins > n and 2 * fuzz_ok > n}


def format_table(rows) -> str:
    cols = ["variant", "fuzz", "pixels", "seed", "category_top1", "retrieval_top1", "retrieval_top5",
            "precision", "recall", "loc_error", "rot_error", "attribute_nmae", "malformed_rate"]
    lines = ["\t".join(cols)]
    for r in rows:
        vals = [r.variant, str(r.fuzz), str(r.pixels), str(r.seed)]
        for c in cols[4:]:
            v = r.metrics.get(c)
            vals.append("err" if r.error else ("-" if v is None else f"{v:.4f}"))
        lines.append("\t".join(vals))
    return "\n".join(lines)


def rows_to_json(rows) -> list[dict]:
    return [asdict(r) for r in rows]
