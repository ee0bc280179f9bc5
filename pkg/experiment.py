"""
Desk-scale end-to-end experiment in one process
-----------------------------------------------
toy glyphs → (subsampled) real split → denoiser + guidance → guided pool →
confidence gate → FID (unfiltered vs filtered) → fused retrain → accuracy delta.

Config overrides use ``section__key`` keyword names, e.g.
    run_once(seed=1, training__max_epochs=5, sampler__per_class=50)
"""
from __future__ import annotations

import argparse
import json
import os
from typing import Any, Dict, Optional

import numpy as np

from backbone import BackboneConfig
from classifiers import FAMILIES, DownstreamModelSpec
from config import RUNS_ROOT, derive_seed, resolve_config, section
from data_ingestion import fuse_datasets, load_split, subsample_train, write_manifest
from errors import TooFewSamples
from filtering import multi_filter, retention_table, write_filter_report
from logger_setup import get_logger
from metrics import comparison_table, fid_between_sets, render_table
from model_training import (
    TrainConfig,
    train_denoiser,
    train_downstream,
    train_guidance_classifier,
)
from sampler import SamplerConfig, generate, save_samples
from schedule import make_schedule
from toy_glyphs import make_toy_glyph_dataset

log = get_logger(__name__)

DESK_TRAIN_PER_CLASS = 40


def overrides_from_params(params: Dict[str, Any]) -> list:
    """``training__max_epochs=5`` → ``"training.max_epochs=5"``."""
    return [f"{k.replace('__', '.')}={json.dumps(v)}" for k, v in params.items()]


def _write_table(df, work_dir: str, name: str) -> str:
    base = os.path.join(work_dir, "reports", name)
    os.makedirs(os.path.dirname(base), exist_ok=True)
    with open(f"{base}.txt", "w", encoding="utf-8") as fh:
        fh.write(render_table(df) + "\n")
    df.to_csv(f"{base}.csv", index=False)
    log.info("%s:\n%s", name, render_table(df))
    return f"{base}.csv"


def run_once(seed: int = 0, work_dir: Optional[str] = None, **params: Any) -> Dict[str, Any]:
    """Run the whole pipeline once and return a flat metrics dict.

    With ``classifier__families=[...]`` every family is trained as a baseline,
    used as a filter over the same pool and retrained on real ∪ its own
    retained set. The flat keys describe ``classifier.family`` (the first
    family when it is not listed); ``per_family`` holds the rest.
    """
    cfg = resolve_config(None, overrides_from_params({"seed": seed, **params}))
    work_dir = os.path.abspath(work_dir or os.path.join(RUNS_ROOT, f"experiment_seed{seed}"))
    data_cfg = cfg["data"]
    hp_str = " ".join(f"{k}={v!r}" for k, v in params.items())

    # ── data ────────────────────────────────────────────────────────
    full, _ = make_toy_glyph_dataset(os.path.join(work_dir, "data"), data_cfg["toy_classes"],
                                     data_cfg["toy_per_class"], derive_seed(seed, "split"),
                                     data_cfg["fractions"], data_cfg["image_size"])
    per_class = data_cfg["train_per_class"] or DESK_TRAIN_PER_CLASS
    real = subsample_train(full, per_class, derive_seed(seed, "subsample"))
    real_path = write_manifest(real, os.path.join(work_dir, "data", "manifest_subsampled.txt"))

    def train_cfg(stage: str) -> TrainConfig:
        return TrainConfig(seed=derive_seed(seed, stage), **section(cfg, "training"))

    # ── generative side ─────────────────────────────────────────────
    sched = make_schedule(**section(cfg, "schedule"))
    backbone = BackboneConfig(class_count=real.class_count, **section(cfg, "backbone"))
    denoiser, _ = train_denoiser(real, sched, backbone, train_cfg("denoiser"))
    guidance, _ = train_guidance_classifier(real, sched, train_cfg("guidance"), backbone)

    # ── baseline recognisers (the primary one is the pinned FID extractor) ──
    ccfg = cfg["classifier"]
    families = list(dict.fromkeys(ccfg["families"] or [ccfg["family"]]))
    primary_family = ccfg["family"] if ccfg["family"] in families else families[0]
    specs = {
        spec.model_id: spec
        for spec in (DownstreamModelSpec(f, real.class_count, ccfg["depth_preset"], real.image_size)
                     for f in families)
    }
    primary = next(mid for mid, spec in specs.items() if spec.family == primary_family)
    baselines, base_reports = {}, {}
    for mid, spec in specs.items():
        baselines[mid], _, base_reports[mid] = train_downstream(
            real, spec, train_cfg(f"classifier:{mid}:baseline"), manifest_path=real_path)

    # ── pool, gates, FID ────────────────────────────────────────────
    scfg = SamplerConfig(**section(cfg, "sampler"))
    labels = scfg.labels_for(real.class_count)
    pool = generate(labels, scfg, denoiser, guidance, sched, derive_seed(seed, "sample"), progress=False)
    pool, _ = save_samples(pool, os.path.join(work_dir, "samples", "pool"))
    filtered = multi_filter(pool, baselines, cfg["filter"]["threshold"],
                            require_argmax_match=cfg["filter"]["require_argmax_match"])
    for mid, (_, report) in filtered.items():
        write_filter_report(report, os.path.join(work_dir, "reports", f"filter_{mid}.json"))

    real_images, _, _ = load_split(real, "train")
    layer = cfg["metrics"]["layer"]

    def fid(records) -> Optional[float]:
        try:
            return fid_between_sets(real_images, np.stack([r.image for r in records]) if records else [],
                                    baselines[primary], layer, primary)
        except TooFewSamples:
            log.warning("FID skipped: %d synthetic images", len(records))
            return None

    fid_unfiltered = fid(pool)
    fids = {mid: fid(retained) for mid, (retained, _) in filtered.items()}
    reports = {mid: report for mid, (_, report) in filtered.items()}
    _write_table(retention_table(reports, {k: v for k, v in fids.items() if v is not None},
                                 len(pool), fid_unfiltered), work_dir, "retention")

    # ── retrain each family on real ∪ its own retained set ──────────
    fused_reports = {}
    for mid, spec in specs.items():
        fused = fuse_datasets(real, filtered[mid][0])
        fused_path = write_manifest(fused, os.path.join(work_dir, "data", f"fused_manifest_{mid}.txt"))
        _, _, fused_reports[mid] = train_downstream(
            fused, spec, train_cfg(f"classifier:{mid}:retrained"), manifest_path=fused_path)
    _write_table(comparison_table(base_reports, fused_reports), work_dir, "comparison")

    per_family = {
        mid: {
            "retained": reports[mid].total_retained,
            "fid_filtered": fids[mid],
            "baseline_accuracy": base_reports[mid].accuracy,
            "retrained_accuracy": fused_reports[mid].accuracy,
            "accuracy_delta": fused_reports[mid].accuracy - base_reports[mid].accuracy,
        }
        for mid in specs
    }
    report = reports[primary]
    results = {
        "seed": seed,
        "model": primary,
        "pool": report.total_in,
        "retained": report.total_retained,
        "retention": report.retention_rate,
        "mean_conf_retained": report.mean_confidence_retained,
        "mean_conf_rejected": report.mean_confidence_rejected,
        "fid_unfiltered": fid_unfiltered,
        "fid_filtered": fids[primary],
        **{k: per_family[primary][k] for k in ("baseline_accuracy", "retrained_accuracy", "accuracy_delta")},
        "per_family": per_family,
    }
    with open(os.path.join(work_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2)

    log.info(
        "Run [seed %d] %s → kept %d/%d  FID %s → %s  acc %.4f → %.4f (%+.2f pp)",
        seed, hp_str or "defaults",
        report.total_retained, report.total_in,
        f"{fid_unfiltered:.3f}" if fid_unfiltered is not None else "nan",
        f"{fids[primary]:.3f}" if fids[primary] is not None else "nan",
        results["baseline_accuracy"], results["retrained_accuracy"],
        100 * results["accuracy_delta"],
    )
    return results


# ── CLI helper ───────────────────────────────────────────────────────
if __name__ == "__main__":
    p = argparse.ArgumentParser(description="Run one desk-scale experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--work-dir")
    p.add_argument("--train-per-class", type=int, default=DESK_TRAIN_PER_CLASS)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--families", nargs="+", choices=FAMILIES, help="Filter and retrain every listed family")
    args = p.parse_args()

    extra = {"data__train_per_class": args.train_per_class}
    if args.families:
        extra["classifier__families"] = args.families
    if args.max_epochs is not None:
        extra["training__max_epochs"] = args.max_epochs
    print(json.dumps(run_once(args.seed, args.work_dir, **extra), indent=2))
