"""
Command-line front end for the augmentation pipeline
----------------------------------------------------
Example (desk run on toy glyphs):
    python cli.py prepare-data --toy --run-name desk
    python cli.py train-diffusion  --run-name desk --manifest runs/desk/data/manifest.txt
    python cli.py train-guidance   --run-name desk --manifest runs/desk/data/manifest.txt
    python cli.py sample           --run-name desk --denoiser runs/desk/checkpoints/denoiser.joblib \
                                   --guidance runs/desk/checkpoints/guidance.joblib
    python cli.py train-classifier --run-name desk --manifest runs/desk/data/manifest.txt --role baseline
    python cli.py filter           --run-name desk --pool runs/desk/samples/pool/samples.jsonl \
                                   --model runs/desk/checkpoints/residual-desk_baseline.joblib
    python cli.py fuse             --run-name desk --manifest runs/desk/data/manifest.txt \
                                   --retained runs/desk/samples/retained_residual-desk.jsonl
    python cli.py train-classifier --run-name desk --manifest runs/desk/data/fused_manifest.txt --role retrained
    python cli.py evaluate         --run-name desk --model runs/desk/checkpoints/residual-desk_retrained.joblib \
                                   --manifest runs/desk/data/manifest.txt --role retrained
    python cli.py fid              --run-name desk --real runs/desk/data/manifest.txt \
                                   --synthetic runs/desk/samples/pool/samples.jsonl \
                                   --extractor runs/desk/checkpoints/residual-desk_baseline.joblib

Any config key can be overridden with a dotted flag, e.g. ``--training.batch_size 64``.
Exit codes: 0 ok · 1 pipeline error (details in <run>/error.json) · 2 usage / config error.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backbone import BackboneConfig
from checkpoints import file_sha256, load_checkpoint
from classifiers import FAMILIES, PRESETS, DownstreamModelSpec
from config import RUNS_ROOT, derive_seed, load_config_file, resolve_config, section
from data_ingestion import (
    fuse_datasets,
    load_manifest,
    load_split,
    manifest_from_folders,
    subsample_train,
    write_manifest,
)
from errors import CheckpointError, ConfigError, GlyphDiffError, RunLockedError
from filtering import (
    UNFILTERED,
    FilterReport,
    multi_filter,
    retention_table,
    write_filter_report,
    write_retained,
)
from logger_setup import attach_run_log, detach_run_log, get_logger
from metrics import (
    EvalReport,
    InceptionExtractor,
    comparison_table,
    fid_between_sets,
    render_table,
)
from model_training import (
    TrainConfig,
    evaluate_model,
    plot_run_log,
    resolve_device,
    train_denoiser,
    train_downstream,
    train_guidance_classifier,
)
from sampler import SamplerConfig, generate, load_samples, save_sample_grid, save_samples
from schedule import make_schedule
from toy_glyphs import make_toy_glyph_dataset

log = get_logger("cli")

PIPELINE_LOGGERS = (
    "cli", "data_ingestion", "toy_glyphs", "model_training", "sampler",
    "filtering", "metrics", "checkpoints",
)
LOCK_NAME = ".lock"


# ─── argument parsing ────────────────────────────────────────────────
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (a run's config.json also works)")
    common.add_argument("--run-name", default="default", help="Directory under the runs root")
    common.add_argument("--runs-root", default=RUNS_ROOT)
    common.add_argument("--seed", type=int, help="Shortcut for the top-level seed key")

    ap = argparse.ArgumentParser(prog="cli.py", description="Confidence-filtered diffusion augmentation")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("prepare-data", parents=[common], help="Build a stratified manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--toy", action="store_true", help="Render the procedural glyph dataset")
    src.add_argument("--images-dir", help="Folder tree <root>/<class>/*.png")
    p.add_argument("--out", help="Output folder (default <run>/data)")

    p = sub.add_parser("train-diffusion", parents=[common], help="Train the ε-prediction denoiser")
    p.add_argument("--manifest")

    p = sub.add_parser("train-guidance", parents=[common], help="Train the noisy guidance classifier")
    p.add_argument("--manifest")
    p.add_argument("--max-timestep", type=int)

    p = sub.add_parser("sample", parents=[common], help="Generate a guided synthetic pool")
    p.add_argument("--denoiser", required=True)
    p.add_argument("--guidance")
    p.add_argument("--out", help="Output folder (default <run>/samples/pool)")

    p = sub.add_parser("filter", parents=[common], help="Confidence-gate a sample pool")
    p.add_argument("--pool", required=True, help="samples.jsonl sidecar")
    p.add_argument("--model", required=True, action="append", help="Downstream checkpoint (repeatable)")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("fuse", parents=[common], help="Real train split ∪ retained samples")
    p.add_argument("--manifest")
    p.add_argument("--retained", required=True)
    p.add_argument("--out", help="Fused manifest path (default <run>/data/fused_manifest.txt)")

    p = sub.add_parser("train-classifier", parents=[common], help="Train a downstream recogniser")
    p.add_argument("--manifest")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--role", default="baseline", choices=("baseline", "retrained"))

    p = sub.add_parser("evaluate", parents=[common], help="Score a checkpoint on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--role", default="baseline", choices=("baseline", "retrained"))

    p = sub.add_parser("fid", parents=[common], help="FID between real images and a sample set")
    p.add_argument("--real", required=True, help="Manifest of real images")
    p.add_argument("--synthetic", required=True, help="samples.jsonl sidecar")
    p.add_argument("--extractor", required=True, help="Downstream checkpoint, or 'inception'")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--dataset",
                   help="Retention-table row: a filter id or 'unfiltered' (default: from the sidecar name)")
    p.add_argument("--name", help="Report name under <run>/reports (default fid_<dataset>)")
    return ap


def split_overrides(extra: Sequence[str]) -> List[str]:
    """``--a.b v`` / ``--a.b=v`` → ``["a.b=v"]``; anything else is a usage error."""
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument: {tok}")
        key = tok[2:]
        if "=" in key:
            pairs.append(key)
            i += 1
        elif i + 1 < len(extra):
            pairs.append(f"{key}={extra[i + 1]}")
            i += 2
        else:
            raise ConfigError(f"missing value for {tok}")
    return pairs


def _file_config(path: Optional[str]) -> Dict[str, Any]:
    data = load_config_file(path)
    if {"command", "config"} <= set(data):      # an echoed run config
        return data["config"]
    return data


# ─── run directory ───────────────────────────────────────────────────
class RunDir:
    """runs/<name>/ with a lock held for the lifetime of one command."""

    def __init__(self, root: str, name: str):
        self.path = os.path.abspath(os.path.join(root, name))
        self._lock_fd: Optional[int] = None
        self._handlers: List[Tuple[Any, Any]] = []

    def sub(self, *parts: str) -> str:
        p = os.path.join(self.path, *parts)
        os.makedirs(os.path.dirname(p) if os.path.splitext(p)[1] else p, exist_ok=True)
        return p

    def __enter__(self) -> "RunDir":
        os.makedirs(self.path, exist_ok=True)
        lock = os.path.join(self.path, LOCK_NAME)
        try:
            self._lock_fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunLockedError(f"{self.path} is in use by another command ({lock})") from exc
        os.write(self._lock_fd, str(os.getpid()).encode())
        for name in PIPELINE_LOGGERS:
            logger = get_logger(name)
            self._handlers.append((logger, attach_run_log(logger, self.path)))
        return self

    def __exit__(self, *exc) -> None:
        for logger, handler in self._handlers:
            detach_run_log(logger, handler)
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            os.remove(os.path.join(self.path, LOCK_NAME))
        self.write_manifest()

    def echo_config(self, command: str, argv: Sequence[str], cfg: Dict[str, Any]) -> str:
        path = os.path.join(self.path, "config.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"command": command, "argv": list(argv), "config": cfg}, fh, indent=2, sort_keys=True)
        return path

    def update_summary(self, stage: str, values: Dict[str, Any]) -> None:
        path = os.path.join(self.path, "summary.json")
        summary = {}
        if os.path.isfile(path):
            with open(path, encoding="utf-8") as fh:
                summary = json.load(fh)
        summary[stage] = values
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)

    def write_error(self, command: str, exc: BaseException) -> str:
        path = os.path.join(self.path, "error.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"command": command, "error": type(exc).__name__, "message": str(exc)}, fh, indent=2)
        return path

    def write_manifest(self) -> str:
        """MANIFEST.txt: every artifact in the run, one relative path per line."""
        out = os.path.join(self.path, "MANIFEST.txt")
        files = []
        for base, _dirs, names in os.walk(self.path):
            for n in names:
                rel = os.path.relpath(os.path.join(base, n), self.path).replace(os.sep, "/")
                if rel not in ("MANIFEST.txt", LOCK_NAME):
                    files.append(rel)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(sorted(files)) + ("\n" if files else ""))
        return out


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, sort_keys=True))


def _train_config(cfg: Dict[str, Any], stage: str) -> TrainConfig:
    return TrainConfig(seed=derive_seed(cfg["seed"], stage), **section(cfg, "training"))


def _schedule(cfg: Dict[str, Any]):
    return make_schedule(**section(cfg, "schedule"))


def _manifest_arg(args, cfg) -> str:
    path = getattr(args, "manifest", None) or cfg["data"]["manifest"]
    if not path:
        raise ConfigError("no manifest given (use --manifest or data.manifest)")
    return path


# ─── commands ────────────────────────────────────────────────────────
def cmd_prepare_data(args, cfg, run: RunDir) -> Dict[str, Any]:
    data = cfg["data"]
    out = args.out or run.sub("data")
    seed = derive_seed(cfg["seed"], "split")
    if args.toy:
        manifest, path = make_toy_glyph_dataset(out, data["toy_classes"], data["toy_per_class"], seed,
                                                data["fractions"], data["image_size"])
    else:
        manifest = manifest_from_folders(args.images_dir, data["fractions"], seed, data["image_size"])
        path = write_manifest(manifest, os.path.join(out, "manifest.txt"))
    result = {"manifest": path, "counts": manifest.split_counts(), "classes": manifest.class_count}
    if data["train_per_class"]:
        sub = subsample_train(manifest, data["train_per_class"], derive_seed(cfg["seed"], "subsample"))
        result["subsampled_manifest"] = write_manifest(sub, os.path.join(out, "manifest_subsampled.txt"))
        result["subsampled_counts"] = sub.split_counts()
    return result


def cmd_train_diffusion(args, cfg, run: RunDir) -> Dict[str, Any]:
    manifest = load_manifest(_manifest_arg(args, cfg), n_jobs=cfg["data"]["n_jobs"])
    sched = _schedule(cfg)
    backbone = BackboneConfig(class_count=manifest.class_count, **section(cfg, "backbone"))
    ckpt = run.sub("checkpoints", "denoiser.joblib")
    _, run_log = train_denoiser(manifest, sched, backbone, _train_config(cfg, "denoiser"),
                                checkpoint_path=ckpt, progress=True, n_jobs=cfg["data"]["n_jobs"])
    run_log.write_jsonl(os.path.join(run.path, "log.jsonl"))
    plot_run_log(run_log, run.sub("reports", "denoiser_loss.png"))
    return {"checkpoint": ckpt, **run_log.summary()}


def cmd_train_guidance(args, cfg, run: RunDir) -> Dict[str, Any]:
    manifest = load_manifest(_manifest_arg(args, cfg), n_jobs=cfg["data"]["n_jobs"])
    sched = _schedule(cfg)
    backbone = BackboneConfig(class_count=manifest.class_count, **section(cfg, "backbone"))
    ckpt = run.sub("checkpoints", "guidance.joblib")
    _, run_log = train_guidance_classifier(manifest, sched, _train_config(cfg, "guidance"), backbone,
                                           max_timestep=args.max_timestep, checkpoint_path=ckpt,
                                           progress=True, n_jobs=cfg["data"]["n_jobs"])
    run_log.write_jsonl(os.path.join(run.path, "log.jsonl"))
    plot_run_log(run_log, run.sub("reports", "guidance_loss.png"))
    return {"checkpoint": ckpt, **run_log.summary()}


def cmd_sample(args, cfg, run: RunDir) -> Dict[str, Any]:
    device = resolve_device(cfg["training"]["device"])
    den = load_checkpoint(args.denoiser, device)
    guid = load_checkpoint(args.guidance, device).model if args.guidance else None
    sched = den.schedule or _schedule(cfg)
    scfg = SamplerConfig(**section(cfg, "sampler"))
    if scfg.steps > sched.T:
        raise ConfigError(f"sampler.steps={scfg.steps} exceeds schedule T={sched.T}")
    labels = scfg.labels_for(den.model.config.class_count)
    records = generate(labels, scfg, den.model, guid, sched, derive_seed(cfg["seed"], "sample"))
    out = args.out or run.sub("samples", "pool")
    saved, sidecar = save_samples(records, out)
    save_sample_grid(saved, run.sub("reports", "samples_grid.png"))
    return {"sidecar": sidecar, "count": len(saved), "guidance_scale": scfg.guidance_scale,
            "method": scfg.method, "steps": scfg.steps}


def _extractor_id(model, path: str) -> str:
    return f"{model.spec.model_id}@{file_sha256(path)[:12]}"


def cmd_filter(args, cfg, run: RunDir) -> Dict[str, Any]:
    fcfg = cfg["filter"]
    threshold = fcfg["threshold"] if args.threshold is None else args.threshold
    pool = load_samples(args.pool, cfg["data"]["image_size"])
    device = resolve_device(cfg["training"]["device"])
    classifiers = {}
    for path in args.model:
        ckpt = load_checkpoint(path, device)
        if ckpt.kind != "downstream":
            raise CheckpointError(f"{path}: a {ckpt.kind} checkpoint cannot filter samples")
        model = ckpt.model
        cid = model.spec.model_id
        if cid in classifiers:  # e.g. baseline and retrained of one family
            cid = os.path.splitext(os.path.basename(path))[0]
        classifiers[cid] = model
    filtered = multi_filter(pool, classifiers, threshold,
                            require_argmax_match=fcfg["require_argmax_match"],
                            n_jobs=cfg["data"]["n_jobs"])
    results = {}
    for cid, (retained, report) in filtered.items():
        sidecar = write_retained(retained, run.sub("samples", f"retained_{cid}.jsonl"))
        report_path = write_filter_report(report, run.sub("reports", f"filter_{cid}.json"))
        results[cid] = {"retained": report.total_retained, "pool": len(pool),
                        "sidecar": sidecar, "report": report_path}
        _emit({"filter": cid, **results[cid]})
    refresh_retention(run)
    return results


def refresh_retention(run: RunDir) -> Optional[str]:
    """Re-render reports/retention.{txt,csv} from the run's filter_*.json and fid_*.json."""
    reports: Dict[str, FilterReport] = {}
    for path in sorted(glob.glob(os.path.join(run.path, "reports", "filter_*.json"))):
        with open(path, encoding="utf-8") as fh:
            report = FilterReport.from_dict(json.load(fh))
        reports[report.filter_model_id] = report
    if not reports:
        return None
    fids: Dict[str, float] = {}
    for path in sorted(glob.glob(os.path.join(run.path, "reports", "fid_*.json"))):
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if "dataset" in payload:
            fids[payload["dataset"]] = payload["fid"]
    pool_fid = fids.pop(UNFILTERED, None)
    df = retention_table(reports, fids, pool_fid=pool_fid)
    txt = run.sub("reports", "retention.txt")
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write(render_table(df) + "\n")
    df.to_csv(run.sub("reports", "retention.csv"), index=False)
    log.info("\n%s", render_table(df))
    return txt


def cmd_fuse(args, cfg, run: RunDir) -> Dict[str, Any]:
    real = load_manifest(_manifest_arg(args, cfg), n_jobs=cfg["data"]["n_jobs"])
    retained = load_samples(args.retained, real.image_size)
    fused = fuse_datasets(real, retained)
    out = args.out or run.sub("data", "fused_manifest.txt")
    write_manifest(fused, out)
    return {"manifest": out, "counts": fused.split_counts(), "synthetic": len(retained)}


def cmd_train_classifier(args, cfg, run: RunDir) -> Dict[str, Any]:
    manifest_path = _manifest_arg(args, cfg)
    manifest = load_manifest(manifest_path, n_jobs=cfg["data"]["n_jobs"])
    ccfg = cfg["classifier"]
    spec = DownstreamModelSpec(args.family or ccfg["family"], manifest.class_count,
                               args.preset or ccfg["depth_preset"], manifest.image_size)
    ckpt = run.sub("checkpoints", f"{spec.model_id}_{args.role}.joblib")
    _, run_log, report = train_downstream(
        manifest, spec, _train_config(cfg, f"classifier:{spec.model_id}:{args.role}"),
        checkpoint_path=ckpt, manifest_path=manifest_path, progress=True, n_jobs=cfg["data"]["n_jobs"],
    )
    run_log.write_jsonl(os.path.join(run.path, "log.jsonl"))
    plot_run_log(run_log, run.sub("reports", f"{spec.model_id}_{args.role}_loss.png"))
    return {"checkpoint": ckpt, "test": report.to_dict(), **run_log.summary()}


def refresh_comparison(run: RunDir) -> Optional[str]:
    """Re-render reports/comparison.{txt,csv} from every eval_*.json in the run."""
    reports: Dict[str, Dict[str, EvalReport]] = {"baseline": {}, "retrained": {}}
    for path in sorted(glob.glob(os.path.join(run.path, "reports", "eval_*.json"))):
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        reports[payload["role"]][payload["model_id"]] = EvalReport.from_dict(payload["report"])
    if not any(reports.values()):
        return None
    df = comparison_table(reports["baseline"], reports["retrained"])
    txt = run.sub("reports", "comparison.txt")
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write(render_table(df) + "\n")
    df.to_csv(run.sub("reports", "comparison.csv"), index=False)
    log.info("\n%s", render_table(df))
    return txt


def cmd_evaluate(args, cfg, run: RunDir) -> Dict[str, Any]:
    manifest = load_manifest(_manifest_arg(args, cfg), n_jobs=cfg["data"]["n_jobs"])
    model = load_checkpoint(args.model, resolve_device(cfg["training"]["device"])).model
    images, labels, _ = load_split(manifest, args.split, cfg["data"]["n_jobs"])
    report = evaluate_model(model, images, labels, manifest.class_count)
    spec = model.spec
    out = run.sub("reports", f"eval_{spec.family}_{args.role}.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"model_id": spec.model_id, "role": args.role, "split": args.split,
                   "checkpoint": os.path.abspath(args.model), "report": report.to_dict()},
                  fh, indent=2, sort_keys=True)
    refresh_comparison(run)
    return {"report": out, "accuracy": report.accuracy, "loss": report.loss}


def _fid_dataset(args) -> str:
    if args.dataset:
        return args.dataset
    stem = os.path.splitext(os.path.basename(args.synthetic))[0]
    return stem[len("retained_"):] if stem.startswith("retained_") else UNFILTERED


def cmd_fid(args, cfg, run: RunDir) -> Dict[str, Any]:
    real = load_manifest(args.real, n_jobs=cfg["data"]["n_jobs"])
    real_images, _, _ = load_split(real, args.split, cfg["data"]["n_jobs"])
    samples = load_samples(args.synthetic, real.image_size)
    synthetic = (np.stack([r.image for r in samples]) if samples
                 else np.zeros((0, 1, real.image_size, real.image_size), np.float32))
    device = resolve_device(cfg["training"]["device"])
    if args.extractor == "inception":
        extractor, extractor_id = InceptionExtractor().to(device), "inception-v3-pool"
    else:
        extractor = load_checkpoint(args.extractor, device).model
        extractor_id = _extractor_id(extractor, args.extractor)
    layer = cfg["metrics"]["layer"]
    fid = fid_between_sets(real_images, synthetic, extractor, layer, extractor_id)
    dataset = _fid_dataset(args)
    payload = {"fid": fid, "n_real": int(len(real_images)), "n_synthetic": int(len(synthetic)),
               "extractor_id": extractor_id, "layer": layer, "dataset": dataset}
    name = args.name or f"fid_{dataset}"
    with open(run.sub("reports", f"{name}.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    refresh_retention(run)
    _emit(payload)
    return payload


HANDLERS = {
    "prepare-data": cmd_prepare_data,
    "train-diffusion": cmd_train_diffusion,
    "train-guidance": cmd_train_guidance,
    "sample": cmd_sample,
    "filter": cmd_filter,
    "fuse": cmd_fuse,
    "train-classifier": cmd_train_classifier,
    "evaluate": cmd_evaluate,
    "fid": cmd_fid,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = split_overrides(extra)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = resolve_config(_file_config(args.config), overrides)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2

    run = RunDir(args.runs_root, args.run_name)
    rc, result = 0, {}
    try:
        with run:
            run.echo_config(args.command, argv, cfg)
            log.info("▶ %s  (run %s, seed %d)", args.command, run.path, cfg["seed"])
            try:
                result = HANDLERS[args.command](args, cfg, run)
                run.update_summary(args.command, result)
            except ConfigError as exc:
                print(f"usage error: {exc}", file=sys.stderr)
                run.write_error(args.command, exc)
                rc = 2
            except (GlyphDiffError, ValueError, OSError) as exc:
                log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
                print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
                run.write_error(args.command, exc)
                rc = 1
    except RunLockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if rc == 0 and args.command not in ("filter", "fid"):
        _emit({"command": args.command, **{k: v for k, v in result.items() if k != "test"}})
    return rc


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
