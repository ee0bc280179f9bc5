"""Training loops for the denoiser, the noisy guidance classifier and the downstream recognisers.

All three share one loop (``_fit``): AdamW, optional cosine LR and EMA, early
stopping on validation loss with restore-best, one ``EpochRecord`` per
evaluated epoch.

Validation noise for the diffusion models is keyed by record identity, not by
position: every validation image always gets the same (t, ε), so validation
loss is a deterministic function of the weights.
"""

from __future__ import annotations

import copy
import math
import os
import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.optim import AdamW
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.optim.swa_utils import AveragedModel
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from backbone import BackboneConfig, SEUNet
from checkpoints import save_checkpoint, write_model_card
from classifiers import DownstreamModelSpec, GuidanceClassifier, build_downstream, predict_logits
from config import (
    BATCH_SIZE,
    DEVICE,
    EARLY_STOP_PATIENCE,
    LEARNING_RATE,
    MAX_EPOCHS,
    WEIGHT_DECAY,
    derive_seed,
)
from data_ingestion import DatasetManifest, load_split
from errors import EmptySplit, NonFiniteLoss
from logger_setup import get_logger
from metrics import EvalReport, classification_report
from schedule import NoiseSchedule, q_sample
from utils.run_recorder import EpochRecord, RunLog

log = get_logger(__name__)

Split = Tuple[np.ndarray, np.ndarray, np.ndarray]   # images, labels, keys


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = LEARNING_RATE
    batch_size: int = BATCH_SIZE
    max_epochs: int = MAX_EPOCHS
    early_stop_patience: int = EARLY_STOP_PATIENCE
    weight_decay: float = WEIGHT_DECAY
    seed: int = 0
    ema_decay: Optional[float] = None
    eval_every: int = 1
    lr_schedule: str = "constant"      # "constant" | "cosine"
    num_workers: int = 0
    device: str = DEVICE
    precision: str = "float32"         # "float32" | "float64"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.early_stop_patience < 1:
            raise ValueError(f"early_stop_patience must be ≥ 1, got {self.early_stop_patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be ≥ 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.eval_every < 1:
            raise ValueError("max_epochs must be ≥ 0 and eval_every ≥ 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in (0, 1), got {self.ema_decay}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


def resolve_device(name: str = DEVICE) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


# ─── early stopping ──────────────────────────────────────────────────
class EarlyStopping:
    """Stop once validation loss has not improved for *patience* evaluations."""

    def __init__(self, patience: int = EARLY_STOP_PATIENCE):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: Optional[int] = None
        self.bad_evals = 0
        self.best_state: Optional[Dict[str, torch.Tensor]] = None

    def step(self, epoch: int, val_loss: float, model: Optional[nn.Module] = None) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_evals = 0
            if model is not None:
                self.best_state = copy.deepcopy(model.state_dict())
        else:
            self.bad_evals += 1
        return self.bad_evals >= self.patience

    def restore(self, model: nn.Module) -> nn.Module:
        if self.best_state is not None:
            model.load_state_dict(self.best_state)
        return model


# ─── batch losses ────────────────────────────────────────────────────
def _draw(batch: torch.Tensor, T: int, gen: torch.Generator, max_t: Optional[int] = None):
    """Per-example t ~ U{0..T−1} (or U{0..max_t}) and ε ~ N(0, I) from *gen* on the CPU."""
    hi = T if max_t is None else max_t + 1
    t = torch.randint(0, hi, (batch.shape[0],), generator=gen)
    eps = torch.randn(batch.shape, generator=gen, dtype=torch.float32)
    return t.to(batch.device), eps.to(batch.device, batch.dtype)


def denoiser_loss(model: SEUNet, x0, y, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """mean ‖ε − ε̂(q_sample(x0, t, ε), t, y)‖²."""
    return F.mse_loss(model(q_sample(x0, t, eps, sched), t, y), eps)


def guidance_loss(model: GuidanceClassifier, x0, y, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    return F.cross_entropy(model(q_sample(x0, t, eps, sched), t), y)


def train_step(model: nn.Module, optimizer: torch.optim.Optimizer, loss_fn: Callable[[], torch.Tensor]) -> float:
    """One optimizer step on whatever batch *loss_fn* closes over; returns the pre-step loss."""
    optimizer.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()}")
    loss.backward()
    optimizer.step()
    return float(loss.item())


# ─── keyed validation ────────────────────────────────────────────────
def keyed_noise(keys, seed: int, T: int, shape, max_t: Optional[int] = None):
    """One fixed (t, ε) per record key."""
    hi = T if max_t is None else max_t + 1
    ts, eps = [], []
    for k in keys:
        g = torch.Generator().manual_seed(derive_seed(seed, f"val:{int(k)}"))
        ts.append(int(torch.randint(0, hi, (1,), generator=g)))
        eps.append(torch.randn(tuple(shape), generator=g, dtype=torch.float32))
    if not ts:
        return torch.zeros(0, dtype=torch.long), torch.zeros((0, *shape))
    return torch.tensor(ts, dtype=torch.long), torch.stack(eps)


def _batched_eval(model, data: Split, seed, sched, per_example, batch_size, max_t=None):
    images, labels, keys = data
    p = next(model.parameters())
    t_all, eps_all = keyed_noise(keys, seed, sched.T, images.shape[1:], max_t)
    outs = []
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(images), batch_size):
            hi = lo + batch_size
            x0 = torch.as_tensor(images[lo:hi]).to(p.device, p.dtype)
            y = torch.as_tensor(labels[lo:hi]).to(p.device)
            t = t_all[lo:hi].to(p.device)
            eps = eps_all[lo:hi].to(p.device, p.dtype)
            outs.append(per_example(model, q_sample(x0, t, eps, sched), t, y, eps))
    return torch.cat(outs).double()


def denoiser_validation_loss(model: SEUNet, data: Split, sched: NoiseSchedule, seed: int,
                             batch_size: int = 256) -> float:
    def per_example(m, x_t, t, y, eps):
        return ((m(x_t, t, y) - eps) ** 2).flatten(1).mean(dim=1)

    return float(_batched_eval(model, data, seed, sched, per_example, batch_size).mean())


def guidance_validation_loss(model: GuidanceClassifier, data: Split, sched: NoiseSchedule, seed: int,
                             batch_size: int = 256, max_t: Optional[int] = None) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy) under keyed noise."""
    def per_example(m, x_t, t, y, eps):
        logits = m(x_t, t)
        ce = F.cross_entropy(logits, y, reduction="none")
        hit = (logits.argmax(dim=1) == y).to(ce.dtype)
        return torch.stack([ce, hit], dim=1)

    out = _batched_eval(model, data, seed, sched, per_example, batch_size, max_t)
    return float(out[:, 0].mean()), float(out[:, 1].mean())


def evaluate_model(model: nn.Module, images: np.ndarray, labels: np.ndarray,
                   class_count: Optional[int] = None, batch_size: int = 256) -> EvalReport:
    """EvalReport with mean cross-entropy as loss."""
    if len(images) == 0:
        raise EmptySplit("nothing to evaluate")
    k = class_count or model.spec.class_count
    logits = torch.from_numpy(predict_logits(model, images, batch_size))
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    loss = float(F.cross_entropy(logits, y))
    return classification_report(logits.argmax(dim=1).numpy(), y.numpy(), k, loss=loss)


# ─── shared loop ─────────────────────────────────────────────────────
BatchLoss = Callable[[nn.Module, torch.Tensor, torch.Tensor, torch.Generator], Tuple[torch.Tensor, str]]
ValFn = Callable[[nn.Module], Tuple[float, Dict[str, float]]]


def _ema(model: nn.Module, decay: float) -> AveragedModel:
    return AveragedModel(model, avg_fn=lambda avg, p, _n: decay * avg + (1.0 - decay) * p)


def _fit(model: nn.Module, name: str, train: Split, batch_loss: BatchLoss,
         val_fn: Optional[ValFn], cfg: TrainConfig, progress: bool = False) -> Tuple[nn.Module, RunLog]:
    images, labels, _ = train
    if len(images) == 0:
        raise EmptySplit(f"{name}: train split is empty")
    device = resolve_device(cfg.device)
    model.to(device=device, dtype=cfg.dtype)
    optimizer = AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    lr_sched = CosineAnnealingLR(optimizer, T_max=max(cfg.max_epochs, 1)) if cfg.lr_schedule == "cosine" else None
    ema = _ema(model, cfg.ema_decay) if cfg.ema_decay else None
    stopper = EarlyStopping(cfg.early_stop_patience)
    run_log = RunLog(name)

    loader = DataLoader(
        TensorDataset(torch.from_numpy(images), torch.from_numpy(labels)),
        batch_size=cfg.batch_size, shuffle=True, num_workers=cfg.num_workers,
        generator=torch.Generator().manual_seed(derive_seed(cfg.seed, f"shuffle:{name}")),
    )
    noise_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, f"noise:{name}"))

    reason = "max_epochs"
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            model.train()
            total, seen = 0.0, 0
            for b, (xb, yb) in enumerate(tqdm(loader, desc=f"{name} {epoch}", disable=not progress, leave=False)):
                xb, yb = xb.to(device, cfg.dtype), yb.to(device)
                detail: Dict[str, str] = {}

                def loss_fn(xb=xb, yb=yb, detail=detail):
                    loss, detail["batch"] = batch_loss(model, xb, yb, noise_gen)
                    return loss

                try:
                    value = train_step(model, optimizer, loss_fn)
                except NonFiniteLoss as exc:
                    raise NonFiniteLoss(
                        f"{name}: {exc} at epoch {epoch}, batch {b} ({detail.get('batch')})"
                    ) from exc
                if ema is not None:
                    ema.update_parameters(model)
                total += value * len(xb)
                seen += len(xb)
            if lr_sched is not None:
                lr_sched.step()
            train_loss = total / seen

            if epoch % cfg.eval_every and epoch != cfg.max_epochs:
                continue
            scored = model
            if ema is not None:
                for b_avg, b_live in zip(ema.module.buffers(), model.buffers()):
                    b_avg.copy_(b_live)
                scored = ema.module
            val_loss, val_metrics = val_fn(scored) if val_fn is not None else (train_loss, {})
            stop = stopper.step(epoch, val_loss, scored)
            run_log.add(EpochRecord(epoch, train_loss, val_loss, val_metrics, time.perf_counter() - started))
            log.info("%s epoch %3d  train %.5f  val %.5f%s", name, epoch, train_loss, val_loss,
                     "".join(f"  {k} {v:.4f}" for k, v in val_metrics.items()))
            if stop:
                reason = "early_stop"
                break
    except KeyboardInterrupt:
        reason = "user"
        log.warning("%s interrupted; keeping the best epoch so far", name)

    stopper.restore(model)
    model.eval()
    run_log.finish(reason)
    log.info("%s done: %d epochs, best epoch %s (val %.5f), stop=%s", name, len(run_log.records),
             run_log.best_epoch, stopper.best_loss, reason)
    return model, run_log


def _load(manifest: DatasetManifest, split: str, n_jobs: int) -> Split:
    return load_split(manifest, split, n_jobs=n_jobs)


def _init_seed(cfg: TrainConfig, stage: str) -> None:
    torch.manual_seed(derive_seed(cfg.seed, f"init:{stage}"))


# ─── public trainers ─────────────────────────────────────────────────
def train_denoiser(
    manifest: DatasetManifest,
    sched: NoiseSchedule,
    backbone_config: BackboneConfig,
    train_config: TrainConfig,
    checkpoint_path: Optional[str] = None,
    progress: bool = False,
    n_jobs: int = 1,
) -> Tuple[SEUNet, RunLog]:
    train, val = _load(manifest, "train", n_jobs), _load(manifest, "val", n_jobs)
    if len(train[0]) == 0:
        raise EmptySplit("denoiser: train split is empty")
    cfg = replace(backbone_config, class_count=manifest.class_count, timesteps=sched.T,
                  image_size=manifest.image_size)
    _init_seed(train_config, "denoiser")
    model = SEUNet(cfg)
    log.info("Denoiser: %d train / %d val images, T=%d", len(train[0]), len(val[0]), sched.T)

    def batch_loss(m, x0, y, gen):
        t, eps = _draw(x0, sched.T, gen)
        return denoiser_loss(m, x0, y, t, eps, sched), f"t in [{int(t.min())}, {int(t.max())}]"

    val_fn = None
    if len(val[0]):
        def val_fn(m):
            return denoiser_validation_loss(m, val, sched, train_config.seed, train_config.batch_size), {}
    model, run_log = _fit(model, "denoiser", train, batch_loss, val_fn, train_config, progress)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, "denoiser", sched, {"seed": train_config.seed, **run_log.summary()})
    return model, run_log


def train_guidance_classifier(
    manifest: DatasetManifest,
    sched: NoiseSchedule,
    train_config: TrainConfig,
    backbone_config: Optional[BackboneConfig] = None,
    max_timestep: Optional[int] = None,
    checkpoint_path: Optional[str] = None,
    progress: bool = False,
    n_jobs: int = 1,
) -> Tuple[GuidanceClassifier, RunLog]:
    """Cross-entropy on q_sample(x0, t, ε); ``max_timestep`` limits t to {0..max_timestep}."""
    train, val = _load(manifest, "train", n_jobs), _load(manifest, "val", n_jobs)
    if len(train[0]) == 0:
        raise EmptySplit("guidance: train split is empty")
    base = backbone_config or BackboneConfig(class_count=manifest.class_count)
    cfg = replace(base, class_count=manifest.class_count, timesteps=sched.T, image_size=manifest.image_size)
    _init_seed(train_config, "guidance")
    model = GuidanceClassifier(cfg)

    def batch_loss(m, x0, y, gen):
        t, eps = _draw(x0, sched.T, gen, max_timestep)
        return guidance_loss(m, x0, y, t, eps, sched), f"t in [{int(t.min())}, {int(t.max())}]"

    val_fn = None
    if len(val[0]):
        def val_fn(m):
            loss, acc = guidance_validation_loss(m, val, sched, train_config.seed,
                                                 train_config.batch_size, max_timestep)
            return loss, {"accuracy": acc}
    model, run_log = _fit(model, "guidance", train, batch_loss, val_fn, train_config, progress)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, "guidance", sched, {"seed": train_config.seed, **run_log.summary()})
    return model, run_log


def train_downstream(
    manifest: DatasetManifest,
    spec: DownstreamModelSpec,
    train_config: TrainConfig,
    checkpoint_path: Optional[str] = None,
    manifest_path: Optional[str] = None,
    progress: bool = False,
    n_jobs: int = 1,
) -> Tuple[nn.Module, RunLog, EvalReport]:
    """Supervised cross-entropy; origin (real / synthetic) plays no part in the loss."""
    train = _load(manifest, "train", n_jobs)
    val = _load(manifest, "val", n_jobs)
    test = _load(manifest, "test", n_jobs)
    if len(test[0]) == 0:
        raise EmptySplit("downstream: test split is empty")
    _init_seed(train_config, f"downstream:{spec.model_id}")
    model = build_downstream(spec)

    def batch_loss(m, x, y, _gen):
        return F.cross_entropy(m(x), y), f"{len(x)} images"

    val_fn = None
    if len(val[0]):
        def val_fn(m):
            r = evaluate_model(m, val[0], val[1], spec.class_count, train_config.batch_size)
            return r.loss, {"accuracy": r.accuracy, "f1_macro": r.f1_macro}
    model, run_log = _fit(model, spec.model_id, train, batch_loss, val_fn, train_config, progress)
    report = evaluate_model(model, test[0], test[1], spec.class_count, train_config.batch_size)
    log.info("%s test: loss %.4f  acc %.4f  precision %.4f  recall %.4f", spec.model_id,
             report.loss, report.accuracy, report.precision_macro, report.recall_macro)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, "downstream", None,
                        {"seed": train_config.seed, "test": report.to_dict(), **run_log.summary()})
        card = os.path.splitext(checkpoint_path)[0] + "_model_card.txt"
        write_model_card(card, model, train_config.seed, manifest_path)
    return model, run_log, report


def plot_run_log(run_log: RunLog, path: str) -> str:
    """Train / validation loss curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    df = run_log.to_frame()
    fig, ax = plt.subplots(figsize=(6, 4))
    if not df.empty:
        ax.plot(df["epoch"], df["train_loss"], label="train")
        ax.plot(df["epoch"], df["val_loss"], label="val")
        if run_log.best_epoch is not None:
            ax.axvline(run_log.best_epoch, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(run_log.name)
    ax.legend()
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
