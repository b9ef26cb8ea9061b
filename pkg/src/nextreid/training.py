"""Optimisation loop, embedding extraction and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import AugmentationConfig, DatasetIndex, MultiModalSample, augment, pk_batches
from .encoders import MODALITIES
from .model import LossReport, NextConfig, NextNet, NextOutput, final_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class Batch:
    images: torch.Tensor  # (B, M, 3, H, W)
    labels: torch.Tensor | None
    captions: list[Mapping]
    sample_ids: list[str]


def collate(
    samples: Sequence[MultiModalSample],
    label_map: Mapping[int, int] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    arr = np.stack([np.stack([s.images[m] for m in MODALITIES]) for s in samples])  # B, M, H, W, C
    images = torch.from_numpy(arr).permute(0, 1, 4, 2, 3).to(dtype) / 255.0
    labels = None
    if label_map is not None:
        labels = torch.tensor([label_map[s.identity] for s in samples], dtype=torch.long)
    return Batch(images, labels, [s.captions for s in samples], [s.sample_id for s in samples])


def make_optimizer(model: NextNet, cfg: NextConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.momentum, 0.999), weight_decay=cfg.weight_decay)


def mask_densities(out: NextOutput) -> dict:
    return {
        f"expert{i}": {m: float(st.mask.mean()) for m, st in zip(MODALITIES, row)}
        for i, row in enumerate(out.route_states)
    }


def omega_summary(out: NextOutput) -> dict | None:
    if out.omega is None:
        return None
    w = out.omega.detach().reshape(-1, out.omega.shape[-1])
    return {"mean": w.mean(0).tolist(), "min": float(w.min()), "max": float(w.max())}


def _diagnostics(model: NextNet, out: NextOutput | None, step: int, parts) -> dict:
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    return {
        "step": step,
        "losses": [float(x.detach()) for x in parts],
        "nonfinite_parameters": bad,
        "embedding_finite": None if out is None else bool(torch.isfinite(out.embedding).all()),
        "mask_density": None if out is None else mask_densities(out),
    }


def train_step(
    model: NextNet,
    batch: Batch,
    optimizer: torch.optim.Optimizer,
    step: int = 0,
    diagnostics_path: str | Path | None = None,
) -> tuple[LossReport, NextOutput]:
    model.train()
    out = model(batch.images, batch.captions, batch.sample_ids, step)
    total, l_id, l_tri = final_loss(out, batch.labels, model.cfg)
    if not torch.isfinite(total):
        diag = _diagnostics(model, out, step, (l_id, l_tri))
        if diagnostics_path is not None:
            Path(diagnostics_path).write_text(json.dumps(diag, indent=1) + "\n")
        raise FloatingPointError(f"non-finite loss at step {step}: {diag}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    acc = float((out.logits.argmax(1) == batch.labels).float().mean())
    return LossReport.from_parts(l_id.item(), l_tri.item(), acc), out


@dataclass
class TrainConfig:
    steps: int = 300
    P: int = 4
    K: int = 4
    seed: int = 0
    augmentation: AugmentationConfig | None = field(default_factory=AugmentationConfig)
    eval_every: int = 0

    def __post_init__(self):
        if isinstance(self.augmentation, Mapping):
            self.augmentation = AugmentationConfig(**{**self.augmentation, "crop_size": self.augmentation.get("crop_size") and tuple(self.augmentation["crop_size"])})


def fit(
    model: NextNet,
    index: DatasetIndex,
    tcfg: TrainConfig,
    log_path: str | Path | None = None,
    evaluate: Callable[[NextNet], float] | None = None,
    on_best: Callable[[NextNet, int, float], None] | None = None,
) -> list[LossReport]:
    """Train for ``tcfg.steps`` PK batches; ``evaluate`` returns a score to maximise."""
    torch.manual_seed(tcfg.seed)
    label_map = index.label_map()
    optimizer = make_optimizer(model, model.cfg)
    sched = None
    if model.cfg.cosine_decay:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, tcfg.steps)
    dtype = next(model.parameters()).dtype
    stream = pk_batches(index, tcfg.P, tcfg.K, tcfg.seed, epochs=None)
    log = open(log_path, "w") if log_path else None
    history, best = [], -math.inf
    try:
        for step in range(tcfg.steps):
            samples = next(stream)
            if tcfg.augmentation is not None:
                rng = np.random.default_rng([tcfg.augmentation.seed, tcfg.seed, step])
                samples = [augment(s, tcfg.augmentation, rng) for s in samples]
            batch = collate(samples, label_map, dtype)
            diag = Path(log_path).with_suffix(".nan.json") if log_path else None
            report, out = train_step(model, batch, optimizer, step, diag)
            lr = optimizer.param_groups[0]["lr"]
            if sched is not None:
                sched.step()
            history.append(report)
            record = {
                "step": step,
                "id_loss": report.id_loss,
                "triplet_loss": report.triplet_loss,
                "total": report.total,
                "accuracy": report.accuracy,
                "lr": lr,
                "mask_density": mask_densities(out),
                "omega": omega_summary(out),
            }
            if evaluate is not None and tcfg.eval_every and ((step + 1) % tcfg.eval_every == 0 or step + 1 == tcfg.steps):
                score = evaluate(model)
                record["eval"] = score
                if score > best:
                    best = score
                    if on_best is not None:
                        on_best(model, step, score)
            if log is not None:
                log.write(json.dumps(record) + "\n")
            if step % 50 == 0:
                logger.info("step %d total %.4f tri %.4f acc %.3f", step, report.total, report.triplet_loss, report.accuracy)
    finally:
        if log is not None:
            log.close()
    return history


@torch.no_grad()
def embed(model: NextNet, samples: Sequence[MultiModalSample], batch_size: int = 64) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    chunks = []
    for start in range(0, len(samples), batch_size):
        b = collate(samples[start:start + batch_size], None, dtype)
        chunks.append(model(b.images, b.captions, b.sample_ids).embedding.cpu().numpy())
    return np.concatenate(chunks) if chunks else np.zeros((0, model.cfg.embedding_dim))


# --------------------------------------------------------------------------
# checkpoints: a .npz archive of named parameter arrays plus a JSON config echo

def save_checkpoint(path: str | Path, model: NextNet, extra: Mapping | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "num_classes": model.num_classes,
        "extra": dict(extra or {}),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, __meta__=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[NextNet, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        model = NextNet(NextConfig.from_dict(meta["config"]), meta["num_classes"])
        state = {k: torch.from_numpy(z[k]) for k in z.files if k != "__meta__"}
    model.load_state_dict(state)
    model.eval()
    return model, meta
