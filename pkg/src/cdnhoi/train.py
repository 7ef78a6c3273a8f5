"""Two-phase training, checkpoints, batched inference and attention dumps."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ConfigError, TrainConfig
from .data import HoiDataset, ScoredTriplet
from .loss import compute_loss
from .matching import make_target, match_batch
from .model.cdn import CDN, images_to_tensor
from .postprocess import compose_triplets, detections_for_batch
from .reweighting import DynamicReweighter

log = logging.getLogger(__name__)

PHASE_MAIN = "main"
PHASE_DECOUPLE = "decouple"


class NumericalError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict
    epoch: int
    phase: str
    config: dict
    fingerprint: str
    history: list = field(default_factory=list)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.__dict__, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(**torch.load(path, map_location="cpu", weights_only=True))

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({k: v for k, v in self.config.items()})


def _dtype(cfg: TrainConfig):
    return torch.float64 if cfg.train.dtype == "float64" else torch.float32


def setup_determinism(seed: int):
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def build_model(cfg: TrainConfig) -> CDN:
    return CDN(cfg.model).to(_dtype(cfg))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Main-phase learning rate: dropped tenfold from ``lr_drop_epoch`` on (0-based epochs)."""
    return cfg.train.lr_main * (0.1 if epoch >= cfg.train.lr_drop_epoch else 1.0)


def parameter_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _check_vocab(cfg: TrainConfig, dataset: HoiDataset):
    if (cfg.model.num_object_classes, cfg.model.num_action_classes) != (
            dataset.num_object_classes, dataset.num_action_classes):
        raise ConfigError(f"model is configured for {cfg.model.num_object_classes} objects / "
                          f"{cfg.model.num_action_classes} actions, dataset has "
                          f"{dataset.num_object_classes} / {dataset.num_action_classes}")


def _dump_batch(dump_dir, epoch, ids, breakdown):
    if dump_dir is None:
        return None
    path = Path(dump_dir) / "nonfinite_batch.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"epoch": epoch, "image_ids": ids,
                                "loss": {k: repr(v) for k, v in breakdown.as_dict().items()}}, indent=1))
    return path


def _run_epochs(model, optimizer, cfg, images, dataset, epochs, start_epoch, lr_fn, reweighter,
                dump_dir, callback, history, phase):
    dtype = _dtype(cfg)
    x_all = images_to_tensor(images, dtype)
    targets = [make_target(r, dataset.num_action_classes, dtype) for r in dataset.images]
    ids = [r.image_id for r in dataset.images]
    params = [p for g in optimizer.param_groups for p in g["params"]]
    bs = cfg.train.batch_size
    for epoch in range(start_epoch, start_epoch + epochs):
        lr = lr_fn(epoch)
        for g in optimizer.param_groups:
            g["lr"] = lr
        model.train()
        gen = torch.Generator().manual_seed(cfg.train.seed * 100003 + epoch)
        order = torch.randperm(len(targets), generator=gen).tolist()
        totals, terms = [], {}
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            batch_t = [targets[i] for i in idx]
            out = model(x_all[idx])
            assignments = match_batch(out, batch_t, cfg.loss)
            w_o = w_a = None
            if reweighter is not None:
                w_o, w_a = reweighter.update(batch_t, assignments, dtype)
            breakdown = compute_loss(out, batch_t, assignments, cfg.loss, w_o, w_a)
            if not torch.isfinite(breakdown.total):
                path = _dump_batch(dump_dir, epoch, [ids[i] for i in idx], breakdown)
                raise NumericalError(f"non-finite loss at epoch {epoch} ({phase} phase); "
                                     f"batch dumped to {path}")
            optimizer.zero_grad()
            breakdown.total.backward()
            if cfg.train.clip_max_norm > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.train.clip_max_norm)
            optimizer.step()
            totals.append(float(breakdown.total.detach()))
            for k, v in breakdown.as_dict().items():
                terms[k] = terms.get(k, 0.0) + v
        entry = {"phase": phase, "epoch": epoch, "lr": lr, "loss": float(np.mean(totals)),
                 **{k: v / len(totals) for k, v in terms.items() if k != "total"}}
        history.append(entry)
        if cfg.train.log_every and (epoch + 1) % cfg.train.log_every == 0:
            log.info("%s epoch %d lr %.2e loss %.5f", phase, epoch, lr, entry["loss"])
        if callback is not None and callback(epoch, model):
            return epoch
    return start_epoch + epochs - 1


def train(cfg: TrainConfig, images: Sequence[np.ndarray], dataset: HoiDataset, out_dir=None,
          callback: Callable[[int, CDN], bool] | None = None) -> Checkpoint:
    """Main phase: train the whole model with unweighted losses.

    ``callback(epoch, model)`` runs after each epoch; returning True stops early.
    """
    cfg.validate()
    _check_vocab(cfg, dataset)
    setup_determinism(cfg.train.seed)
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.train.lr_main,
                                  weight_decay=cfg.train.weight_decay)
    history: list = []
    last = _run_epochs(model, optimizer, cfg, images, dataset, cfg.train.epochs_main, 0,
                       lambda e: lr_at(e, cfg), None, out_dir, callback, history, PHASE_MAIN)
    ckpt = Checkpoint(model.state_dict(), optimizer.state_dict(), last, PHASE_MAIN, cfg.to_dict(),
                      cfg.fingerprint(), history)
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "checkpoint_main.pt")
    return ckpt


def load_model(ckpt: Checkpoint, cfg: TrainConfig | None = None) -> CDN:
    cfg = cfg or ckpt.train_config()
    if cfg.fingerprint() != ckpt.fingerprint:
        raise ConfigError(f"config fingerprint {cfg.fingerprint()} does not match checkpoint "
                          f"{ckpt.fingerprint}")
    model = build_model(cfg)
    model.load_state_dict(ckpt.model_state)
    return model


def finetune_reweight(ckpt: Checkpoint, cfg: TrainConfig, images: Sequence[np.ndarray],
                      dataset: HoiDataset, out_dir=None,
                      callback: Callable[[int, CDN], bool] | None = None) -> Checkpoint:
    """Decoupled phase: freeze the feature extractor, fine-tune decoders and heads
    with re-weighted classification losses."""
    cfg.validate()
    _check_vocab(cfg, dataset)
    if ckpt.phase != PHASE_MAIN:
        warnings.warn(f"fine-tuning from a {ckpt.phase!r} checkpoint; expected a main-phase checkpoint")
    setup_determinism(cfg.train.seed)
    model = load_model(ckpt, cfg)
    for p in model.extractor.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.AdamW(model.decoders.parameters(), lr=cfg.train.lr_decouple,
                                  weight_decay=cfg.train.weight_decay)
    rw = cfg.reweight
    reweighter = DynamicReweighter(dataset, cfg.model.num_queries, rw.p_o, rw.p_a, rw.L_Q_o, rw.L_Q_a,
                                   rw.reweight_objects, rw.reweight_actions, rw.gamma_mode)
    history = list(ckpt.history)
    start = ckpt.epoch + 1
    last = _run_epochs(model, optimizer, cfg, images, dataset, cfg.train.epochs_decouple, start,
                       lambda e: cfg.train.lr_decouple, reweighter, out_dir, callback, history,
                       PHASE_DECOUPLE)
    for p in model.extractor.parameters():
        p.requires_grad_(True)
    out = Checkpoint(model.state_dict(), optimizer.state_dict(), last, PHASE_DECOUPLE, cfg.to_dict(),
                     cfg.fingerprint(), history)
    if out_dir is not None:
        out.save(Path(out_dir) / "checkpoint_decouple.pt")
    return out


@torch.no_grad()
def predict(model: CDN, images: Sequence[np.ndarray], dataset: HoiDataset, cfg: TrainConfig,
            batch_size: int = 16) -> list[ScoredTriplet]:
    """Post-processed triplets for every image, concatenated in dataset order."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out: list[ScoredTriplet] = []
    recs = dataset.images
    for start in range(0, len(recs), batch_size):
        chunk = recs[start:start + batch_size]
        x = images_to_tensor(images[start:start + batch_size], dtype)
        res = detections_for_batch(model(x), [(r.width, r.height) for r in chunk],
                                   [r.image_id for r in chunk], cfg.pnms)
        for trips in res:
            out.extend(trips)
    return out


@torch.no_grad()
def dump_attention(model: CDN, image: np.ndarray, out_dir, image_id: str = "image") -> list[Path]:
    """Write the last-layer co-attention map of the top-scoring query for both decoders.

    Each map is ``(H', W')``, averaged over heads, and saved as ``.npy``.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(images_to_tensor([image], dtype), return_attention=True)
    pairs = out.pairs.layer(-1)
    trips = compose_triplets(pairs.human_boxes[0], pairs.object_boxes[0], pairs.object_logits[0],
                             pairs.interactive_logits[0], out.action_logits[-1][0])
    top = max(trips, key=lambda t: t.score).query
    h, w = out.features.height, out.features.width
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("hopd", "interaction"):
        amap = out.attention[name][-1][0, top].reshape(h, w).to(torch.float64).numpy()
        path = out_dir / f"{image_id}_{name}.npy"
        np.save(path, amap)
        paths.append(path)
    return paths


def is_finite_model(model: CDN) -> bool:
    return all(math.isfinite(float(p.detach().abs().sum())) for p in model.parameters())
