"""Two-stage training: supervised HOI detector, then projector/decoder fine-tuning."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .captioner import CaptionDecoderConfig, GenerationConfig, lm_loss
from .data import DatasetManifest, SceneImage, caption_tokenizer
from .encoder import HoiEncoder, HoiEncoderConfig, decode_predictions
from .fusion import FusionConfig
from .losses import hoi_set_loss
from .pipeline import CaptionModel, images_to_tensor, record_tag_strings, save_checkpoint
from .vocab import BOS_ID, EOS_ID, PAD_ID, tag_string

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "stage", "loss_total", "loss_loc", "loss_act", "loss_box", "loss_entity", "loss_lm", "lr", "seconds")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "hoi"
    epochs: int = 10
    lr_hoi: float = 5e-6
    lr_caption: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    without_hoi_tag: bool = False
    without_pos: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    tau: float = 0.1
    lambda_box: float = 1.0
    fine_tune_all: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.stage not in ("hoi", "caption"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_hoi <= 0 or self.lr_caption <= 0:
            raise ValueError("learning rates must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)

    def append(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("log steps must increase")
        self.rows.append({k: row.get(k, 0.0) for k in LOG_COLUMNS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_COLUMNS])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                out.rows.append({k: (r[k] if k == "stage" else int(r[k]) if k == "step" else float(r[k])) for k in LOG_COLUMNS})
        return out

    def loss_sequence(self, column: str = "loss_total") -> list[float]:
        return [r[column] for r in self.rows]

    def epoch_means(self, column: str, steps_per_epoch: int) -> list[float]:
        vals = self.loss_sequence(column)
        return [float(np.mean(vals[i:i + steps_per_epoch])) for i in range(0, len(vals), steps_per_epoch)]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed & 0xFFFFFFFFFFFFFFFF)
    torch.use_deterministic_algorithms(True)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed & 0xFFFFFFFF, epoch]).permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _check_finite(value: torch.Tensor, stage: str, step: int) -> None:
    if not math.isfinite(float(value.detach())):
        raise TrainingDiverged(f"{stage} stage: non-finite loss {float(value.detach())} at step {step}")


def _gather_images(manifest: DatasetManifest, images: Mapping[str, SceneImage]) -> torch.Tensor:
    missing = [r.image_id for r, _ in manifest.records if r.image_id not in images]
    if missing:
        raise FileNotFoundError(f"missing images for {missing[:3]}")
    return images_to_tensor([images[r.image_id] for r, _ in manifest.records])


def train_hoi_stage(
    manifest: DatasetManifest,
    images: Mapping[str, SceneImage],
    config: TrainConfig,
    out_dir=None,
    model_config: HoiEncoderConfig | None = None,
) -> tuple[HoiEncoder, TrainLog]:
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    seed_everything(config.seed)
    model_config = model_config or HoiEncoderConfig(
        n_classes=len(manifest.vocab_entities), n_actions=len(manifest.vocab_actions),
        tau=config.tau, lambda_box=config.lambda_box,
    )
    model = HoiEncoder(model_config)
    model.train()
    X = _gather_images(manifest, images)
    records = [r for r, _ in manifest.records]
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.lr_hoi, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay
    )
    tlog = TrainLog()
    step = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        for idx in _batches(len(records), config.batch_size, config.seed, epoch):
            out = model(X[idx])
            lb = hoi_set_loss(out, [records[i] for i in idx], model_config.tau, model_config.lambda_box,
                              model_config.no_entity_weight)
            objective = lb.loss_total + lb.loss_entity
            _check_finite(objective, "hoi", step)
            opt.zero_grad()
            objective.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            vals = lb.as_floats()
            tlog.append(step=step, stage="hoi", lr=config.lr_hoi, seconds=time.perf_counter() - start, **vals)
            step += 1
        log.info("hoi epoch %d loss %.4f", epoch + 1, tlog.rows[-1]["loss_total"])
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "hoi.ckpt", model, extra={"epoch": epoch + 1, "train": asdict(config)})
    model.eval()
    tlog.final_metrics = hoi_triple_scores(model, X, records, manifest)
    return model, tlog


@torch.no_grad()
def hoi_triple_scores(model: HoiEncoder, X: torch.Tensor, records, manifest: DatasetManifest,
                      act_threshold: float = 0.5, entity_conf_threshold: float = 0.5) -> dict:
    """Micro precision / recall / F1 of decoded (h, action, o) triples."""
    was_training = model.training
    model.eval()
    tp = fp = fn = 0
    for s in range(0, len(records), 64):
        out = model(X[s:s + 64])
        for b, rec in enumerate(records[s:s + 64]):
            pred = {
                tag_string(manifest.vocab_entities[t.h_class], manifest.vocab_actions[t.action],
                           manifest.vocab_entities[t.o_class])
                for t in decode_predictions(out.prediction, act_threshold, entity_conf_threshold, b)
            }
            truth = record_tag_strings(rec, manifest.vocab_entities, manifest.vocab_actions)
            tp += len(pred & truth)
            fp += len(pred - truth)
            fn += len(truth - pred)
    model.train(was_training)
    p = tp / (tp + fp) if tp + fp else 1.0 if not fn else 0.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"triple_precision": p, "triple_recall": r, "triple_f1": f1}


def caption_batch(model: CaptionModel, manifest: DatasetManifest, idx, without_hoi_tag: bool):
    caps = [manifest.records[i][1].token_ids for i in idx]
    L = max(len(c) for c in caps) + 1
    prefix = torch.full((len(idx), L), PAD_ID, dtype=torch.long)
    target = torch.full((len(idx), L), PAD_ID, dtype=torch.long)
    for b, c in enumerate(caps):
        prefix[b, : len(c) + 1] = torch.tensor([BOS_ID, *c])
        target[b, : len(c) + 1] = torch.tensor([*c, EOS_ID])
    tags = [model.tags_from_record(manifest.records[i][0], without_hoi_tag) for i in idx]
    return tags, prefix, target


def train_caption_stage(
    manifest: DatasetManifest,
    images: Mapping[str, SceneImage],
    hoi: HoiEncoder,
    config: TrainConfig,
    out_dir=None,
) -> tuple[CaptionModel, TrainLog]:
    """Freeze the detector; train projectors, fusion and the decoder's cross-attention/head."""
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    if hoi.config.n_classes != len(manifest.vocab_entities) or hoi.config.n_actions != len(manifest.vocab_actions):
        raise ValueError("HOI checkpoint vocabulary sizes do not match the manifest")
    seed_everything(config.seed)
    tokenizer = caption_tokenizer(manifest.vocab_entities, manifest.vocab_actions)
    fusion_cfg = FusionConfig(d_visual=hoi.config.d_model, grid=hoi.config.grid, without_pos=config.without_pos)
    model = CaptionModel(
        hoi, tokenizer, fusion_cfg, CaptionDecoderConfig(vocab_size=len(tokenizer), d_model=fusion_cfg.d_model),
        manifest.vocab_entities, manifest.vocab_actions, manifest.threat_actions,
    )
    for p in model.hoi.parameters():
        p.requires_grad_(False)
    model.hoi.eval()
    model.decoder.trainable_subset(config.fine_tune_all)

    X = _gather_images(manifest, images)
    with torch.no_grad():
        visual = torch.cat([model.visual_tokens(X[s:s + 64]) for s in range(0, len(X), 64)])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr_caption, betas=config.betas, eps=config.eps,
                            weight_decay=config.weight_decay)
    tlog = TrainLog()
    step = 0
    start = time.perf_counter()
    model.fusion.train()
    model.decoder.train()
    for epoch in range(config.epochs):
        for idx in _batches(len(manifest), config.batch_size, config.seed, epoch):
            tags, prefix, target = caption_batch(model, manifest, idx, config.without_hoi_tag)
            logits = model.caption_logits(visual[idx], tags, prefix, prefix == PAD_ID)
            loss = lm_loss(logits, target)
            _check_finite(loss, "caption", step)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            v = float(loss.detach())
            tlog.append(step=step, stage="caption", loss_total=v, loss_lm=v, lr=config.lr_caption,
                        seconds=time.perf_counter() - start)
            step += 1
        log.info("caption epoch %d loss %.4f", epoch + 1, tlog.rows[-1]["loss_lm"])
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "caption.ckpt", model.hoi, model,
                            extra={"epoch": epoch + 1, "train": asdict(config)})
    model.eval()
    tlog.final_metrics = {"token_accuracy": token_accuracy(model, manifest, visual, config.without_hoi_tag)}
    return model, tlog


@torch.no_grad()
def token_accuracy(model: CaptionModel, manifest: DatasetManifest, visual: torch.Tensor, without_hoi_tag=False) -> float:
    """Teacher-forced next-token accuracy over non-padding caption positions."""
    correct = total = 0
    for s in range(0, len(manifest), 64):
        idx = list(range(s, min(s + 64, len(manifest))))
        tags, prefix, target = caption_batch(model, manifest, idx, without_hoi_tag)
        logits = model.caption_logits(visual[idx], tags, prefix, prefix == PAD_ID)
        keep = target != PAD_ID
        correct += int(((logits.argmax(-1) == target) & keep).sum())
        total += int(keep.sum())
    return correct / total


def run_inference(
    manifest: DatasetManifest,
    images: Mapping[str, SceneImage],
    model: CaptionModel,
    generation: GenerationConfig | None = None,
    act_threshold: float = 0.5,
    entity_conf_threshold: float = 0.5,
    without_hoi_tag: bool = False,
) -> list[dict]:
    """One output row per record, in manifest order."""
    rows = []
    recs = [r for r, _ in manifest.records]
    for s in range(0, len(recs), 32):
        chunk = recs[s:s + 32]
        missing = [r.image_id for r in chunk if r.image_id not in images]
        if missing:
            raise FileNotFoundError(f"missing image file for {missing[0]}")
        X = images_to_tensor([images[r.image_id] for r in chunk])
        for rec, res in zip(chunk, model.describe(X, generation, act_threshold, entity_conf_threshold, without_hoi_tag)):
            rows.append({"image_id": rec.image_id, "tags": res["tags"], "caption": res["caption"],
                         "is_threat_pred": res["is_threat_pred"]})
    return rows


def inference_jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps(r) + "\n" for r in rows)
