"""Detector + fusion + caption decoder, and the checkpoint format that stores them."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .captioner import CaptionDecoder, CaptionDecoderConfig, GenerationConfig, serialize_hoi_tags
from .data import HoiPairRecord, SceneImage
from .encoder import DecodedTriple, HoiEncoder, HoiEncoderConfig, decode_predictions
from .fusion import FusionConfig, ImageHoiFusion
from .tokenizer import Tokenizer
from .vocab import ACTIONS, ENTITY_CLASSES, HOI_ID, THREAT_ACTIONS, tag_string

CHECKPOINT_VERSION = "hoi2threat-ckpt/1"


class CheckpointError(ValueError):
    pass


def images_to_tensor(images: Sequence[SceneImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.pixels for im in images])).permute(0, 3, 1, 2).contiguous()


def record_tags(record: HoiPairRecord, vocab_entities=ENTITY_CLASSES, vocab_actions=ACTIONS) -> list[tuple]:
    """Ground-truth triples as (h_class, o_class, action, confidence=1.0) name tuples, one per action."""
    out = []
    for t in record.triples:
        h = vocab_entities[record.entity(t.human_idx).class_id]
        o = vocab_entities[record.entity(t.object_idx).class_id]
        out += [(h, o, vocab_actions[a], 1.0) for a in t.action_ids]
    return out


def record_tag_strings(record: HoiPairRecord, vocab_entities=ENTITY_CLASSES, vocab_actions=ACTIONS) -> set[str]:
    return {tag_string(h, a, o) for h, o, a, _ in record_tags(record, vocab_entities, vocab_actions)}


class CaptionModel(nn.Module):
    """The full detect-then-describe model."""

    def __init__(
        self,
        hoi: HoiEncoder,
        tokenizer: Tokenizer,
        fusion_config: FusionConfig | None = None,
        decoder_config: CaptionDecoderConfig | None = None,
        vocab_entities=ENTITY_CLASSES,
        vocab_actions=ACTIONS,
        threat_actions=THREAT_ACTIONS,
    ):
        super().__init__()
        self.hoi = hoi
        self.tokenizer = tokenizer
        self.vocab_entities = tuple(vocab_entities)
        self.vocab_actions = tuple(vocab_actions)
        self.threat_actions = tuple(threat_actions)
        fusion_config = fusion_config or FusionConfig(d_visual=hoi.config.d_model, grid=hoi.config.grid)
        if fusion_config.d_visual != hoi.config.d_model or fusion_config.grid != hoi.config.grid:
            raise CheckpointError("fusion config does not match the HOI encoder dimensions")
        self.fusion = ImageHoiFusion(fusion_config)
        self.decoder = CaptionDecoder(
            decoder_config or CaptionDecoderConfig(vocab_size=len(tokenizer), d_model=fusion_config.d_model)
        )

    # -- tags ----------------------------------------------------------------

    def tags_from_record(self, record: HoiPairRecord, without_hoi_tag: bool = False) -> list[int]:
        if without_hoi_tag:
            return [HOI_ID]
        return serialize_hoi_tags(record_tags(record, self.vocab_entities, self.vocab_actions), self.tokenizer)

    def decoded_names(self, decoded: Sequence[DecodedTriple]) -> list[tuple]:
        return [
            (self.vocab_entities[t.h_class], self.vocab_entities[t.o_class], self.vocab_actions[t.action], t.confidence)
            for t in decoded
        ]

    # -- forward pieces --------------------------------------------------------

    @torch.no_grad()
    def visual_tokens(self, images: torch.Tensor) -> torch.Tensor:
        return self.hoi.encode_backbone(images)

    def fuse(self, visual_tokens: torch.Tensor, tag_sequences):
        tag_emb, tag_pad = self.fusion.embed_tags(self.decoder.token_embedding, tag_sequences)
        return self.fusion(visual_tokens, tag_emb, tag_pad)

    def caption_logits(self, visual_tokens, tag_sequences, prefix, prefix_padding=None):
        fused = self.fuse(visual_tokens, tag_sequences)
        return self.decoder.teacher_forced_step(fused.tokens, prefix, fused.padding, prefix_padding)

    @torch.no_grad()
    def describe(
        self,
        images: torch.Tensor,
        generation: GenerationConfig | None = None,
        act_threshold: float = 0.5,
        entity_conf_threshold: float = 0.5,
        without_hoi_tag: bool = False,
    ) -> list[dict]:
        """Detect, serialize tags, fuse and generate for a batch of images."""
        generation = generation or GenerationConfig()
        out = self.hoi(images)
        results = []
        for b in range(images.shape[0]):
            decoded = decode_predictions(out.prediction, act_threshold, entity_conf_threshold, b)
            names = self.decoded_names(decoded)
            tags = [HOI_ID] if without_hoi_tag else serialize_hoi_tags(names, self.tokenizer)
            fused = self.fuse(out.features[b:b + 1], [tags])
            ids = self.decoder.generate(fused.tokens, generation, fused.padding)
            ids = [i for i in ids if i >= 6]
            ranked = [tag_string(h, a, o) for h, o, a, _ in sorted(names, key=lambda t: -t[3])]
            results.append(
                {
                    "tags": ranked,
                    "confidences": [t.confidence for t in decoded],
                    "caption": self.tokenizer.detokenize(ids),
                    "is_threat_pred": any(a in self.threat_actions for _, _, a, _ in names),
                }
            )
        return results


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, hoi: HoiEncoder, caption: CaptionModel | None = None, extra: dict | None = None) -> None:
    config = {"hoi": hoi.config.to_dict()}
    state = {f"hoi.{k}": v for k, v in hoi.state_dict().items()}
    if caption is not None:
        config["fusion"] = asdict(caption.fusion.config)
        config["decoder"] = asdict(caption.decoder.config)
        config["vocab"] = list(caption.tokenizer.vocab)
        config["vocab_entities"] = list(caption.vocab_entities)
        config["vocab_actions"] = list(caption.vocab_actions)
        config["threat_actions"] = list(caption.threat_actions)
        state.update({f"fusion.{k}": v for k, v in caption.fusion.state_dict().items()})
        state.update({f"decoder.{k}": v for k, v in caption.decoder.state_dict().items()})
    if extra:
        config["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": CHECKPOINT_VERSION, "config": config, "state_dict": state}, path)


def _read(path) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
    return blob


def _sub_state(state: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}


def load_hoi_checkpoint(path) -> HoiEncoder:
    blob = _read(path)
    hoi = HoiEncoder(HoiEncoderConfig(**blob["config"]["hoi"]))
    try:
        hoi.load_state_dict(_sub_state(blob["state_dict"], "hoi"))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return hoi.eval()


def load_caption_checkpoint(path) -> CaptionModel:
    blob = _read(path)
    cfg = blob["config"]
    if "decoder" not in cfg:
        raise CheckpointError(f"{path}: checkpoint holds no caption stage")
    hoi = HoiEncoder(HoiEncoderConfig(**cfg["hoi"]))
    tokenizer = Tokenizer(cfg["vocab"][6:])
    model = CaptionModel(
        hoi, tokenizer, FusionConfig(**cfg["fusion"]), CaptionDecoderConfig(**cfg["decoder"]),
        cfg["vocab_entities"], cfg["vocab_actions"], cfg["threat_actions"],
    )
    state = blob["state_dict"]
    try:
        model.hoi.load_state_dict(_sub_state(state, "hoi"))
        model.fusion.load_state_dict(_sub_state(state, "fusion"))
        model.decoder.load_state_dict(_sub_state(state, "decoder"))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model.eval()


def checkpoint_extra(path) -> dict:
    return _read(path)["config"].get("extra", {})
