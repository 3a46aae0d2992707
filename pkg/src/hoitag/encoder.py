"""Set-prediction HOI detector with HOI pointers.

A small CNN produces a token grid; an entity decoder and a behavior decoder
run in parallel over it. Each behavior slot points at one human-side and one
object-side entity slot by cosine similarity, and the resolved triples take
their boxes and classes from the pointed entity slots.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import box_cxcywh_to_xyxy
from .layers import MLP, DecoderLayer, EncoderLayer, sine_position_grid


@dataclass
class HoiEncoderConfig:
    d_model: int = 64
    n_entity_queries: int = 8  # M
    n_interaction_queries: int = 8  # K
    n_classes: int = 6  # C
    n_actions: int = 6  # gamma
    depth: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    resolution: int = 64
    stride: int = 8
    tau: float = 0.1
    lambda_box: float = 1.0
    no_entity_weight: float = 0.1

    @property
    def grid(self) -> int:
        return self.resolution // self.stride

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EntityRepresentation:
    mu: torch.Tensor  # (B, M, d)
    logits: torch.Tensor  # (B, M, C + 1); last column = no entity
    boxes: torch.Tensor  # (B, M, 4) xyxy in [0, 1]


@dataclass
class HoiPointerOutput:
    v_h: torch.Tensor  # (B, K, d)
    v_o: torch.Tensor
    sim_h: torch.Tensor  # (B, K, M)
    sim_o: torch.Tensor
    c_hat_h: torch.Tensor  # (B, K) long
    c_hat_o: torch.Tensor


@dataclass
class HoiPrediction:
    b_h: torch.Tensor  # (B, K, 4)
    b_o: torch.Tensor
    h_class: torch.Tensor  # (B, K) long
    o_class: torch.Tensor
    h_conf: torch.Tensor  # (B, K) class probability of the pointed entity slot
    o_conf: torch.Tensor
    a_logits: torch.Tensor  # (B, K, gamma)
    a_probs: torch.Tensor


@dataclass
class HoiOutput:
    entities: EntityRepresentation
    z: torch.Tensor  # (B, K, d)
    pointers: HoiPointerOutput
    prediction: HoiPrediction
    features: torch.Tensor  # (B, G*G, d)


def cosine_similarity_matrix(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """(..., K, d) x (..., M, d) -> (..., K, M) cosine similarities; 0 where either norm is 0."""
    num = u @ v.transpose(-2, -1)
    denom = u.norm(dim=-1)[..., :, None] * v.norm(dim=-1)[..., None, :]
    nonzero = denom > 0
    safe = torch.where(nonzero, denom, torch.ones_like(denom))
    return torch.where(nonzero, num / safe, torch.zeros_like(num))


class Backbone(nn.Module):
    def __init__(self, d_model: int, stride: int):
        super().__init__()
        n_down = int(np.log2(stride))
        if 2 ** n_down != stride:
            raise ValueError("stride must be a power of two")
        chans = [3, 32] + [64] * (n_down - 1)
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.GroupNorm(8, b), nn.ReLU()]
        layers.append(nn.Conv2d(chans[-1], d_model, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x - 0.5)


class HoiEncoder(nn.Module):
    def __init__(self, config: HoiEncoderConfig | None = None):
        super().__init__()
        self.config = config = config or HoiEncoderConfig()
        d = config.d_model
        self.backbone = Backbone(d, config.stride)
        self.context = EncoderLayer(d, config.n_heads, config.ffn_dim)
        self.register_buffer("pos", sine_position_grid(config.grid, d), persistent=False)
        self.entity_queries = nn.Parameter(torch.randn(config.n_entity_queries, d) * 0.5)
        self.behavior_queries = nn.Parameter(torch.randn(config.n_interaction_queries, d) * 0.5)
        self.entity_decoder = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.ffn_dim) for _ in range(config.depth)
        )
        self.behavior_decoder = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.ffn_dim) for _ in range(config.depth)
        )
        self.class_head = nn.Linear(d, config.n_classes + 1)
        self.box_head = MLP(d, d, 4, n_layers=3)  # FFN_box
        self.ffn_h = MLP(d, d, d)
        self.ffn_o = MLP(d, d, d)
        self.ffn_act = MLP(d, d, config.n_actions)

    # -- stages -----------------------------------------------------------

    def encode_backbone(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) or (B, 3, H, W) pixels -> (B, G*G, d) context tokens."""
        if images.dim() == 3:
            images = images[None]
        if images.shape[-1] == 3 and images.shape[1] != 3:
            images = images.permute(0, 3, 1, 2)
        res = self.config.resolution
        if images.shape[-2:] != (res, res):
            raise ValueError(f"expected {res}x{res} images, got {tuple(images.shape[-2:])}")
        fmap = self.backbone(images.to(self.pos.dtype))
        tokens = fmap.flatten(2).transpose(1, 2)
        return self.context(tokens, self.pos)

    def _decode(self, layers, queries, features, pos):
        memory = features + pos
        x = queries.unsqueeze(0).expand(features.shape[0], -1, -1)
        for layer in layers:
            x, _ = layer(x, memory)
        return x

    def decode_entities(self, features: torch.Tensor, pos: torch.Tensor | None = None) -> EntityRepresentation:
        pos = self.pos if pos is None else pos
        mu = self._decode(self.entity_decoder, self.entity_queries, features, pos)
        boxes = box_cxcywh_to_xyxy(self.box_head(mu).sigmoid()).clamp(0.0, 1.0)
        return EntityRepresentation(mu, self.class_head(mu), boxes)

    def decode_behaviors(self, features: torch.Tensor, pos: torch.Tensor | None = None) -> torch.Tensor:
        pos = self.pos if pos is None else pos
        return self._decode(self.behavior_decoder, self.behavior_queries, features, pos)

    def compute_pointers(self, z: torch.Tensor, mu: torch.Tensor) -> HoiPointerOutput:
        if z.shape[-1] != mu.shape[-1]:
            raise ValueError("behavior and entity representations must share a dimension")
        v_h, v_o = self.ffn_h(z), self.ffn_o(z)
        return pointers_from_vectors(v_h, v_o, mu)

    def predict_triples(self, pointers: HoiPointerOutput, entities: EntityRepresentation, z: torch.Tensor) -> HoiPrediction:
        a_logits = self.ffn_act(z)
        return resolve_triples(pointers, entities, a_logits)

    def forward(self, images: torch.Tensor) -> HoiOutput:
        features = self.encode_backbone(images)
        entities = self.decode_entities(features)
        z = self.decode_behaviors(features)
        pointers = self.compute_pointers(z, entities.mu)
        prediction = self.predict_triples(pointers, entities, z)
        return HoiOutput(entities, z, pointers, prediction, features)


def pointers_from_vectors(v_h, v_o, mu) -> HoiPointerOutput:
    sim_h = cosine_similarity_matrix(v_h, mu)
    sim_o = cosine_similarity_matrix(v_o, mu)
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest slot
    return HoiPointerOutput(v_h, v_o, sim_h, sim_o, sim_h.argmax(-1), sim_o.argmax(-1))


def resolve_triples(pointers: HoiPointerOutput, entities: EntityRepresentation, a_logits) -> HoiPrediction:
    probs = entities.logits.softmax(-1)[..., :-1]
    conf, cls = probs.max(-1)

    def gather(t, idx):
        if t.dim() == 3:
            return torch.gather(t, 1, idx[..., None].expand(-1, -1, t.shape[-1]))
        return torch.gather(t, 1, idx)

    ch, co = pointers.c_hat_h, pointers.c_hat_o
    return HoiPrediction(
        b_h=gather(entities.boxes, ch),
        b_o=gather(entities.boxes, co),
        h_class=gather(cls, ch),
        o_class=gather(cls, co),
        h_conf=gather(conf, ch),
        o_conf=gather(conf, co),
        a_logits=a_logits,
        a_probs=torch.sigmoid(a_logits),
    )


@dataclass(frozen=True)
class DecodedTriple:
    h_class: int
    o_class: int
    action: int
    confidence: float


def decode_predictions(
    prediction: HoiPrediction,
    act_threshold: float = 0.5,
    entity_conf_threshold: float = 0.5,
    batch_index: int = 0,
) -> list[DecodedTriple]:
    """Discrete triples for one image, deduplicated, sorted by descending confidence."""
    for t in (act_threshold, entity_conf_threshold):
        if not 0.0 < t < 1.0:
            raise ValueError("thresholds must lie in (0, 1)")
    a = prediction.a_probs[batch_index].detach().double().cpu().numpy()
    hc = prediction.h_class[batch_index].tolist()
    oc = prediction.o_class[batch_index].tolist()
    hconf = prediction.h_conf[batch_index].detach().double().cpu().numpy()
    oconf = prediction.o_conf[batch_index].detach().double().cpu().numpy()
    best: dict[tuple[int, int, int], float] = {}
    for i in range(a.shape[0]):
        if hconf[i] < entity_conf_threshold or oconf[i] < entity_conf_threshold:
            continue
        ent = min(hconf[i], oconf[i])
        for act in np.nonzero(a[i] >= act_threshold)[0]:
            key = (hc[i], oc[i], int(act))
            conf = float(a[i, act] * ent)
            if conf > best.get(key, -1.0):
                best[key] = conf
    out = [DecodedTriple(h, o, act, c) for (h, o, act), c in best.items()]
    out.sort(key=lambda t: (-t.confidence, t.h_class, t.action, t.o_class))
    return out
