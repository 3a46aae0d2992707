"""Training losses of the HOI detector: pointer localization, action BCE,
box regression, entity detection, and the matched set loss that combines them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import generalized_box_iou, pairwise_generalized_box_iou
from .data import HoiPairRecord
from .encoder import HoiOutput, cosine_similarity_matrix
from .matching import MatchAssignment, hungarian_match

BCE_EPS = 1e-7


def loss_loc_terms(v_h, v_o, mu, target_h, target_o, tau: float) -> torch.Tensor:
    """Per-pair localization loss, shape (P,).

    Each term is the negative log-softmax, over all M entity slots, of the
    temperature-scaled cosine similarity at the target slot.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    log_h = torch.log_softmax(cosine_similarity_matrix(v_h, mu) / tau, dim=-1)
    log_o = torch.log_softmax(cosine_similarity_matrix(v_o, mu) / tau, dim=-1)
    idx = torch.arange(v_h.shape[0])
    return -log_h[idx, target_h] - log_o[idx, target_o]


def loss_loc(v_h, v_o, mu, target_h, target_o, tau: float) -> torch.Tensor:
    """Mean localization loss over matched pairs (rows of v_h/v_o are already matched)."""
    return loss_loc_terms(v_h, v_o, mu, target_h, target_o, tau).mean()


def loss_act(probs, targets, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross-entropy averaged over the action axis (last dim)."""
    p = probs.clamp(eps, 1.0 - eps)
    targets = targets.to(p.dtype)
    return -(targets * torch.log(p) + (1 - targets) * torch.log(1 - p)).mean(-1)


def loss_box(pred, target) -> torch.Tensor:
    """Per-box L1 distance (summed over coordinates) plus 1 - generalized IoU."""
    return (pred - target).abs().sum(-1) + 1.0 - generalized_box_iou(pred, target)


@dataclass
class LossBreakdown:
    loss_loc: torch.Tensor
    loss_act: torch.Tensor
    loss_box: torch.Tensor
    loss_total: torch.Tensor  # loss_loc + loss_act + lambda_box * loss_box
    tau: float
    loss_entity: torch.Tensor = field(default_factory=lambda: torch.zeros(()))
    assignment: MatchAssignment | None = None

    def as_floats(self) -> dict[str, float]:
        return {
            "loss_total": float(self.loss_total.detach()),
            "loss_loc": float(self.loss_loc.detach()),
            "loss_act": float(self.loss_act.detach()),
            "loss_box": float(self.loss_box.detach()),
            "loss_entity": float(self.loss_entity.detach()),
        }


def action_targets(record: HoiPairRecord, n_actions: int, dtype=torch.float32) -> torch.Tensor:
    t = torch.zeros(len(record.triples), n_actions, dtype=dtype)
    for g, triple in enumerate(record.triples):
        t[g, list(triple.action_ids)] = 1.0
    return t


def entity_set_loss(logits, boxes, record: HoiPairRecord, no_entity_weight: float = 0.1):
    """Detection loss of the entity decoder for one image.

    Entity slots are matched to ground-truth entities; unmatched slots are
    trained toward the no-entity class. Returns the loss and a map from
    ground-truth entity id to its matched slot.
    """
    n_cls = logits.shape[-1] - 1
    gt_cls = torch.tensor([e.class_id for e in record.entities])
    gt_box = torch.tensor([e.box for e in record.entities], dtype=boxes.dtype)
    with torch.no_grad():
        prob = logits.softmax(-1)
        cost = -prob[:, gt_cls] + torch.cdist(boxes, gt_box, p=1) - pairwise_generalized_box_iou(boxes, gt_box)
    match = hungarian_match(cost.double().cpu().numpy())
    slots = torch.tensor([i for i, _ in match.pairs])
    gts = torch.tensor([g for _, g in match.pairs])
    target = torch.full((logits.shape[0],), n_cls, dtype=torch.long)
    target[slots] = gt_cls[gts]
    weight = torch.ones(n_cls + 1, dtype=logits.dtype)
    weight[-1] = no_entity_weight
    ce = F.cross_entropy(logits, target, weight=weight)
    reg = loss_box(boxes[slots], gt_box[gts]).sum() / max(len(record.entities), 1)
    slot_of = {record.entities[g].id: i for i, g in match.pairs}
    return ce + reg, slot_of


def loss_hungarian(
    v_h, v_o, mu, a_probs, b_h, b_o,
    record: HoiPairRecord,
    entity_slot: dict[int, int],
    tau: float = 0.1,
    lambda_box: float = 1.0,
) -> LossBreakdown:
    """Matched set loss for one image.

    v_h, v_o: (K, d) pointer vectors; mu: (M, d) entity representations;
    a_probs: (K, gamma); b_h, b_o: (K, 4) boxes of the pointed entity slots;
    entity_slot maps ground-truth entity ids to entity slots. The matching
    cost of (slot i, triple g) is that pair's localization term plus its
    action term, so the matched loss is the minimum of the cost matrix.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    K, n_act = a_probs.shape
    zero = a_probs.sum() * 0.0
    G = len(record.triples)
    if G == 0:
        act = loss_act(a_probs, torch.zeros_like(a_probs)).sum()
        return LossBreakdown(zero, act, zero, act, tau, assignment=MatchAssignment((), K))

    tgt_h = torch.tensor([entity_slot[t.human_idx] for t in record.triples])
    tgt_o = torch.tensor([entity_slot[t.object_idx] for t in record.triples])
    a_tgt = action_targets(record, n_act, a_probs.dtype)

    log_h = torch.log_softmax(cosine_similarity_matrix(v_h, mu) / tau, dim=-1)  # (K, M)
    log_o = torch.log_softmax(cosine_similarity_matrix(v_o, mu) / tau, dim=-1)
    loc_cost = -log_h[:, tgt_h] - log_o[:, tgt_o]  # (K, G)
    p = a_probs.clamp(BCE_EPS, 1 - BCE_EPS)
    act_cost = -(torch.log(p) @ a_tgt.T + torch.log(1 - p) @ (1 - a_tgt).T) / n_act  # (K, G)
    cost = (loc_cost + act_cost).detach().double().cpu().numpy()
    match = hungarian_match(cost)

    rows = torch.tensor([i for i, _ in match.pairs])
    cols = torch.tensor([g for _, g in match.pairs])
    loc = loc_cost[rows, cols].sum()
    act = act_cost[rows, cols].sum()
    unmatched = match.unmatched_slots
    if unmatched:
        act = act + loss_act(a_probs[unmatched], torch.zeros(len(unmatched), n_act, dtype=a_probs.dtype)).sum()
    gt_h = torch.tensor([record.entity(t.human_idx).box for t in record.triples], dtype=b_h.dtype)
    gt_o = torch.tensor([record.entity(t.object_idx).box for t in record.triples], dtype=b_o.dtype)
    box = (loss_box(b_h[rows], gt_h[cols]) + loss_box(b_o[rows], gt_o[cols])).sum()
    return LossBreakdown(loc, act, box, loc + act + lambda_box * box, tau, assignment=match)


def hoi_set_loss(output: HoiOutput, records, tau: float, lambda_box: float, no_entity_weight: float = 0.1):
    """Batch objective: mean over images of the matched set loss plus entity detection loss."""
    parts = []
    for b, record in enumerate(records):
        ent_loss, slot_of = entity_set_loss(
            output.entities.logits[b], output.entities.boxes[b], record, no_entity_weight
        )
        lb = loss_hungarian(
            output.pointers.v_h[b], output.pointers.v_o[b], output.entities.mu[b],
            output.prediction.a_probs[b], output.prediction.b_h[b], output.prediction.b_o[b],
            record, slot_of, tau, lambda_box,
        )
        lb.loss_entity = ent_loss
        parts.append(lb)
    n = len(parts)
    mean = lambda name: sum(getattr(p, name) for p in parts) / n  # noqa: E731
    return LossBreakdown(
        mean("loss_loc"), mean("loss_act"), mean("loss_box"), mean("loss_total"), tau,
        loss_entity=mean("loss_entity"),
    )
