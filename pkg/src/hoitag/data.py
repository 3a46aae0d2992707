"""Synthetic HOI scene engine.

Scenes are built from class-specific glyphs placed on a coarse cell grid.
Interacting pairs occupy two horizontally adjacent cells and carry one
colored contact marker per action at the shared cell boundary, so every
interaction triple is known exactly by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .tokenizer import Tokenizer
from .vocab import ACTIONS, ENTITY_CLASSES, GRAMMAR_WORDS, THREAT_ACTIONS

SCHEMA = "td-hoi/1"
SPLITS = ("train", "val", "test")


class SchemaError(ValueError):
    """Malformed dataset file. Carries the 1-based line number and offending field."""

    def __init__(self, line: int, field_name: str, message: str = ""):
        self.line = line
        self.field = field_name
        super().__init__(f"line {line}: field {field_name!r}: {message or 'invalid'}")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntityRecord:
    id: int
    class_id: int
    box: tuple[float, float, float, float]

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"entity {self.id}: degenerate box {self.box}")


@dataclass(frozen=True)
class HoiTripleGT:
    human_idx: int
    object_idx: int
    action_ids: tuple[int, ...]

    def __post_init__(self):
        if self.human_idx == self.object_idx:
            raise ValueError("human_idx and object_idx must differ")
        if not self.action_ids:
            raise ValueError("action_ids must be non-empty")
        if len(set(self.action_ids)) != len(self.action_ids):
            raise ValueError(f"duplicate action ids {self.action_ids}")


@dataclass(frozen=True)
class HoiPairRecord:
    image_id: str
    entities: tuple[EntityRecord, ...]
    triples: tuple[HoiTripleGT, ...]
    is_threat: bool
    scene_seed: int

    def __post_init__(self):
        if not self.entities:
            raise ValueError(f"{self.image_id}: at least one entity required")
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.image_id}: duplicate entity ids")
        for t in self.triples:
            if t.human_idx not in ids or t.object_idx not in ids:
                raise ValueError(f"{self.image_id}: triple references unknown entity")

    def entity(self, idx: int) -> EntityRecord:
        for e in self.entities:
            if e.id == idx:
                return e
        raise KeyError(idx)


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    text: str
    token_ids: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class SceneImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1], multiples of 1/255
    image_id: str

    def __eq__(self, other):
        return (
            isinstance(other, SceneImage)
            and self.image_id == other.image_id
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    records: tuple[tuple[HoiPairRecord, CaptionRecord], ...]
    vocab_entities: tuple[str, ...] = ENTITY_CLASSES
    vocab_actions: tuple[str, ...] = ACTIONS
    threat_actions: tuple[str, ...] = THREAT_ACTIONS

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        check_record_vocab((r for r, _ in self.records), len(self.vocab_entities), len(self.vocab_actions))

    def __len__(self):
        return len(self.records)

    @property
    def threat_action_ids(self) -> frozenset[int]:
        return frozenset(self.vocab_actions.index(a) for a in self.threat_actions)


def check_record_vocab(records: Iterable[HoiPairRecord], n_classes: int, n_actions: int) -> None:
    for r in records:
        for e in r.entities:
            if not 0 <= e.class_id < n_classes:
                raise ValueError(f"{r.image_id}: class_id {e.class_id} outside vocabulary")
        for t in r.triples:
            if any(not 0 <= a < n_actions for a in t.action_ids):
                raise ValueError(f"{r.image_id}: action id outside vocabulary")


# ---------------------------------------------------------------------------
# Generator configuration
# ---------------------------------------------------------------------------

THREAT_INTERACTIONS = (
    ("person", "person", ("attack",)),
    ("person", "gun", ("hold", "shoot")),
    ("person", "car", ("hijack",)),
    ("car", "wall", ("hijack",)),  # object-object: collision
)
NORMAL_INTERACTIONS = (
    ("person", "knife", ("hold",)),
    ("person", "bag", ("carry",)),
    ("person", "bag", ("hold", "carry")),
    ("person", "gun", ("hold",)),
    ("person", "car", ("stand_by",)),
    ("person", "wall", ("stand_by",)),
)


@dataclass(frozen=True)
class SceneConfig:
    resolution: int = 64
    cell: int = 16
    min_entities: int = 1
    max_entities: int = 5
    target_mean_entities: float = 2.7
    threat_ratio: float = 0.4
    extra_pair_prob: float = 0.5
    noise: int = 8
    entity_classes: tuple[str, ...] = ENTITY_CLASSES
    actions: tuple[str, ...] = ACTIONS
    threat_actions: tuple[str, ...] = THREAT_ACTIONS
    threat_interactions: tuple = THREAT_INTERACTIONS
    normal_interactions: tuple = NORMAL_INTERACTIONS

    @property
    def grid(self) -> int:
        return self.resolution // self.cell

    @property
    def capacity(self) -> int:
        g = self.grid
        return g * 2 * (g // 2)

    def validate(self) -> None:
        if self.resolution % self.cell or self.cell < 16:
            raise ValueError("resolution must be a multiple of a cell size >= 16")
        if not 1 <= self.min_entities <= self.max_entities:
            raise ValueError("entity count range must satisfy 1 <= min <= max")
        if self.max_entities > self.capacity:
            raise ValueError(
                f"max_entities={self.max_entities} exceeds glyph capacity {self.capacity} "
                f"at resolution {self.resolution}"
            )
        if not 0.0 <= self.threat_ratio <= 1.0:
            raise ValueError("threat_ratio must lie in [0, 1]")
        for h, o, acts in self.threat_interactions + self.normal_interactions:
            for name in (h, o):
                if name not in self.entity_classes:
                    raise ValueError(f"interaction uses unknown entity class {name!r}")
            for a in acts:
                if a not in self.actions:
                    raise ValueError(f"interaction uses unknown action {a!r}")

    def count_distribution(self) -> np.ndarray:
        """Probabilities of entity counts min..max, exponentially tilted toward the target mean."""
        ks = np.arange(self.min_entities, self.max_entities + 1, dtype=np.float64)
        target = min(max(self.target_mean_entities, ks[0]), ks[-1])
        if len(ks) == 1:
            return np.ones(1)

        def mean(beta):
            w = np.exp(beta * (ks - ks.mean()))
            return float((w * ks).sum() / w.sum())

        lo, hi = -20.0, 20.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if mean(mid) < target:
                lo = mid
            else:
                hi = mid
        w = np.exp(0.5 * (lo + hi) * (ks - ks.mean()))
        return w / w.sum()


# ---------------------------------------------------------------------------
# Glyph rendering
# ---------------------------------------------------------------------------

_GLYPH_SIZE = {  # (w_min, w_max, h_min, h_max) in pixels
    "person": (5, 6, 11, 13),
    "knife": (8, 10, 3, 3),
    "gun": (8, 10, 6, 6),
    "car": (12, 14, 7, 8),
    "bag": (6, 8, 6, 8),
    "wall": (4, 5, 13, 15),
}
_FALLBACK_SIZE = (6, 8, 6, 8)

ACTION_MARKER_COLORS = {
    "hold": (250, 220, 0),
    "carry": (0, 220, 220),
    "stand_by": (230, 0, 230),
    "attack": (255, 120, 0),
    "shoot": (120, 0, 0),
    "hijack": (110, 0, 170),
}


def _draw_glyph(img: np.ndarray, name: str, x0: int, y0: int, x1: int, y1: int, class_id: int) -> None:
    if name == "person":
        img[y0 + 3:y1, x0:x1] = (40, 80, 220)
        img[y0:y0 + 3, x0 + 1:x1 - 1] = (240, 190, 150)
    elif name == "knife":
        img[y0:y1, x0:x1] = (170, 170, 180)
        img[y0:y1, x0:x0 + 3] = (60, 40, 20)
    elif name == "gun":
        img[y0:y0 + 3, x0:x1] = (20, 20, 20)
        img[y0 + 3:y1, x0:x0 + 3] = (20, 20, 20)
    elif name == "car":
        img[y0:y1 - 2, x0:x1] = (210, 30, 30)
        img[y1 - 2:y1, x0 + 1:x0 + 4] = (10, 10, 10)
        img[y1 - 2:y1, x1 - 4:x1 - 1] = (10, 10, 10)
    elif name == "bag":
        img[y0 + 2:y1, x0:x1] = (140, 90, 40)
        img[y0:y0 + 2, x0 + 1:x1 - 1] = (140, 90, 40)
        img[y0 + 1:y0 + 2, x0 + 3:x1 - 3] = (225, 225, 215)
    elif name == "wall":
        img[y0:y1, x0:x1] = (90, 140, 90)
        img[y0 + 2:y1:3, x0:x1] = (60, 100, 60)
    else:
        # Unknown class names still get a distinct flat color.
        rng = np.random.default_rng(class_id + 1000)
        img[y0:y1, x0:x1] = rng.integers(0, 256, 3)


def _glyph_size(name: str, rng: np.random.Generator) -> tuple[int, int]:
    w0, w1, h0, h1 = _GLYPH_SIZE.get(name, _FALLBACK_SIZE)
    return int(rng.integers(w0, w1 + 1)), int(rng.integers(h0, h1 + 1))


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def record_seed(master_seed: int, index: int) -> int:
    return splitmix64(splitmix64(master_seed & 0xFFFFFFFFFFFFFFFF) ^ index)


def build_synthetic_scene(
    seed: int,
    config: SceneConfig | None = None,
    image_id: str | None = None,
    threat: bool | None = None,
) -> tuple[SceneImage, HoiPairRecord]:
    """Render one scene. Pure function of (seed, config, image_id, threat).

    ``threat`` forces the scene type; when None it is drawn with
    ``config.threat_ratio`` (scenes with a single entity are always normal).
    """
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    image_id = image_id if image_id is not None else f"scene_{seed}"
    classes = list(config.entity_classes)
    actions = list(config.actions)

    probs = config.count_distribution()
    n = int(config.min_entities + rng.choice(len(probs), p=probs))
    if threat is None:
        threat = n >= 2 and bool(rng.random() < config.threat_ratio)
    if threat and n < 2:
        if config.max_entities < 2:
            raise ValueError("a threat scene needs at least two entities")
        n = 2

    pairs = []
    remaining = n
    if threat:
        pairs.append(config.threat_interactions[rng.integers(len(config.threat_interactions))])
        remaining -= 2
    pool = config.normal_interactions + (config.threat_interactions if threat else ())
    while remaining >= 2 and rng.random() < config.extra_pair_prob:
        pairs.append(pool[rng.integers(len(pool))])
        remaining -= 2
    singles = [classes[rng.integers(len(classes))] for _ in range(remaining)]

    g, cs, res = config.grid, config.cell, config.resolution
    slots = [(r, p) for r in range(g) for p in range(g // 2)]
    chosen = rng.permutation(len(slots))[: len(pairs)]
    used = set()
    pair_slots = []
    for k in chosen:
        r, p = slots[k]
        used.update({(r, 2 * p), (r, 2 * p + 1)})
        pair_slots.append((r, p))
    free = [(r, c) for r in range(g) for c in range(g) if (r, c) not in used]
    single_cells = [free[k] for k in rng.permutation(len(free))[: len(singles)]]

    base = np.array([225, 225, 215], dtype=np.int16)
    noise = rng.integers(-config.noise, config.noise + 1, size=(res, res, 3))
    img = np.clip(base + noise, 0, 255).astype(np.uint8)

    entities: list[EntityRecord] = []
    triples: list[HoiTripleGT] = []
    markers = []

    def add_entity(name, x0, y0, w, h):
        eid = len(entities)
        cid = classes.index(name)
        _draw_glyph(img, name, x0, y0, x0 + w, y0 + h, cid)
        entities.append(EntityRecord(eid, cid, (x0 / res, y0 / res, (x0 + w) / res, (y0 + h) / res)))
        return eid

    for (h_name, o_name, acts), (r, p) in zip(pairs, pair_slots):
        bx = (2 * p + 1) * cs
        ry = r * cs
        wh, hh = _glyph_size(h_name, rng)
        wo, ho = _glyph_size(o_name, rng)
        overlap = "attack" in acts
        hx1 = bx + 1 if overlap else bx - int(rng.integers(0, 2))
        ox0 = bx - 1 if overlap else bx + int(rng.integers(0, 2))
        hy0 = ry + int(rng.integers(0, cs - hh + 1))
        oy0 = ry + int(rng.integers(0, cs - ho + 1))
        hid = add_entity(h_name, hx1 - wh, hy0, wh, hh)
        oid = add_entity(o_name, ox0, oy0, wo, ho)
        act_ids = tuple(sorted(actions.index(a) for a in acts))
        triples.append(HoiTripleGT(hid, oid, act_ids))
        yc = (hy0 + hh / 2 + oy0 + ho / 2) / 2
        markers.append((bx, yc, [actions[a] for a in act_ids]))

    for name, (r, c) in zip(singles, single_cells):
        w, h = _glyph_size(name, rng)
        x0 = c * cs + int(rng.integers(0, cs - w + 1))
        y0 = r * cs + int(rng.integers(0, cs - h + 1))
        add_entity(name, x0, y0, w, h)

    for bx, yc, names in markers:
        top = int(round(yc - 1.5 * len(names)))
        top = min(max(top, 0), res - 3 * len(names))
        for j, a in enumerate(names):
            img[top + 3 * j:top + 3 * j + 3, bx - 1:bx + 2] = ACTION_MARKER_COLORS.get(a, (0, 0, 0))

    threat_ids = {actions.index(a) for a in config.threat_actions}
    is_threat = any(set(t.action_ids) & threat_ids for t in triples)
    record = HoiPairRecord(image_id, tuple(entities), tuple(triples), is_threat, int(seed))
    pixels = img.astype(np.float32) / np.float32(255.0)
    return SceneImage(pixels, image_id), record


# ---------------------------------------------------------------------------
# Caption alignment
# ---------------------------------------------------------------------------


def align_caption(
    record: HoiPairRecord,
    vocab_entities: Sequence[str] = ENTITY_CLASSES,
    vocab_actions: Sequence[str] = ACTIONS,
    tokenizer: Tokenizer | None = None,
) -> CaptionRecord:
    """Template caption: a scene preamble plus one sentence per triple."""
    tokenizer = tokenizer or Tokenizer(list(vocab_entities) + list(vocab_actions) + list(GRAMMAR_WORDS))
    class_ids = sorted({e.class_id for e in record.entities})
    names = [vocab_entities[c] for c in class_ids]
    if len(names) == 1:
        listing = names[0]
    else:
        listing = ", ".join(names[:-1]) + " and " + names[-1]
    kind = "threat" if record.is_threat else "normal"
    sentences = [f"A {kind} scene shows {listing}."]
    for t in sorted(record.triples, key=lambda t: (t.human_idx, t.object_idx)):
        h = vocab_entities[record.entity(t.human_idx).class_id]
        o = vocab_entities[record.entity(t.object_idx).class_id]
        verbs = " and ".join(vocab_actions[a] for a in sorted(t.action_ids))
        sentences.append(f"The {h} {verbs} the {o}.")
    text = " ".join(sentences)
    return CaptionRecord(record.image_id, text, tuple(tokenizer.tokenize(text)))


def validate_alignment(
    record: HoiPairRecord,
    caption: CaptionRecord,
    vocab_entities: Sequence[str] = ENTITY_CLASSES,
    vocab_actions: Sequence[str] = ACTIONS,
) -> list[str]:
    """Names every triple element (entity class or action) missing from the caption."""
    words = set(Tokenizer.split_words(caption.text))
    missing: list[str] = []
    for t in record.triples:
        needed = [("entity", vocab_entities[record.entity(t.human_idx).class_id])]
        needed += [("action", vocab_actions[a]) for a in t.action_ids]
        needed.append(("entity", vocab_entities[record.entity(t.object_idx).class_id]))
        for kind, name in needed:
            msg = f"missing {kind} {name!r}"
            if name not in words and msg not in missing:
                missing.append(msg)
    return missing


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def build_splits(
    n_train: int,
    n_val: int,
    n_test: int,
    threat_ratio: float = 0.4,
    master_seed: int = 0,
    config: SceneConfig | None = None,
    with_images: bool = False,
):
    """Three manifests with floor(n * threat_ratio) threat scenes each.

    Returns the manifests, plus an ``image_id -> SceneImage`` map when
    ``with_images`` is set.
    """
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    if not 0.0 <= threat_ratio <= 1.0:
        raise ValueError("threat_ratio must lie in [0, 1]")
    config = config or SceneConfig(threat_ratio=threat_ratio)
    tokenizer = caption_tokenizer(config.entity_classes, config.actions)
    manifests = []
    images: dict[str, SceneImage] = {}
    index = 0
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        n_threat = math.floor(n * threat_ratio + 1e-9)
        order_rng = np.random.default_rng(record_seed(master_seed, 10**9 + SPLITS.index(split)))
        threat_flags = np.zeros(n, dtype=bool)
        threat_flags[order_rng.permutation(n)[:n_threat]] = True
        records = []
        for k in range(n):
            seed = record_seed(master_seed, index)
            index += 1
            image, rec = build_synthetic_scene(seed, config, f"{split}_{k:05d}", bool(threat_flags[k]))
            cap = align_caption(rec, config.entity_classes, config.actions, tokenizer)
            records.append((rec, cap))
            if with_images:
                images[rec.image_id] = image
        manifests.append(
            DatasetManifest(split, tuple(records), config.entity_classes, config.actions, config.threat_actions)
        )
    if with_images:
        return tuple(manifests), images
    return tuple(manifests)


def caption_tokenizer(vocab_entities=ENTITY_CLASSES, vocab_actions=ACTIONS) -> Tokenizer:
    return Tokenizer(list(vocab_entities) + list(vocab_actions) + list(GRAMMAR_WORDS))


def render_record(record: HoiPairRecord, config: SceneConfig | None = None) -> SceneImage:
    """Regenerate the pixels of a record from its stored seed."""
    image, regenerated = build_synthetic_scene(record.scene_seed, config, record.image_id, record.is_threat)
    if regenerated.entities != record.entities:
        raise ValueError(f"{record.image_id}: record does not match its scene seed under this config")
    return image


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------


def record_to_json(record: HoiPairRecord, caption: CaptionRecord) -> dict:
    return {
        "image_id": record.image_id,
        "scene_seed": record.scene_seed,
        "entities": [{"id": e.id, "class_id": e.class_id, "box": list(e.box)} for e in record.entities],
        "triples": [
            {"h": t.human_idx, "o": t.object_idx, "actions": list(t.action_ids)} for t in record.triples
        ],
        "is_threat": record.is_threat,
        "caption": caption.text,
    }


def serialize_dataset(manifest: DatasetManifest, path, images: dict | None = None) -> None:
    """Write the manifest as JSONL; PNG images (if given) go beside it as <image_id>.png."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": SCHEMA,
        "split": manifest.split,
        "vocab_entities": list(manifest.vocab_entities),
        "vocab_actions": list(manifest.vocab_actions),
        "threat_actions": list(manifest.threat_actions),
    }
    lines = [json.dumps(header)]
    lines += [json.dumps(record_to_json(r, c)) for r, c in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if images:
        for rec, _ in manifest.records:
            save_png(images[rec.image_id], path.parent / f"{rec.image_id}.png")


def save_png(image: SceneImage, path) -> None:
    arr = np.rint(image.pixels * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(directory, image_id: str) -> SceneImage:
    path = Path(directory) / f"{image_id}.png"
    if not path.exists():
        raise FileNotFoundError(f"missing image file {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return SceneImage(arr.astype(np.float32) / np.float32(255.0), image_id)


def _require(obj: dict, key: str, kind, line: int, name: str | None = None):
    name = name or key
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(line, name, "missing")
    value = obj[key]
    if kind is int and isinstance(value, bool):
        raise SchemaError(line, name, "expected integer")
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind):
        raise SchemaError(line, name, f"expected {getattr(kind, '__name__', kind)}")
    return value


def _parse_record(obj, line: int, tokenizer: Tokenizer) -> tuple[HoiPairRecord, CaptionRecord]:
    if not isinstance(obj, dict):
        raise SchemaError(line, "<record>", "expected JSON object")
    image_id = _require(obj, "image_id", str, line)
    seed = _require(obj, "scene_seed", int, line)
    entities = []
    for k, e in enumerate(_require(obj, "entities", list, line)):
        box = _require(e, "box", list, line, f"entities[{k}].box")
        if len(box) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
            raise SchemaError(line, f"entities[{k}].box", "expected 4 numbers")
        try:
            entities.append(
                EntityRecord(
                    _require(e, "id", int, line, f"entities[{k}].id"),
                    _require(e, "class_id", int, line, f"entities[{k}].class_id"),
                    tuple(float(v) for v in box),
                )
            )
        except ValueError as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(line, f"entities[{k}].box", str(exc)) from None
    triples = []
    for k, t in enumerate(_require(obj, "triples", list, line)):
        acts = _require(t, "actions", list, line, f"triples[{k}].actions")
        if not all(isinstance(a, int) and not isinstance(a, bool) for a in acts):
            raise SchemaError(line, f"triples[{k}].actions", "expected integers")
        try:
            triples.append(
                HoiTripleGT(
                    _require(t, "h", int, line, f"triples[{k}].h"),
                    _require(t, "o", int, line, f"triples[{k}].o"),
                    tuple(acts),
                )
            )
        except ValueError as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(line, f"triples[{k}]", str(exc)) from None
    is_threat = _require(obj, "is_threat", bool, line)
    text = _require(obj, "caption", str, line)
    try:
        rec = HoiPairRecord(image_id, tuple(entities), tuple(triples), is_threat, seed)
    except ValueError as exc:
        raise SchemaError(line, "entities" if not entities else "triples", str(exc)) from None
    return rec, CaptionRecord(image_id, text, tuple(tokenizer.tokenize(text)))


def load_dataset(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(1, "schema", "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(1, "<header>", f"invalid JSON: {exc.msg}") from None
    if _require(header, "schema", str, 1) != SCHEMA:
        raise SchemaError(1, "schema", f"expected {SCHEMA!r}")
    vocab_e = tuple(_require(header, "vocab_entities", list, 1))
    vocab_a = tuple(_require(header, "vocab_actions", list, 1))
    threat = tuple(_require(header, "threat_actions", list, 1))
    if not set(threat) <= set(vocab_a):
        raise SchemaError(1, "threat_actions", "not a subset of vocab_actions")
    split = header.get("split", "train")
    if split not in SPLITS:
        raise SchemaError(1, "split", f"expected one of {SPLITS}")
    tokenizer = caption_tokenizer(vocab_e, vocab_a)
    records = []
    seen = set()
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(lineno, "<record>", f"invalid JSON: {exc.msg}") from None
        rec, cap = _parse_record(obj, lineno, tokenizer)
        if rec.image_id in seen:
            raise SchemaError(lineno, "image_id", "duplicate")
        seen.add(rec.image_id)
        for e in rec.entities:
            if not 0 <= e.class_id < len(vocab_e):
                raise SchemaError(lineno, "entities.class_id", "outside vocabulary")
        for t in rec.triples:
            if any(not 0 <= a < len(vocab_a) for a in t.action_ids):
                raise SchemaError(lineno, "triples.actions", "outside vocabulary")
        records.append((rec, cap))
    return DatasetManifest(split, tuple(records), vocab_e, vocab_a, threat)


def validate_manifest(manifest: DatasetManifest, directory=None) -> list[str]:
    """Consistency problems in a loaded manifest (empty list when clean)."""
    problems = []
    threat_ids = manifest.threat_action_ids
    for rec, cap in manifest.records:
        expected = any(set(t.action_ids) & threat_ids for t in rec.triples)
        if expected != rec.is_threat:
            problems.append(f"{rec.image_id}: is_threat={rec.is_threat} but triples say {expected}")
        for v in validate_alignment(rec, cap, manifest.vocab_entities, manifest.vocab_actions):
            problems.append(f"{rec.image_id}: {v}")
        if directory is not None and not (Path(directory) / f"{rec.image_id}.png").exists():
            problems.append(f"{rec.image_id}: image file missing")
    return problems
