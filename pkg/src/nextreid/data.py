"""Tri-modal ReID samples: on-disk layout, synthetic fixtures, augmentation, PK batches.

Layout of a dataset root::

    root/{rgb,nir,tir}/<sample_id>.png
    root/captions/<sample_id>.json   # {"sample_id", "rgb", "nir", "tir", optional "attributes"}
    root/meta.csv                    # sample_id, identity, camera, time_label, split
    root/dataset.json                # {"object_type": ...}
    root/truth.json                  # synthetic data only: generator attribute table
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .captions import (
    MODALITIES,
    AttributeSchema,
    ConfidenceAttribute,
    atomic_write_text,
    compose_template,
    sidecar_json,
)

SPLITS = ("train", "query", "gallery")

# (object type, samples, identities, cameras)
DATASET_STATS = {
    "RGBNT201": ("person", 4787, 201, 4),
    "MSVR310": ("vehicle", 2087, 310, 8),
    "RGBNT100": ("vehicle", 17250, 100, 8),
    "WMVEID863": ("vehicle", 4709, 863, 8),
}
FULL_SCALE_SIZE = {"person": (256, 128), "vehicle": (128, 256)}


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=[.!?])\s+", text.strip()) if s.strip()]


@dataclass(frozen=True)
class CaptionRecord:
    text: str
    sentences: tuple[str, ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("caption has no sentences")

    @classmethod
    def from_text(cls, text: str) -> "CaptionRecord":
        return cls(text, tuple(split_sentences(text)))

    @classmethod
    def from_sentences(cls, sentences: Sequence[str]) -> "CaptionRecord":
        return cls(" ".join(sentences), tuple(sentences))


@dataclass(frozen=True)
class MultiModalSample:
    sample_id: str
    identity: int
    camera: int
    time_label: int | None
    images: Mapping[str, np.ndarray]
    captions: Mapping[str, CaptionRecord]
    attributes: Mapping[str, tuple[ConfidenceAttribute, ...]] | None = None

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.images]
        if missing:
            raise ValueError(f"sample {self.sample_id} lacks modalities {missing}")
        shapes = {self.images[m].shape for m in MODALITIES}
        if len(shapes) != 1:
            raise ValueError(f"sample {self.sample_id} has misaligned modality shapes {shapes}")
        if self.identity < 0 or self.camera < 0:
            raise ValueError(f"sample {self.sample_id} has negative identity/camera")


@dataclass(frozen=True)
class DatasetIndex:
    samples: tuple[MultiModalSample, ...]
    split: Mapping[str, str]
    object_type: str = "person"
    truth: Mapping | None = None

    def by_split(self, name: str) -> list[MultiModalSample]:
        return [s for s in self.samples if self.split[s.sample_id] == name]

    def identities(self, split: str | None = None) -> list[int]:
        pool = self.samples if split is None else self.by_split(split)
        return sorted({s.identity for s in pool})

    def label_map(self) -> dict[int, int]:
        """Train identity -> contiguous label 0..C-1."""
        return {ident: i for i, ident in enumerate(self.identities("train"))}

    @property
    def num_classes(self) -> int:
        return len(self.identities("train"))

    def summary(self) -> dict:
        return {
            "object_type": self.object_type,
            "samples": len(self.samples),
            "identities": len(self.identities()),
            "cameras": len({s.camera for s in self.samples}),
            **{f"{k}_samples": len(self.by_split(k)) for k in SPLITS},
        }

    def validate(self) -> None:
        if not self.samples:
            raise ValueError("no samples found")
        bad = {v for v in self.split.values() if v not in SPLITS}
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}")
        unseen = set(self.identities("query")) - set(self.identities("gallery"))
        if unseen:
            raise ValueError(f"query identities missing from gallery: {sorted(unseen)[:10]}")

    def with_samples(self, samples: Sequence[MultiModalSample]) -> "DatasetIndex":
        return replace(self, samples=tuple(samples))


# --------------------------------------------------------------------------
# disk I/O

def read_meta(root: str | os.PathLike) -> list[dict]:
    path = Path(root) / "meta.csv"
    if not path.exists():
        raise FileNotFoundError(f"no samples found: {path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"no samples found in {path}")
    return rows


def _parse_sidecar(path: Path) -> tuple[dict[str, CaptionRecord], dict | None]:
    try:
        obj = json.loads(path.read_text())
        captions = {m: CaptionRecord.from_text(obj[m]) for m in MODALITIES}
        attributes = None
        if "attributes" in obj:
            attributes = {
                m: tuple(ConfidenceAttribute.from_json(a) for a in obj["attributes"][m]) for m in MODALITIES
            }
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed caption sidecar {path}: {exc}") from None
    return captions, attributes


def load_dataset(root: str | os.PathLike, object_type: str | None = None) -> DatasetIndex:
    root = Path(root)
    if not (root / "meta.csv").exists():
        raise FileNotFoundError(f"no samples found under {root}")
    if object_type is None:
        info = root / "dataset.json"
        object_type = json.loads(info.read_text())["object_type"] if info.exists() else "person"
    samples, split = [], {}
    for row in read_meta(root):
        sid = row["sample_id"]
        images = {}
        for m in MODALITIES:
            p = root / m / f"{sid}.png"
            if not p.exists():
                raise FileNotFoundError(f"sample {sid}: missing {m} image {p}")
            with Image.open(p) as im:
                images[m] = np.asarray(im.convert("RGB"), dtype=np.uint8)
        side = root / "captions" / f"{sid}.json"
        if not side.exists():
            raise FileNotFoundError(f"sample {sid}: missing caption sidecar {side}")
        captions, attributes = _parse_sidecar(side)
        t = row.get("time_label", "")
        samples.append(
            MultiModalSample(
                sid, int(row["identity"]), int(row["camera"]), int(t) if t not in ("", None) else None,
                images, captions, attributes,
            )
        )
        split[sid] = row["split"]
    truth_path = root / "truth.json"
    truth = json.loads(truth_path.read_text()) if truth_path.exists() else None
    index = DatasetIndex(tuple(samples), split, object_type, truth)
    index.validate()
    return index


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


def save_dataset(index: DatasetIndex, root: str | os.PathLike) -> None:
    root = Path(root)
    for m in MODALITIES + ("captions",):
        (root / m).mkdir(parents=True, exist_ok=True)
    for s in index.samples:
        for m in MODALITIES:
            (root / m / f"{s.sample_id}.png").write_bytes(png_bytes(s.images[m]))
        text = {m: s.captions[m].text for m in MODALITIES}
        atomic_write_text(root / "captions" / f"{s.sample_id}.json", sidecar_json(s.sample_id, text, s.attributes))
    with open(root / "meta.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "identity", "camera", "time_label", "split"])
        for s in index.samples:
            w.writerow([s.sample_id, s.identity, s.camera, "" if s.time_label is None else s.time_label, index.split[s.sample_id]])
    atomic_write_text(root / "dataset.json", json.dumps({"object_type": index.object_type}) + "\n")
    if index.truth is not None:
        atomic_write_text(root / "truth.json", json.dumps(index.truth, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# synthetic fixtures

COLORS = {
    "red": (200, 30, 30),
    "green": (40, 160, 60),
    "blue": (40, 70, 200),
    "yellow": (230, 210, 40),
    "white": (235, 235, 235),
    "black": (25, 25, 25),
    "purple": (130, 50, 160),
    "orange": (240, 130, 30),
}
SKIN, HAIR, BAG = (225, 185, 150), (60, 40, 25), (110, 70, 30)
FOOTWEAR = {"black shoes": (20, 20, 20), "white sneakers": (240, 240, 240), "brown boots": (120, 75, 35)}
UPPER_GARMENTS = ("t-shirt", "jacket", "striped shirt")
LOWER_GARMENTS = ("trousers", "shorts")
VEHICLE_TYPES = ("sedan", "suv", "van")
VIEWS = ("front", "back", "left side", "right side")

# part ids used for rendering all three modalities from one layout
BG, SKIN_P, HAIR_P, UPPER_P, LOWER_P, SHOE_P, PACK_P, HBAG_P, ACCENT_P = range(9)
# base temperature per part for the thermal rendering
PART_HEAT = {BG: 0.15, SKIN_P: 0.95, HAIR_P: 0.7, UPPER_P: 0.6, LOWER_P: 0.55, SHOE_P: 0.35, PACK_P: 0.3, HBAG_P: 0.3, ACCENT_P: 0.45}

SUPPRESSIBLE = {
    "person": ("upper clothing", "lower clothing", "hairstyle", "footwear", "backpack", "handbag"),
    "vehicle": ("body color", "roof feature", "wheel style", "distinctive marks"),
}


def _person_attributes(rng: np.random.Generator, signature: tuple[str, str, str]) -> dict[str, str]:
    upper_color, garment, lower_color = signature
    return {
        "age": str(rng.choice(["young", "middle-aged", "elderly"])),
        "gender": str(rng.choice(["man", "woman"])),
        "upper clothing": f"{upper_color} {garment}",
        "lower clothing": f"{lower_color} {rng.choice(LOWER_GARMENTS)}",
        "hairstyle": str(rng.choice(["short hair", "long hair"])),
        "footwear": str(rng.choice(list(FOOTWEAR))),
        "backpack": str(rng.choice(["backpack present", "no backpack"])),
        "handbag": str(rng.choice(["handbag present", "no handbag"])),
    }


def _vehicle_attributes(rng: np.random.Generator, signature: tuple[str, str, str]) -> dict[str, str]:
    color, vtype, accent = signature
    return {
        "vehicle type": vtype,
        "body color": color,
        "vehicle size": {"sedan": "medium", "suv": "large", "van": "large"}[vtype],
        "roof feature": str(rng.choice(["roof rack", "plain roof"])),
        "wheel style": str(rng.choice(["black rims", "silver rims"])),
        "distinctive marks": f"{accent} stripe",
    }


def _person_layout(h: int, w: int, attrs: Mapping[str, str], dx: int, dy: int) -> np.ndarray:
    parts = np.zeros((h, w), dtype=np.int8)

    def rows(a, b):
        return slice(max(0, int(a * h) + dy), min(h, int(b * h) + dy))

    x0, x1 = max(0, int(0.25 * w) + dx), min(w, int(0.75 * w) + dx)
    hx0, hx1 = max(0, int(0.35 * w) + dx), min(w, int(0.65 * w) + dx)
    parts[rows(0.03, 0.2), hx0:hx1] = SKIN_P
    parts[rows(0.03, 0.08), hx0:hx1] = HAIR_P
    if attrs["hairstyle"] == "long hair":
        parts[rows(0.03, 0.3), max(0, hx0 - 1):hx0 + 1] = HAIR_P
        parts[rows(0.03, 0.3), hx1 - 1:min(w, hx1 + 1)] = HAIR_P
    parts[rows(0.2, 0.55), x0:x1] = UPPER_P
    garment = attrs["upper clothing"].split(" ", 1)[1]
    r = rows(0.2, 0.55)
    if garment == "striped shirt":
        parts[r.start:r.stop:3, x0:x1] = ACCENT_P
    elif garment == "jacket":
        mid = (x0 + x1) // 2
        parts[r, mid:mid + 1] = ACCENT_P
    lower_end = 0.72 if attrs["lower clothing"].endswith("shorts") else 0.9
    parts[rows(0.55, lower_end), x0:x1] = LOWER_P
    parts[rows(lower_end, 0.9), x0 + 1:x1 - 1] = SKIN_P
    parts[rows(0.9, 1.0), x0:x1] = SHOE_P
    if attrs["backpack"] == "backpack present":
        parts[rows(0.22, 0.5), max(0, x1 - 1):min(w, x1 + max(2, w // 6))] = PACK_P
    if attrs["handbag"] == "handbag present":
        parts[rows(0.5, 0.64), max(0, x0 - max(2, w // 6)):x0 + 1] = HBAG_P
    return parts


def _vehicle_layout(h: int, w: int, attrs: Mapping[str, str], dx: int, dy: int) -> np.ndarray:
    parts = np.zeros((h, w), dtype=np.int8)
    top = {"sedan": 0.35, "suv": 0.2, "van": 0.15}[attrs["vehicle type"]]
    y0, y1 = max(0, int(top * h) + dy), min(h, int(0.8 * h) + dy)
    x0, x1 = max(0, int(0.08 * w) + dx), min(w, int(0.92 * w) + dx)
    parts[y0:y1, x0:x1] = UPPER_P
    parts[y0 + 1:y0 + max(2, (y1 - y0) // 3), x0 + 2:x1 - 2] = HAIR_P  # windows
    mid = (y0 + y1) // 2 + 1
    parts[mid:mid + 1, x0:x1] = ACCENT_P
    if attrs["roof feature"] == "roof rack" and y0 > 0:
        parts[y0 - 1, x0 + 2:x1 - 2] = SHOE_P
    wy = slice(max(0, y1 - 1), min(h, y1 + max(2, h // 8)))
    ww = max(2, w // 8)
    parts[wy, x0 + 1:x0 + 1 + ww] = SHOE_P
    parts[wy, x1 - 1 - ww:x1 - 1] = SHOE_P
    return parts


def _part_colors(object_type: str, attrs: Mapping[str, str]) -> dict[int, tuple[int, int, int]]:
    if object_type == "person":
        return {
            SKIN_P: SKIN,
            HAIR_P: HAIR,
            UPPER_P: COLORS[attrs["upper clothing"].split()[0]],
            LOWER_P: COLORS[attrs["lower clothing"].split()[0]],
            SHOE_P: FOOTWEAR[attrs["footwear"]],
            PACK_P: BAG,
            HBAG_P: BAG,
            ACCENT_P: tuple(int(0.5 * c) for c in COLORS[attrs["upper clothing"].split()[0]]),
        }
    rim = (30, 30, 30) if attrs["wheel style"] == "black rims" else (170, 170, 180)
    return {
        UPPER_P: COLORS[attrs["body color"]],
        HAIR_P: (40, 50, 70),
        ACCENT_P: COLORS[attrs["distinctive marks"].split()[0]],
        SHOE_P: rim,
        SKIN_P: SKIN,
        PACK_P: BAG,
        HBAG_P: BAG,
    }


def _heat_palette(t: np.ndarray) -> np.ndarray:
    # black -> red -> yellow -> white
    t = np.clip(t, 0.0, 1.0)
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)


def _render(
    rng: np.random.Generator,
    object_type: str,
    attrs: Mapping[str, str],
    size: tuple[int, int],
    night: bool,
    heat_offset: float,
) -> dict[str, np.ndarray]:
    h, w = size
    dx, dy = (int(v) for v in rng.integers(-1, 2, size=2))
    layout = (_person_layout if object_type == "person" else _vehicle_layout)(h, w, attrs, dx, dy)
    colors = _part_colors(object_type, attrs)
    base = rng.uniform(40, 90, size=(h, w, 1)) * np.ones((1, 1, 3))
    for part, col in colors.items():
        base[layout == part] = col
    base += rng.normal(0, 6, size=base.shape)
    illum = rng.uniform(0.35, 0.55) if night else rng.uniform(0.85, 1.1)
    rgb = np.clip(base * illum, 0, 255)
    luma = base @ np.array([0.299, 0.587, 0.114])
    nir = np.clip(luma * rng.uniform(0.85, 1.0) + rng.normal(0, 8, size=luma.shape), 0, 255)
    temp = np.vectorize(PART_HEAT.get)(layout).astype(np.float64)
    temp = np.where(layout != BG, temp + heat_offset, temp) + rng.normal(0, 0.03, size=temp.shape)
    tir = _heat_palette(temp) * 255
    return {
        "rgb": rgb.round().astype(np.uint8),
        "nir": np.repeat(nir.round().astype(np.uint8)[..., None], 3, axis=-1),
        "tir": np.clip(tir.round(), 0, 255).astype(np.uint8),
    }


def _environment(rng: np.random.Generator, camera: int, night: bool) -> dict[str, dict[str, str]]:
    clarity = str(rng.choice(["clear", "slightly blurred"]))
    time = "nighttime" if night else "daytime"
    illum = {"rgb": "low" if night else "bright", "nir": "infrared", "tir": "thermal"}
    return {
        m: {"view": VIEWS[camera % 4], "illumination": illum[m], "capture time": time, "target clarity": clarity}
        for m in MODALITIES
    }


def generate_synthetic(
    num_ids: int,
    samples_per_id: int,
    image_size: tuple[int, int] = (32, 16),
    seed: int = 0,
    object_type: str = "person",
    num_test_ids: int = 0,
    num_cameras: int = 4,
) -> DatasetIndex:
    """Procedural tri-modal identities with template captions.

    Identities ``0..num_ids-1`` form the train split; ``num_test_ids`` further
    identities are split into one query and the rest gallery. Each identity has
    one appearance attribute hidden ("unknown") in one modality; ``truth``
    records the full table and which attribute was hidden.
    """
    if num_ids < 2 or samples_per_id < 2:
        raise ValueError("need num_ids >= 2 and samples_per_id >= 2")
    if min(image_size) < 16:
        raise ValueError(f"image_size {image_size} too small to render (min 16x16)")
    rng = np.random.default_rng(seed)
    schema = AttributeSchema.for_object(object_type)
    if object_type == "person":
        pool = [(c, g, l) for c in COLORS for g in UPPER_GARMENTS for l in COLORS]
        make_attrs = _person_attributes
    else:
        pool = [(c, v, a) for c in COLORS for v in VEHICLE_TYPES for a in COLORS if a != c]
        make_attrs = _vehicle_attributes
    order = rng.permutation(len(pool))
    total = num_ids + num_test_ids
    samples, split, truth_samples = [], {}, {}
    for ident in range(total):
        attrs = make_attrs(rng, pool[order[ident % len(pool)]])
        heat_offset = float(rng.uniform(-0.1, 0.1))
        hidden = (str(rng.choice(MODALITIES)), str(rng.choice(SUPPRESSIBLE[object_type])))
        for j in range(samples_per_id):
            sid = f"{ident:04d}_{j:03d}"
            camera = (ident + j) % num_cameras
            time_label = j // 2
            night = bool(rng.random() < 0.3)
            images = _render(rng, object_type, attrs, image_size, night, heat_offset)
            env = _environment(rng, camera, night)
            full = {m: {**attrs, **env[m]} for m in MODALITIES}
            captions, attributes = {}, {}
            for m in MODALITIES:
                items = []
                for name in schema.attributes:
                    if (m, name) == hidden:
                        items.append(ConfidenceAttribute(name, "unknown", 0.0))
                    else:
                        items.append(ConfidenceAttribute(name, full[m][name], 1.0))
                attributes[m] = tuple(items)
                captions[m] = CaptionRecord.from_text(compose_template(items))
            samples.append(MultiModalSample(sid, ident, camera, time_label, images, captions))
            if ident < num_ids:
                split[sid] = "train"
            else:
                split[sid] = "query" if j == 0 else "gallery"
            truth_samples[sid] = {"identity": ident, "attributes": full, "suppressed": list(hidden)}
    truth = {"object_type": object_type, "seed": seed, "samples": truth_samples}
    index = DatasetIndex(tuple(samples), split, object_type, truth)
    index.validate()
    return index


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    pad_pixels: int = 2
    crop_size: tuple[int, int] | None = None  # None: keep input size
    erase_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "erase_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.pad_pixels < 0:
            raise ValueError("pad_pixels must be >= 0")
        if self.crop_size is not None and min(self.crop_size) <= 0:
            raise ValueError("crop_size must be positive")


def _erase(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    for _ in range(10):
        area = rng.uniform(0.02, 0.4) * h * w
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
        eh, ew = int(round(math.sqrt(area * aspect))), int(round(math.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            y, x = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
            img = img.copy()
            img[y:y + eh, x:x + ew] = rng.integers(0, 256, size=(eh, ew, img.shape[2]), dtype=np.uint8)
            return img
    return img


def augment(sample: MultiModalSample, cfg: AugmentationConfig, rng: np.random.Generator | None = None) -> MultiModalSample:
    """Flip/pad/crop shared across modalities; erasing drawn per modality."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    h, w = sample.images["rgb"].shape[:2]
    ch, cw = cfg.crop_size or (h, w)
    p = cfg.pad_pixels
    if ch > h + 2 * p or cw > w + 2 * p:
        raise ValueError(f"crop {(ch, cw)} exceeds padded size {(h + 2 * p, w + 2 * p)}")
    flip = rng.random() < cfg.flip_prob
    top = int(rng.integers(0, h + 2 * p - ch + 1))
    left = int(rng.integers(0, w + 2 * p - cw + 1))
    out = {}
    for m in MODALITIES:
        img = sample.images[m]
        if flip:
            img = img[:, ::-1]
        if p:
            img = np.pad(img, ((p, p), (p, p), (0, 0)))
        img = np.ascontiguousarray(img[top:top + ch, left:left + cw])
        if cfg.erase_prob > 0 and rng.random() < cfg.erase_prob:
            img = _erase(img, rng)
        out[m] = img
    return replace(sample, images=out)


# --------------------------------------------------------------------------
# PK sampling

def pk_batches(
    index: DatasetIndex,
    P: int,
    K: int,
    seed: int = 0,
    epochs: int | None = 1,
    split: str = "train",
) -> Iterator[list[MultiModalSample]]:
    """Batches of P identities x K samples; ``epochs=None`` streams forever.

    Every identity appears at least once per epoch; identities with fewer than
    K samples are topped up by resampling with replacement.
    """
    by_id: dict[int, list[MultiModalSample]] = {}
    for s in index.by_split(split):
        by_id.setdefault(s.identity, []).append(s)
    ids = sorted(by_id)
    if len(ids) < 2:
        raise ValueError("PK sampling needs at least 2 identities (triplet loss undefined)")
    if P < 2 or K < 1:
        raise ValueError("need P >= 2 and K >= 1")
    if P > len(ids):
        raise ValueError(f"P={P} exceeds the {len(ids)} available identities")
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng([seed, epoch])
        order = [ids[i] for i in rng.permutation(len(ids))]
        for start in range(0, len(order), P):
            group = order[start:start + P]
            if len(group) < P:
                rest = [i for i in ids if i not in group]
                group += [rest[i] for i in rng.choice(len(rest), P - len(group), replace=False)]
            batch = []
            for ident in group:
                pool = by_id[ident]
                if len(pool) >= K:
                    picks = rng.choice(len(pool), K, replace=False)
                else:
                    picks = np.concatenate([rng.permutation(len(pool)), rng.choice(len(pool), K - len(pool))])
                batch.extend(pool[i] for i in picks)
            yield batch
        epoch += 1
