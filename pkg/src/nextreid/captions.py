"""Confidence-aware attribute captions for tri-modal images.

Pipeline per sample: attribute prompt -> MLLM backends -> parse -> merge across
backends (max confidence) -> complement across modalities -> compose caption.
Clients are pluggable; ``ReplayClient`` serves recorded responses offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
import urllib.request
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MODALITIES = ("rgb", "nir", "tir")
LOW_MARKERS = ("unknown", "unclear", "not carrying")
ENVIRONMENT_ATTRIBUTES = ("view", "illumination", "capture time", "target clarity")

PERSON_APPEARANCE = (
    "age",
    "gender",
    "upper clothing",
    "lower clothing",
    "hairstyle",
    "footwear",
    "backpack",
    "handbag",
)
VEHICLE_APPEARANCE = (
    "vehicle type",
    "body color",
    "vehicle size",
    "roof feature",
    "wheel style",
    "distinctive marks",
)

MODALITY_NAMES = {
    "rgb": "visible-light (RGB)",
    "nir": "near-infrared (NIR)",
    "tir": "thermal-infrared (TIR)",
}


class CaptionError(RuntimeError):
    pass


class AttributeParseError(CaptionError):
    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}: {raw!r}")
        self.raw = raw


class FixtureMissing(CaptionError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    object_type: str
    attributes: tuple[str, ...]

    def __post_init__(self):
        if self.object_type not in ("person", "vehicle"):
            raise ValueError(f"unknown object type {self.object_type!r}")
        if len(set(self.attributes)) != len(self.attributes):
            raise ValueError("attribute names must be unique")
        missing = [a for a in ENVIRONMENT_ATTRIBUTES if a not in self.attributes]
        if missing:
            raise ValueError(f"schema lacks environment attributes {missing}")

    @classmethod
    def for_object(cls, object_type: str) -> "AttributeSchema":
        appearance = PERSON_APPEARANCE if object_type == "person" else VEHICLE_APPEARANCE
        return cls(object_type, appearance + ENVIRONMENT_ATTRIBUTES)

    @property
    def appearance(self) -> tuple[str, ...]:
        return tuple(a for a in self.attributes if a not in ENVIRONMENT_ATTRIBUTES)


@dataclass(frozen=True)
class ConfidenceAttribute:
    name: str
    value: str
    confidence: float
    provenance: str = "native"

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if not self.value:
            raise ValueError(f"empty value for attribute {self.name!r}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "confidence": self.confidence,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ConfidenceAttribute":
        return cls(obj["name"], obj["value"], float(obj["confidence"]), obj.get("provenance", "native"))


def is_low_value(value: str, low_markers: Sequence[str] = LOW_MARKERS) -> bool:
    return value.strip().lower() in {m.lower() for m in low_markers}


# --------------------------------------------------------------------------
# prompts and parsing

def build_attribute_prompt(schema: AttributeSchema, modality: str) -> str:
    lines = [
        f"You are given a {MODALITY_NAMES[modality]} image of a {schema.object_type}.",
        "For every attribute listed below, report the most likely value and a confidence "
        "score between 0 and 1 expressing how certain you are.",
        'If an attribute cannot be determined from this image, answer "unknown" with a low confidence.',
        "Describe the environment attributes from what is visible in this image only.",
        "Answer with a single JSON object and nothing else, using one key per attribute:",
        '{"<attribute name>": {"value": "<short phrase>", "confidence": <number in [0, 1]>}}',
        "Attributes:",
    ]
    lines += [f"- {name}" for name in schema.attributes]
    return "\n".join(lines) + "\n"


def _normalize_key(key: str) -> str:
    return re.sub(r"[\s_\-]+", " ", str(key).strip().lower())


def _parse_confidence(raw) -> float:
    if isinstance(raw, str):
        text = raw.strip()
        pct = text.endswith("%")
        value = float(text.rstrip("%"))
        if pct:
            value /= 100.0
    else:
        value = float(raw)
    if math.isnan(value):
        return 0.0
    return min(1.0, max(0.0, value))


def _extract_json(raw: str):
    start, end = raw.find("{"), raw.rfind("}")
    if start < 0 or end <= start:
        raise AttributeParseError("no JSON object in response", raw)
    try:
        return json.loads(raw[start:end + 1])
    except json.JSONDecodeError as exc:
        raise AttributeParseError(f"malformed JSON ({exc.msg})", raw) from None


def parse_attribute_response(raw: str, schema: AttributeSchema) -> list[ConfidenceAttribute]:
    """Tolerant parse of one backend response.

    Accepts ``{name: {value, confidence}}``, ``{name: [value, confidence]}`` or
    ``{"attributes": [{name, value, confidence}, ...]}``. Attributes absent from
    the response become ``("unknown", 0.0)``; confidences are clamped to [0, 1].
    """
    obj = _extract_json(raw)
    if isinstance(obj.get("attributes"), list):
        obj = {item.get("name", ""): item for item in obj["attributes"] if isinstance(item, dict)}
    found: dict[str, tuple[str, float]] = {}
    for key, entry in obj.items():
        name = _normalize_key(key)
        try:
            if isinstance(entry, dict):
                value, conf = entry.get("value"), entry.get("confidence", 0.0)
            elif isinstance(entry, (list, tuple)) and len(entry) == 2:
                value, conf = entry
            else:
                continue
            conf = _parse_confidence(conf)
        except (TypeError, ValueError):
            continue
        value = str(value).strip() if value is not None else ""
        found[name] = (value or "unknown", conf if value else 0.0)
    known = {_normalize_key(a): a for a in schema.attributes}
    if not any(k in known for k in found):
        raise AttributeParseError("response contains no schema attribute", raw)
    out = []
    for norm, name in known.items():
        value, conf = found.get(norm, ("unknown", 0.0))
        out.append(ConfidenceAttribute(name, value, conf))
    return out


# --------------------------------------------------------------------------
# merge and complement

def merge_backends(
    per_backend: Mapping[str, Sequence[ConfidenceAttribute]],
    priority: Sequence[str] = (),
) -> list[ConfidenceAttribute]:
    """Per attribute keep the (value, confidence) with the highest confidence.

    Ties go to the backend earliest in ``priority`` (unlisted backends follow in
    name order), then to the lexicographically smallest value.
    """
    if not per_backend:
        raise ValueError("need at least one backend")
    order = list(priority) + sorted(b for b in per_backend if b not in priority)
    rank = {b: i for i, b in enumerate(order)}
    names: list[str] = []
    candidates: dict[str, list[tuple[float, int, str, ConfidenceAttribute]]] = {}
    for backend in sorted(per_backend, key=rank.__getitem__):
        for attr in per_backend[backend]:
            if attr.name not in candidates:
                names.append(attr.name)
                candidates[attr.name] = []
            candidates[attr.name].append((-attr.confidence, rank[backend], attr.value, attr))
    return [min(candidates[name])[3] for name in names]


def complement_modalities(
    sets: Mapping[str, Sequence[ConfidenceAttribute]],
    low_markers: Sequence[str] = LOW_MARKERS,
    threshold: float = 0.5,
    environment: Sequence[str] = ENVIRONMENT_ATTRIBUTES,
) -> dict[str, list[ConfidenceAttribute]]:
    """Fill uninformative attributes of one modality from its sibling modalities.

    Only native values act as sources and already-borrowed values are left
    alone, which makes the operation idempotent.
    """
    missing = [m for m in MODALITIES if m not in sets]
    if missing:
        raise ValueError(f"complement needs all modalities, missing {missing}")
    lookup = {m: {a.name: a for a in sets[m]} for m in MODALITIES}
    out: dict[str, list[ConfidenceAttribute]] = {}
    for m in MODALITIES:
        result = []
        for attr in sets[m]:
            low = is_low_value(attr.value, low_markers)
            if (
                attr.name in environment
                or attr.provenance != "native"
                or not (low or attr.confidence < threshold)
            ):
                result.append(attr)
                continue
            best = None
            for other in MODALITIES:
                src = lookup[other].get(attr.name)
                if other == m or src is None or src.provenance != "native":
                    continue
                if is_low_value(src.value, low_markers):
                    continue
                if best is None or src.confidence > best[1].confidence:
                    best = (other, src)
            # a confident-enough-but-low-confidence value is only replaced by a more confident one
            if best is not None and (low or best[1].confidence > attr.confidence):
                other, src = best
                result.append(ConfidenceAttribute(attr.name, src.value, src.confidence, f"borrowed-from:{other}"))
            else:
                result.append(attr)
        out[m] = result
    return out


# --------------------------------------------------------------------------
# caption composition

SENTENCE_TEMPLATES = {
    "age": "The person appears {}.",
    "gender": "The person is a {}.",
    "upper clothing": "The upper body is dressed in a {}.",
    "lower clothing": "The lower body is dressed in {}.",
    "hairstyle": "The person has {}.",
    "footwear": "The person wears {}.",
    "backpack": "The backpack status is {}.",
    "handbag": "The handbag status is {}.",
    "vehicle type": "The vehicle is a {}.",
    "body color": "The body color is {}.",
    "vehicle size": "The vehicle size is {}.",
    "roof feature": "The roof feature is {}.",
    "wheel style": "The wheel style is {}.",
    "distinctive marks": "The distinctive marks are {}.",
}
ENVIRONMENT_TEMPLATE = (
    "The image is captured from the {view} view in {illumination} illumination "
    "during {capture time} with {target clarity} target clarity."
)


def _informative(attr: ConfidenceAttribute, low_markers, threshold) -> bool:
    return not is_low_value(attr.value, low_markers) and attr.confidence >= threshold


def compose_template(
    attrs: Sequence[ConfidenceAttribute],
    low_markers: Sequence[str] = LOW_MARKERS,
    threshold: float = 0.5,
) -> str:
    by_name = {a.name: a for a in attrs}
    sentences = []
    for name, attr in by_name.items():
        if name in ENVIRONMENT_ATTRIBUTES or name not in SENTENCE_TEMPLATES:
            continue
        if _informative(attr, low_markers, threshold):
            sentences.append(SENTENCE_TEMPLATES[name].format(attr.value))
    env = {k: by_name[k].value if k in by_name else "unknown" for k in ENVIRONMENT_ATTRIBUTES}
    sentences.append(ENVIRONMENT_TEMPLATE.format_map(env))
    return " ".join(sentences)


def _template_regex(template: str) -> re.Pattern:
    parts = re.split(r"\{([^}]*)\}", template)
    pattern = ""
    for i, part in enumerate(parts):
        if i % 2:
            pattern += f"(?P<g{i}>.+?)"
        else:
            pattern += re.escape(part)
    return re.compile(pattern)


_SENTENCE_PATTERNS = {name: _template_regex(t) for name, t in SENTENCE_TEMPLATES.items()}
_ENV_PATTERN = _template_regex(ENVIRONMENT_TEMPLATE)


def parse_caption(text: str) -> dict[str, str]:
    """Invert ``compose_template``: recover attribute values from a template caption."""
    from .data import split_sentences

    values: dict[str, str] = {}
    for sentence in split_sentences(text):
        m = _ENV_PATTERN.fullmatch(sentence)
        if m:
            values.update(zip(ENVIRONMENT_ATTRIBUTES, m.groups()))
            continue
        for name, pattern in _SENTENCE_PATTERNS.items():
            m = pattern.fullmatch(sentence)
            if m:
                values[name] = m.group(1)
                break
    return values


def build_caption_prompt(attrs: Sequence[ConfidenceAttribute], modality: str, object_type: str) -> str:
    payload = json.dumps([{"name": a.name, "value": a.value, "confidence": a.confidence} for a in attrs], indent=1)
    return (
        f"Write a caption for a {MODALITY_NAMES[modality]} image of a {object_type}.\n"
        "Use only the attributes below. Skip attributes whose value is unknown, unclear or "
        "not carrying, or whose confidence is low.\n"
        "Write short declarative sentences: appearance first, environment (view, illumination, "
        "capture time, target clarity) last. Return the caption text only.\n"
        f"Attributes:\n{payload}\n"
    )


def compose_caption(
    attrs: Sequence[ConfidenceAttribute],
    modality: str,
    composer: str = "template",
    client: "MLLMClient | None" = None,
    object_type: str = "person",
    low_markers: Sequence[str] = LOW_MARKERS,
    threshold: float = 0.5,
) -> str:
    if composer == "template":
        return compose_template(attrs, low_markers, threshold)
    if composer != "llm":
        raise ValueError(f"unknown composer {composer!r}")
    if client is None:
        raise CaptionError("llm composer needs a client")
    text = client.generate(build_caption_prompt(attrs, modality, object_type), None).strip()
    if not text:
        raise CaptionError(f"empty caption from {client.backend_id}")
    return text


# --------------------------------------------------------------------------
# clients

class MLLMClient(Protocol):
    backend_id: str

    def generate(self, prompt: str, image: bytes | None) -> str: ...


def fixture_key(backend_id: str, prompt: str, image: bytes | None) -> str:
    h = hashlib.sha256()
    h.update(backend_id.encode())
    h.update(b"\0")
    h.update(prompt.encode())
    h.update(b"\0")
    h.update(hashlib.sha256(image or b"").digest())
    return h.hexdigest()


class FixtureStore:
    """Directory of recorded responses, one JSON file per (backend, prompt, image) hash."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, backend_id: str, key: str) -> Path:
        return self.root / backend_id / f"{key}.json"

    def get(self, backend_id: str, prompt: str, image: bytes | None) -> str | None:
        p = self.path(backend_id, fixture_key(backend_id, prompt, image))
        if not p.exists():
            return None
        return json.loads(p.read_text())["response"]

    def put(self, backend_id: str, prompt: str, image: bytes | None, response: str) -> None:
        key = fixture_key(backend_id, prompt, image)
        record = {"backend": backend_id, "prompt": prompt, "response": response}
        atomic_write_text(self.path(backend_id, key), json.dumps(record, indent=1) + "\n")


class ReplayClient:
    def __init__(self, backend_id: str, store: FixtureStore):
        self.backend_id = backend_id
        self.store = store

    def generate(self, prompt: str, image: bytes | None) -> str:
        response = self.store.get(self.backend_id, prompt, image)
        if response is None:
            raise FixtureMissing(f"no {self.backend_id} fixture for prompt hash {fixture_key(self.backend_id, prompt, image)[:12]}")
        return response


class RecordingClient:
    def __init__(self, inner: MLLMClient, store: FixtureStore):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.store = store

    def generate(self, prompt: str, image: bytes | None) -> str:
        response = self.inner.generate(prompt, image)
        self.store.put(self.backend_id, prompt, image, response)
        return response


class ChatCompletionClient:
    """Minimal client for OpenAI-compatible chat endpoints.

    Reads ``NEXT_MLLM_API_KEY`` and ``NEXT_MLLM_BASE_URL`` from the environment.
    """

    def __init__(self, model: str, base_url: str | None = None, api_key: str | None = None, timeout: float = 60.0):
        self.backend_id = model
        self.base_url = (base_url or os.environ.get("NEXT_MLLM_BASE_URL", "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key or os.environ.get("NEXT_MLLM_API_KEY")
        if not self.api_key:
            raise CaptionError("NEXT_MLLM_API_KEY is not set")
        self.timeout = timeout

    def generate(self, prompt: str, image: bytes | None) -> str:
        import base64

        content: list[dict] = [{"type": "text", "text": prompt}]
        if image is not None:
            url = "data:image/png;base64," + base64.b64encode(image).decode()
            content.append({"type": "image_url", "image_url": {"url": url}})
        body = json.dumps({"model": self.backend_id, "temperature": 0, "messages": [{"role": "user", "content": content}]})
        req = urllib.request.Request(
            f"{self.base_url}/chat/completions",
            data=body.encode(),
            headers={"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read())
        return payload["choices"][0]["message"]["content"]


# --------------------------------------------------------------------------
# pipeline

def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_json(sample_id: str, captions: Mapping[str, str], attributes: Mapping[str, Sequence[ConfidenceAttribute]] | None) -> str:
    obj: dict = {"sample_id": sample_id}
    for m in MODALITIES:
        obj[m] = captions[m]
    if attributes is not None:
        obj["attributes"] = {m: [a.to_json() for a in attributes[m]] for m in MODALITIES}
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


@dataclass
class PipelineConfig:
    object_type: str = "person"
    threshold: float = 0.5
    low_markers: tuple[str, ...] = LOW_MARKERS
    priority: tuple[str, ...] = ()
    composer: str = "template"
    concurrency: int = 4
    force: bool = False


@dataclass
class PipelineSummary:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


@dataclass
class SampleAttributes:
    """Everything the pipeline derives for one sample."""

    per_backend: dict[str, dict[str, list[ConfidenceAttribute]]]
    merged: dict[str, list[ConfidenceAttribute]]
    complemented: dict[str, list[ConfidenceAttribute]]
    captions: dict[str, str]


def caption_sample(
    images: Mapping[str, bytes],
    clients: Sequence[MLLMClient],
    config: PipelineConfig,
    composer_client: MLLMClient | None = None,
) -> SampleAttributes:
    schema = AttributeSchema.for_object(config.object_type)
    per_backend: dict[str, dict[str, list[ConfidenceAttribute]]] = {}
    merged = {}
    priority = config.priority or tuple(c.backend_id for c in clients)
    for m in MODALITIES:
        prompt = build_attribute_prompt(schema, m)
        per_backend[m] = {c.backend_id: parse_attribute_response(c.generate(prompt, images[m]), schema) for c in clients}
        merged[m] = merge_backends(per_backend[m], priority)
    complemented = complement_modalities(merged, config.low_markers, config.threshold)
    captions = {
        m: compose_caption(
            complemented[m], m, config.composer, composer_client, config.object_type, config.low_markers, config.threshold
        )
        for m in MODALITIES
    }
    return SampleAttributes(per_backend, merged, complemented, captions)


def _sidecar_complete(path: Path) -> bool:
    if not path.exists():
        return False
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    attrs = obj.get("attributes")
    return isinstance(attrs, dict) and all(m in attrs for m in MODALITIES)


def run_pipeline(
    root: str | os.PathLike,
    clients: Sequence[MLLMClient],
    config: PipelineConfig | None = None,
    composer_client: MLLMClient | None = None,
) -> PipelineSummary:
    """Caption every sample listed in ``root/meta.csv``; resumable and atomic per sample."""
    from .data import read_meta

    config = config or PipelineConfig()
    if not clients:
        raise CaptionError("at least one MLLM client is required")
    root = Path(root)
    rows = read_meta(root)
    summary = PipelineSummary()

    def work(sample_id: str) -> tuple[str, str, str | None]:
        target = root / "captions" / f"{sample_id}.json"
        if not config.force and _sidecar_complete(target):
            return sample_id, "skipped", None
        try:
            images = {m: (root / m / f"{sample_id}.png").read_bytes() for m in MODALITIES}
            result = caption_sample(images, clients, config, composer_client)
        except Exception as exc:  # per-sample failures are reported, not fatal
            logger.warning("sample %s failed: %s", sample_id, exc)
            return sample_id, "failed", f"{type(exc).__name__}: {exc}"
        atomic_write_text(target, sidecar_json(sample_id, result.captions, result.complemented))
        return sample_id, "written", None

    with ThreadPoolExecutor(max_workers=max(1, config.concurrency)) as pool:
        results = list(pool.map(work, [r["sample_id"] for r in rows]))
    for sample_id, status, err in results:
        if status == "written":
            summary.written.append(sample_id)
        elif status == "skipped":
            summary.skipped.append(sample_id)
        else:
            summary.failed[sample_id] = err
    logger.info(
        "captions: %d written, %d skipped, %d failed", len(summary.written), len(summary.skipped), len(summary.failed)
    )
    return summary


# --------------------------------------------------------------------------
# offline fixtures from a synthetic dataset's truth table

def synthesize_fixtures(
    root: str | os.PathLike,
    store: FixtureStore,
    backends: Sequence[str] = ("mllm-a", "mllm-b"),
    seed: int = 0,
    error_rate: float = 0.2,
) -> int:
    """Record plausible backend responses for every sample/modality/backend.

    True values get confidence in [0.55, 0.95]. Backends after the first
    sometimes answer a wrong value at confidence below 0.5, so the merged value
    is always the true one. The attribute the generator hid is answered
    "unknown" at low confidence by every backend. Returns the number of
    responses written.
    """
    from .data import read_meta

    root = Path(root)
    truth = json.loads((root / "truth.json").read_text())
    schema = AttributeSchema.for_object(truth["object_type"])
    alternatives: dict[str, list[str]] = {}
    for rec in truth["samples"].values():
        for m in MODALITIES:
            for name, value in rec["attributes"][m].items():
                alternatives.setdefault(name, [])
                if value not in alternatives[name]:
                    alternatives[name].append(value)
    written = 0
    for row in read_meta(root):
        sid = row["sample_id"]
        rec = truth["samples"][sid]
        hidden = tuple(rec["suppressed"])
        for mi, m in enumerate(MODALITIES):
            image = (root / m / f"{sid}.png").read_bytes()
            prompt = build_attribute_prompt(schema, m)
            for bi, backend in enumerate(backends):
                rng = np.random.default_rng([seed, zlib.crc32(sid.encode()), mi, bi])
                answer = {}
                for name in schema.attributes:
                    value = rec["attributes"][m][name]
                    if (m, name) == hidden:
                        answer[name] = {"value": "unknown", "confidence": round(float(rng.uniform(0.05, 0.35)), 3)}
                        continue
                    others = [v for v in alternatives[name] if v != value]
                    if bi > 0 and others and rng.random() < error_rate:
                        wrong = others[int(rng.integers(len(others)))]
                        answer[name] = {"value": wrong, "confidence": round(float(rng.uniform(0.2, 0.5)), 3)}
                    else:
                        answer[name] = {"value": value, "confidence": round(float(rng.uniform(0.55, 0.95)), 3)}
                store.put(backend, prompt, image, json.dumps(answer, indent=1))
                written += 1
    return written


def recompose_sidecars(root: str | os.PathLike, config: PipelineConfig | None = None) -> PipelineSummary:
    """Rewrite captions from the attributes already stored in each sidecar; no client involved."""
    from .data import read_meta

    config = config or PipelineConfig()
    root = Path(root)
    summary = PipelineSummary()
    for row in read_meta(root):
        sid = row["sample_id"]
        path = root / "captions" / f"{sid}.json"
        try:
            obj = json.loads(path.read_text())
            if "attributes" not in obj:
                raise CaptionError("sidecar has no attributes to compose from")
            attrs = {m: [ConfidenceAttribute.from_json(a) for a in obj["attributes"][m]] for m in MODALITIES}
            captions = {m: compose_template(attrs[m], config.low_markers, config.threshold) for m in MODALITIES}
        except (OSError, ValueError, KeyError, CaptionError) as exc:
            summary.failed[sid] = f"{type(exc).__name__}: {exc}"
            continue
        atomic_write_text(path, sidecar_json(sid, captions, attrs))
        summary.written.append(sid)
    return summary
