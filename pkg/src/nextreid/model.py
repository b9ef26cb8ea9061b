"""The assembled network: encoders -> semantic / structure experts -> aggregation -> classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .csse import StructureExperts
from .encoders import MODALITIES, EncoderConfig, TextEncoder, VisualEncoder, VisualFeatures
from .mmfa import AggregationHead, build_query, final_embedding
from .tmse import ROUTE_TYPES, SAMPLING_STRATEGIES, RouteState, SemanticExperts, SentenceSampler, sample_key

OPTIMIZER_PROFILES = {
    # rate sized for a pretrained backbone
    "pretrained": {"lr": 3.5e-6, "weight_decay": 1e-4, "momentum": 0.9},
    "desk": {"lr": 3e-4, "weight_decay": 1e-4, "momentum": 0.9},
}


@dataclass
class NextConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_semantic: int = 3
    num_structure: int = 3
    use_mmfa: bool = True
    use_tmse: bool = True
    use_csse: bool = True
    expansion: int = 2
    dropout_rate: float = 0.1
    k_max: int = 3
    text_modulation: bool = True
    modulate_at_eval: bool = False
    semantic_route: str = "modality_specific"
    structure_route: str = "modality_shared"
    sampling: str = "dynamic"
    top_ratio: float = 0.5
    fixed_sigma: float = 0.0
    attn_heads: int = 4
    ffn_mult: int = 2
    query_pool: str = "flatten"
    margin: float = 0.3
    label_smoothing: float = 0.1
    lr: float = 3e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    cosine_decay: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, Mapping):
            self.encoder = EncoderConfig(**self.encoder)
        self.validate()

    def validate(self) -> None:
        if self.num_semantic < 0 or self.num_structure < 0:
            raise ValueError("expert counts must be >= 0")
        if self.use_tmse and self.num_semantic == 0:
            raise ValueError("TMSE enabled with zero semantic experts")
        if self.use_csse and self.num_structure == 0:
            raise ValueError("CSSE enabled with zero structure experts")
        if not self.use_mmfa and (self.use_tmse or self.use_csse):
            raise ValueError("expert banks feed the aggregation module; enable MMFA to use TMSE/CSSE")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.semantic_route not in ROUTE_TYPES or self.structure_route not in ROUTE_TYPES:
            raise ValueError("route types must be one of " + ", ".join(ROUTE_TYPES))
        if self.sampling not in SAMPLING_STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.sampling!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @property
    def num_entries(self) -> int:
        """Expert feature sets fed to aggregation (backbone tokens when no bank is on)."""
        n = (self.num_semantic if self.use_tmse else 0) + (1 if self.use_csse else 0)
        return max(n, 1)

    @property
    def embedding_dim(self) -> int:
        if not self.use_mmfa:
            return len(MODALITIES) * self.dim
        per = self.dim if self.query_pool == "mean" else len(MODALITIES) * self.dim
        return self.num_entries * per

    def with_profile(self, name: str) -> "NextConfig":
        return NextConfig(**{**self.to_dict(), **OPTIMIZER_PROFILES[name]})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["image_size"] = list(d["encoder"]["image_size"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NextConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class NextOutput:
    embedding: torch.Tensor
    logits: torch.Tensor
    features: VisualFeatures
    route_states: list[list[RouteState]] = field(default_factory=list)
    omega: torch.Tensor | None = None
    structure_outputs: torch.Tensor | None = None
    attention: list[torch.Tensor] = field(default_factory=list)


class NextNet(nn.Module):
    def __init__(self, cfg: NextConfig, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least 2 identity classes")
        self.cfg = cfg
        self.num_classes = num_classes
        torch.manual_seed(cfg.seed)
        self.visual = VisualEncoder(cfg.encoder)
        self.text = TextEncoder(cfg.encoder)
        self.sampler = SentenceSampler(cfg.seed, cfg.k_max)
        d = cfg.dim
        self.semantic = None
        if cfg.use_tmse:
            self.semantic = SemanticExperts(
                d, cfg.num_semantic, cfg.expansion, cfg.dropout_rate, cfg.semantic_route,
                cfg.sampling, cfg.top_ratio, cfg.fixed_sigma,
            )
        self.structure = None
        if cfg.use_csse:
            self.structure = StructureExperts(d, cfg.num_structure, cfg.expansion, cfg.dropout_rate, cfg.structure_route)
        self.heads = nn.ModuleList()
        if cfg.use_mmfa:
            self.heads.extend(AggregationHead(d, cfg.attn_heads, cfg.ffn_mult, cfg.query_pool) for _ in range(cfg.num_entries))
        self.classifier = nn.Linear(cfg.embedding_dim, num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    @property
    def modulated(self) -> bool:
        return self.cfg.text_modulation and (self.training or self.cfg.modulate_at_eval)

    def text_features(self, captions: Sequence[Mapping], sample_ids: Sequence[str], step: int) -> list[torch.Tensor]:
        """Per semantic expert, (B, M, D) class vectors of its sampled sentences."""
        out = []
        for i in range(self.cfg.num_semantic):
            strings = []
            for caps, sid in zip(captions, sample_ids):
                strings += self.sampler.sample_sentences(caps, i, step, sample_key(sid), training=self.training)
            vecs = self.text.encode_cls(strings)
            out.append(vecs.reshape(len(captions), len(MODALITIES), -1))
        return out

    def forward(
        self,
        images: torch.Tensor,
        captions: Sequence[Mapping] | None = None,
        sample_ids: Sequence[str] | None = None,
        step: int = 0,
    ) -> NextOutput:
        feats = self.visual(images)
        if not self.cfg.use_mmfa:
            emb = feats.cls.flatten(1)
            return NextOutput(emb, self.classifier(emb), feats)
        entries, states = [], []
        if self.semantic is not None:
            texts = None
            if self.modulated:
                if captions is None:
                    raise ValueError("text modulation needs captions")
                if sample_ids is None:
                    sample_ids = [str(i) for i in range(len(captions))]
                if len(captions) != len(images) or len(sample_ids) != len(images):
                    raise ValueError("captions/sample_ids do not match the image batch")
                texts = self.text_features(captions, sample_ids, step)
            sem, states = self.semantic(feats, texts)
            entries += sem
        tokens = feats.tok.flatten(1, 2)
        omega = outs = None
        if self.structure is not None:
            mixed, outs, omega = self.structure(tokens)
            entries.append(mixed)
        if not entries:
            entries = [tokens]
        emb, attn = final_embedding(self.heads, build_query(feats.cls), entries)
        return NextOutput(emb, self.classifier(emb), feats, states, omega, outs, attn)


# --------------------------------------------------------------------------
# losses

def id_loss(logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.1) -> torch.Tensor:
    c = logits.shape[1]
    if c < 2:
        raise ValueError("classification needs at least 2 classes")
    if labels.numel() and (int(labels.max()) >= c or int(labels.min()) < 0):
        raise ValueError(f"label outside [0, {c})")
    return F.cross_entropy(logits, labels, label_smoothing=smoothing)


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    d2 = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1)
    # clamp keeps the sqrt differentiable on the diagonal
    return d2.clamp_min(1e-12).sqrt()


def triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on Euclidean distances."""
    if labels.unique().numel() < 2:
        raise ValueError("triplet loss needs at least 2 identities in the batch")
    dist = pairwise_distances(embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    d_ap = dist.masked_fill(~same, float("-inf")).max(dim=1).values
    d_an = dist.masked_fill(same, float("inf")).min(dim=1).values
    return F.relu(d_ap - d_an + margin).mean()


@dataclass
class LossReport:
    id_loss: float
    triplet_loss: float
    total: float
    accuracy: float

    @classmethod
    def from_parts(cls, id_part: float, tri_part: float, accuracy: float) -> "LossReport":
        return cls(id_part, tri_part, id_part + tri_part, accuracy)


def final_loss(out: NextOutput, labels: torch.Tensor, cfg: NextConfig):
    l_id = id_loss(out.logits, labels, cfg.label_smoothing)
    l_tri = triplet_loss(out.embedding, labels, cfg.margin)
    return l_id + l_tri, l_id, l_tri
