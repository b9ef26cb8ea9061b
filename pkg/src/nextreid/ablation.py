"""Ablation harness: module toggles, routing, sampling, caption quality, expert counts.

Every configuration of a study shares the training budget, the PK batch seeds
and the evaluation protocol; only the study axis changes. Reports hold one row
per configuration (mean over seeds) plus the raw per-seed numbers.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .captions import atomic_write_text
from .data import CaptionRecord, DatasetIndex, generate_synthetic
from .encoders import MODALITIES
from .evaluation import RetrievalSet, evaluate
from .model import NextConfig, NextNet
from .tmse import SAMPLING_STRATEGIES, sample_key
from .training import TrainConfig, embed, fit

logger = logging.getLogger(__name__)

STUDY_AXES = ("modules", "route_type", "sampling_strategy", "caption_quality", "expert_count")
METRICS = ("mAP", "R1", "R5", "R10")

# row -> (use_mmfa, use_tmse, use_csse)
MODULE_ROWS = {
    "A": (False, False, False),
    "B": (True, False, False),
    "C": (True, True, False),
    "D": (True, True, True),
}
# row -> (semantic_route, structure_route)
ROUTE_ROWS = {
    "A": ("modality_specific", "modality_specific"),
    "B": ("modality_shared", "modality_specific"),
    "C": ("modality_shared", "modality_shared"),
    "D": ("modality_specific", "modality_shared"),
}
DEFAULT_GRIDS = {
    "modules": tuple(MODULE_ROWS),
    "route_type": tuple(ROUTE_ROWS),
    "sampling_strategy": ("all_token", "top_k", "fixed_sigma", "dynamic"),
    "caption_quality": (35, 70, 100),
    "expert_count": (1, 2, 3, 4, 5, 6),
}


def degrade_captions(index: DatasetIndex, quality: float, seed: int = 0) -> DatasetIndex:
    """Keep ``max(1, ceil(quality% * n))`` randomly chosen sentences of every caption, in order."""
    if not 0 < quality <= 100:
        raise ValueError(f"quality {quality} outside (0, 100]")
    if quality == 100:
        return index
    samples = []
    for s in index.samples:
        caps = {}
        for mi, m in enumerate(MODALITIES):
            sents = s.captions[m].sentences
            n = len(sents)
            k = max(1, math.ceil(quality * n / 100))
            rng = np.random.default_rng([seed, sample_key(s.sample_id), mi])
            keep = sorted(rng.choice(n, k, replace=False))
            caps[m] = CaptionRecord.from_sentences([sents[i] for i in keep])
        samples.append(replace(s, captions=caps))
    return index.with_samples(samples)


def sampling_strategy_variants(cfg: NextConfig) -> dict[str, NextConfig]:
    if not cfg.use_tmse:
        raise ValueError("sampling strategies need TMSE enabled")
    return {name: replace(cfg, sampling=name) for name in SAMPLING_STRATEGIES}


@dataclass
class StudySpec:
    axis: str
    grid: tuple | None = None
    base: NextConfig = field(default_factory=NextConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0,)
    protocol: str = "standard_camera"
    # synthetic data used when no index is passed to run_study
    num_ids: int = 8
    samples_per_id: int = 4
    num_test_ids: int = 4
    data_seed: int = 0
    caption_seed: int = 0

    def __post_init__(self):
        if self.axis not in STUDY_AXES:
            raise ValueError(f"unknown study axis {self.axis!r}; choose from {STUDY_AXES}")
        if isinstance(self.base, Mapping):
            self.base = NextConfig.from_dict(self.base)
        if isinstance(self.train, Mapping):
            self.train = TrainConfig(**self.train)
        self.grid = tuple(self.grid) if self.grid is not None else DEFAULT_GRIDS[self.axis]
        self.seeds = tuple(self.seeds)
        if not self.grid:
            raise ValueError("empty study grid")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def configurations(self) -> list[tuple[str, NextConfig, dict]]:
        """(row name, model config, axis setting) per grid entry."""
        rows = []
        for value in self.grid:
            if self.axis == "modules":
                mmfa, tmse, csse = MODULE_ROWS[value]
                cfg = replace(self.base, use_mmfa=mmfa, use_tmse=tmse, use_csse=csse)
                setting = {"MMFA": mmfa, "TMSE": tmse, "CSSE": csse}
            elif self.axis == "route_type":
                sem, struct = ROUTE_ROWS[value]
                cfg = replace(self.base, semantic_route=sem, structure_route=struct)
                setting = {"semantic_route": sem, "structure_route": struct}
            elif self.axis == "sampling_strategy":
                cfg = sampling_strategy_variants(self.base)[value]
                setting = {"sampling": value}
            elif self.axis == "caption_quality":
                cfg = self.base
                setting = {"caption_quality": value}
            else:
                cfg = replace(self.base, num_semantic=int(value))
                setting = {"num_semantic": int(value)}
            rows.append((str(value), cfg, setting))
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        d["grid"] = list(self.grid)
        d["seeds"] = list(self.seeds)
        return d


def _default_index(spec: StudySpec) -> DatasetIndex:
    return generate_synthetic(
        spec.num_ids, spec.samples_per_id, spec.base.encoder.image_size, spec.data_seed,
        num_test_ids=spec.num_test_ids,
    )


def _run_one(cfg: NextConfig, index: DatasetIndex, tcfg: TrainConfig, protocol: str, log_path) -> dict:
    model = NextNet(cfg, index.num_classes)
    history = fit(model, index, tcfg, log_path)
    query, gallery = index.by_split("query"), index.by_split("gallery")
    rs = RetrievalSet.from_samples(embed(model, query), query, embed(model, gallery), gallery)
    metrics = evaluate(rs, protocol)
    return {
        **{k: metrics[k] for k in METRICS},
        "num_queries": metrics["num_queries"],
        "final_loss": history[-1].total if history else None,
    }


def run_study(spec: StudySpec, index: DatasetIndex | None = None, out_dir: str | Path | None = None) -> dict:
    """Train and evaluate each configuration; crashes are recorded and the study continues."""
    index = index if index is not None else _default_index(spec)
    if not index.by_split("query"):
        raise ValueError("study needs query/gallery splits for evaluation")
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, cfg, setting in spec.configurations():
        data = index
        if spec.axis == "caption_quality":
            data = degrade_captions(index, setting["caption_quality"], spec.caption_seed)
        runs = []
        for seed in spec.seeds:
            log_path = None
            if out is not None:
                run_dir = out / "runs" / name / f"seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                log_path = run_dir / "train.jsonl"
            try:
                result = _run_one(replace(cfg, seed=seed), data, replace(spec.train, seed=seed), spec.protocol, log_path)
                runs.append({"seed": seed, **result})
            except Exception as exc:  # a failed configuration must not sink the study
                logger.warning("study row %s seed %d failed: %s", name, seed, exc)
                runs.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
        ok = [r for r in runs if "error" not in r]
        row = {"name": name, "setting": setting, "runs": runs, "failed": len(runs) - len(ok)}
        for k in METRICS:
            row[k] = float(np.mean([r[k] for r in ok])) if ok else None
        rows.append(row)
    report = {
        "axis": spec.axis,
        "protocol": spec.protocol,
        "steps": spec.train.steps,
        "seeds": list(spec.seeds),
        "rows": rows,
    }
    if out is not None:
        write_study_report(report, out)
    return report


def report_table(report: Mapping) -> list[dict]:
    """Flat rows: name, axis settings, mean metrics, failures."""
    table = []
    for row in report["rows"]:
        entry = {"name": row["name"], **row["setting"]}
        entry.update({k: row[k] for k in METRICS})
        entry["failed"] = row["failed"]
        table.append(entry)
    return table


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{100 * v:.1f}"
    return str(v)


def report_markdown(report: Mapping) -> str:
    table = report_table(report)
    cols = list(table[0])
    lines = [
        f"# {report['axis']} study ({report['protocol']}, {report['steps']} steps, seeds {report['seeds']})",
        "",
        "| " + " | ".join(cols) + " |",
        "|" + "---|" * len(cols),
    ]
    lines += ["| " + " | ".join(_fmt(r[c]) for c in cols) + " |" for r in table]
    return "\n".join(lines) + "\n"


def write_study_report(report: Mapping, out_dir: str | Path) -> None:
    out = Path(out_dir)
    atomic_write_text(out / "report.json", json.dumps(report, indent=1) + "\n")
    table = report_table(report)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(table[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(table)
    atomic_write_text(out / "report.csv", buf.getvalue())
    atomic_write_text(out / "report.md", report_markdown(report))


def expert_count_grid(low: int = 1, high: int = 6) -> Sequence[int]:
    if not 1 <= low <= high:
        raise ValueError("need 1 <= low <= high")
    return tuple(range(low, high + 1))
