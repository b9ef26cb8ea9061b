"""Run the module, route and caption-quality studies on synthetic data and collect the reports."""

import argparse
import logging
from pathlib import Path

import torch

from nextreid.ablation import STUDY_AXES, StudySpec, report_markdown, run_study
from nextreid.data import AugmentationConfig
from nextreid.model import NextConfig
from nextreid.training import TrainConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("ablations"))
    parser.add_argument("--axes", nargs="+", choices=STUDY_AXES, default=["modules", "route_type", "caption_quality"])
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--ids", type=int, default=8)
    parser.add_argument("--per-id", type=int, default=4)
    parser.add_argument("--test-ids", type=int, default=4)
    parser.add_argument("--augment", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    train = TrainConfig(steps=args.steps, augmentation=AugmentationConfig() if args.augment else None)
    sections = []
    for axis in args.axes:
        spec = StudySpec(
            axis, base=NextConfig(), train=train, seeds=tuple(args.seeds),
            num_ids=args.ids, samples_per_id=args.per_id, num_test_ids=args.test_ids,
        )
        report = run_study(spec, out_dir=args.out / axis)
        sections.append(report_markdown(report))
        print(sections[-1])
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.md").write_text("\n".join(sections))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
