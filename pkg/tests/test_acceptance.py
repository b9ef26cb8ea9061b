"""Acceptance suite: one PASS/FAIL line per criterion."""

import contextlib
import itertools
import math
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from nextreid.ablation import MODULE_ROWS, ROUTE_ROWS, StudySpec, run_study
from nextreid.captions import (
    MODALITIES,
    FixtureStore,
    PipelineConfig,
    ReplayClient,
    caption_sample,
    complement_modalities,
    run_pipeline,
    sidecar_json,
    synthesize_fixtures,
)
from nextreid.data import generate_synthetic, save_dataset
from nextreid.encoders import EncoderConfig
from nextreid.evaluation import PROTOCOLS, RetrievalSet, distance_matrix, evaluate
from nextreid.model import NextConfig, NextNet, final_loss
from nextreid.tmse import MaskTape, mask_tape
from nextreid.training import TrainConfig, collate, embed, fit, make_optimizer, train_step

from oracles import brute_force_metrics

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def verdict(capsys):
    @contextlib.contextmanager
    def check(number, title):
        start = time.perf_counter()
        notes = []
        try:
            yield notes
        except BaseException as exc:
            with capsys.disabled():
                print(f"\nFAIL criterion {number}: {title} ({time.perf_counter() - start:.1f}s) {type(exc).__name__}: {exc}")
            raise
        with capsys.disabled():
            extra = f" {'; '.join(notes)}" if notes else ""
            print(f"\nPASS criterion {number}: {title} ({time.perf_counter() - start:.1f}s){extra}")

    return check


# ---------------------------------------------------------------- 1

EQUATION_TESTS = {
    "residual expert, zero MLP is identity": ["test_tmse.py::test_zero_mlp_is_identity"],
    "sampling route maps": ["test_tmse.py::test_route_grid_shape_and_hidden_width", "test_tmse.py::test_route_is_tokenwise"],
    "threshold mask exactness": ["test_tmse.py::test_mask_exactness", "test_tmse.py::test_binarize_example"],
    "sentence subset sampling": ["test_tmse.py::test_subset_properties", "test_tmse.py::test_single_sentence_always_chosen"],
    "cosine relevance bounds": ["test_tmse.py::test_relevance_bounded", "test_tmse.py::test_relevance_cosines"],
    "modulation residual under zero fusion": ["test_tmse.py::test_zero_fusion_is_identity"],
    "zero-row masking": ["test_tmse.py::test_zero_mask_zero_rows"],
    "routing softmax convexity": ["test_csse.py::test_omega_convex", "test_csse.py::test_zero_route_is_uniform"],
    "convex mixture linearity": ["test_csse.py::test_linearity_in_expert_outputs"],
    "class-token query and concatenation": ["test_mmfa.py::test_query_rows", "test_mmfa.py::test_full_embedding_length"],
    "single-key cross attention": ["test_mmfa.py::test_single_key_attention_returns_value"],
    "loss additivity": ["test_model.py::test_loss_report_exact"],
}


def test_criterion_1_equation_suite(verdict):
    with verdict(1, "equation suite") as notes:
        ids = [f"tests/{t}" for ts in EQUATION_TESTS.values() for t in ts]
        start = time.perf_counter()
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
            cwd=ROOT, capture_output=True, text=True,
        )
        elapsed = time.perf_counter() - start
        assert proc.returncode == 0, proc.stdout[-2000:]
        assert f"{len(ids)} passed" in proc.stdout, proc.stdout[-500:]
        assert elapsed < 30, f"took {elapsed:.1f}s"
        notes.append(f"{len(EQUATION_TESTS)} relations, {len(ids)} tests")


# ---------------------------------------------------------------- 2

PROBES = (
    "semantic.routes.0.0.tok_fc.0.weight",  # upstream of the straight-through mask
    "semantic.modnets.0.0.fuse.weight",
    "semantic.experts.0.fc1.weight",
    "structure.routes.0.fc.weight",
    "heads.0.attn.q.weight",
    "visual.trunks.0.patch.weight",
    "classifier.weight",
)


def test_criterion_2_gradient_check(verdict):
    with verdict(2, "gradient check") as notes:
        start = time.perf_counter()
        idx = generate_synthetic(2, 2, (32, 16), seed=3)
        samples = [idx.samples[0], idx.samples[2]]
        cfg = NextConfig(
            encoder=EncoderConfig(dim=16, heads=2, depth=1), num_semantic=2, num_structure=2, dropout_rate=0.0
        )
        model = NextNet(cfg, 2).double().train()
        batch = collate(samples, {0: 0, 1: 1}, torch.float64)
        assert batch.labels.tolist() == [0, 1]

        def loss():
            out = model(batch.images, batch.captions, batch.sample_ids, 0)
            return final_loss(out, batch.labels, cfg)[0]

        tape = MaskTape()
        with mask_tape(tape):
            total = loss()
        model.zero_grad()
        total.backward()
        assert tape.entries, "no straight-through masks recorded"
        params = dict(model.named_parameters())
        tape.replay()
        h, worst = 1e-6, 0.0
        for name in PROBES:
            p = params[name]
            grad = p.grad.reshape(-1)
            i = int(grad.abs().argmax())
            flat = p.data.view(-1)
            x0 = flat[i].item()
            vals = []
            for s in (1, -1):
                flat[i] = x0 + s * h
                tape.rewind()
                with torch.no_grad(), mask_tape(tape):
                    vals.append(loss().item())
            flat[i] = x0
            fd = (vals[0] - vals[1]) / (2 * h)
            a = grad[i].item()
            assert abs(a) > 1e-6, f"{name}: vanishing probe gradient"
            rel = abs(a - fd) / max(abs(a), abs(fd))
            assert rel < 1e-4, f"{name}: analytic {a} vs numeric {fd} (rel {rel:.2e})"
            worst = max(worst, rel)
        assert time.perf_counter() - start < 60
        notes.append(f"{len(PROBES)} probes, max rel err {worst:.1e}")


# ---------------------------------------------------------------- 3

def _check_oracle(rs, protocol):
    want = brute_force_metrics(
        distance_matrix(rs.query, rs.gallery).tolist(), rs.query_ids, rs.query_cams, rs.query_times, rs.query_keys,
        rs.gallery_ids, rs.gallery_cams, rs.gallery_times, rs.gallery_keys, protocol,
    )
    if want is None:
        with pytest.raises(ValueError):
            evaluate(rs, protocol)
        return False
    got = evaluate(rs, protocol)
    assert {k: got[k] for k in want} == want, (protocol, rs)
    return True


def test_criterion_3_metric_oracle(verdict):
    with verdict(3, "metric oracle") as notes:
        start = time.perf_counter()
        counts = dict.fromkeys(PROTOCOLS, 0)
        # exhaustive: one query, every relevance pattern over up to 8 distinct-distance gallery items
        for g in range(1, 9):
            for pattern in itertools.product((0, 1), repeat=g):
                gid = np.where(np.array(pattern) == 1, 0, 1)
                for protocol in PROTOCOLS:
                    rs = RetrievalSet(
                        [[0.0]], [0], [0], np.arange(1, g + 1, dtype=float)[:, None], gid, [1] * g,
                        [0], [1] * g, ["q"], [f"g{j}" for j in range(g)],
                    )
                    counts[protocol] += _check_oracle(rs, protocol)
        # random: q <= 5, g <= 8, ties, shared keys, camera and time collisions
        rng = np.random.default_rng(2024)
        for _ in range(1500):
            nq, ng = int(rng.integers(1, 6)), int(rng.integers(1, 9))
            q, g = rng.integers(0, 4, (nq, 2)).astype(float), rng.integers(0, 4, (ng, 2)).astype(float)
            qid, gid = rng.integers(0, 3, nq), rng.integers(0, 3, ng)
            qc, gc = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
            qt, gt = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
            qk, gk = [f"k{i}" for i in rng.integers(0, 8, nq)], [f"k{i}" for i in rng.integers(0, 8, ng)]
            rs = RetrievalSet(q, qid, qc, g, gid, gc, qt, gt, qk, gk)
            for protocol in PROTOCOLS:
                counts[protocol] += _check_oracle(rs, protocol)
        assert min(counts.values()) >= 1000, counts
        assert time.perf_counter() - start < 60
        notes.append("matched sets per protocol " + ", ".join(f"{k}={v}" for k, v in counts.items()))


# ---------------------------------------------------------------- 4

def test_criterion_4_strict_protocol(verdict):
    with verdict(4, "strict protocol") as notes:
        # q0 (id 0, time 0) has a same-time twin g0 as nearest neighbour;
        # q1 (id 1, time 0) has a same-time twin g3.
        q = [[0.0], [10.0]]
        g = [[0.1], [0.5], [1.0], [10.1], [10.2]]
        rs = RetrievalSet(
            q, [0, 1], [0, 0], g, [0, 1, 0, 1, 1], [1, 1, 1, 1, 1],
            [0, 0], [0, 3, 1, 0, 2], ["q0", "q1"], [f"g{i}" for i in range(5)],
        )
        loose = evaluate(rs, "none")
        strict = evaluate(rs, "msvr310_strict")
        assert loose["R1"] == 1.0
        # strict: q0 ranks g1 (wrong) then g2 -> first hit 2, AP 1/2; q1 ranks g4 first -> AP (1 + 2/3)/2
        assert strict["R1"] == 0.5
        assert math.isclose(strict["mAP"], (0.5 + 5 / 6) / 2, abs_tol=1e-12)
        # none: q0 AP (1 + 2/3)/2, q1 keeps g3 and ranks g3, g4, g2, g1 -> AP (1 + 1 + 3/4)/3
        assert math.isclose(loose["mAP"], (5 / 6 + 11 / 12) / 2, abs_tol=1e-12)
        notes.append(f"none R1={loose['R1']}, strict R1={strict['R1']}, strict mAP={strict['mAP']:.4f}")


# ---------------------------------------------------------------- 5

def test_criterion_5_overfit_smoke(verdict, fixture8):
    with verdict(5, "overfit smoke") as notes:
        start = time.perf_counter()
        cfg = NextConfig()
        assert (cfg.num_semantic, cfg.num_structure, cfg.dim) == (3, 3, 64)
        tcfg = TrainConfig(steps=300, augmentation=None)
        model = NextNet(cfg, fixture8.num_classes)
        history = fit(model, fixture8, tcfg)
        train = fixture8.by_split("train")
        emb = embed(model, train)
        metrics = evaluate(RetrievalSet.from_samples(emb, train, emb, train), "none")
        model.eval()
        with torch.no_grad():
            b = collate(train, fixture8.label_map())
            acc = float((model(b.images).logits.argmax(1) == b.labels).float().mean())
        assert history[-1].triplet_loss < 0.05, history[-1]
        assert metrics["R1"] == 1.0, metrics["R1"]
        assert acc > 0.95, acc
        prefix = fit(NextNet(cfg, fixture8.num_classes), fixture8, replace(tcfg, steps=30))
        assert prefix == history[:30]
        elapsed = time.perf_counter() - start
        assert elapsed < 300
        notes.append(f"final triplet {history[-1].triplet_loss:.4f}, train R1 {metrics['R1']}, eval acc {acc:.3f}")


# ---------------------------------------------------------------- 6

def test_criterion_6_caption_pipeline(verdict, tmp_path):
    with verdict(6, "caption pipeline") as notes:
        index = generate_synthetic(6, 3, (32, 16), seed=21)
        root = tmp_path / "data"
        save_dataset(index, root)
        store = FixtureStore(tmp_path / "fixtures")
        synthesize_fixtures(root, store, seed=4)
        clients = [ReplayClient(b, store) for b in ("mllm-a", "mllm-b")]
        config = PipelineConfig()
        merged_checks = restored = 0
        for s in index.samples:
            sid = s.sample_id
            images = {m: (root / m / f"{sid}.png").read_bytes() for m in MODALITIES}
            result = caption_sample(images, clients, config)
            for m in MODALITIES:
                per = result.per_backend[m]
                for j, attr in enumerate(result.merged[m]):
                    cands = [(b, per[b][j]) for b in ("mllm-a", "mllm-b")]
                    top = max(a.confidence for _, a in cands)
                    first = next(a for _, a in cands if a.confidence == top)
                    assert (attr.value, attr.confidence) == (first.value, first.confidence)
                    merged_checks += 1
            truth = index.truth["samples"][sid]
            m, name = truth["suppressed"]
            attr = {a.name: a for a in result.complemented[m]}[name]
            assert attr.value == truth["attributes"][m][name], (sid, attr)
            src = attr.provenance.removeprefix("borrowed-from:")
            assert attr.provenance.startswith("borrowed-from:") and src != m
            assert {a.name: a for a in result.merged[src]}[name].value == attr.value
            restored += 1
            assert complement_modalities(result.complemented) == result.complemented
            expected = sidecar_json(sid, result.captions, result.complemented)
            assert run_pipeline(root, clients, replace(config, force=True)).ok
            assert (root / "captions" / f"{sid}.json").read_text() == expected
        first = {p.name: p.read_bytes() for p in (root / "captions").glob("*.json")}
        run_pipeline(root, clients, replace(config, force=True, concurrency=1))
        assert {p.name: p.read_bytes() for p in (root / "captions").glob("*.json")} == first
        assert restored == len(index.samples)
        notes.append(f"{merged_checks} merge checks, {restored}/{len(index.samples)} suppressed attributes restored")


# ---------------------------------------------------------------- 7

def test_criterion_7_ablation_harness(verdict, tmp_path):
    with verdict(7, "ablation harness") as notes:
        base = NextConfig(encoder=EncoderConfig(dim=32, heads=4, depth=1), num_semantic=2, num_structure=2)
        index = generate_synthetic(4, 2, (32, 16), seed=5, num_test_ids=2)
        train = TrainConfig(steps=2, P=2, K=2, augmentation=None)

        def study(axis, grid=None, out=None):
            return run_study(StudySpec(axis, grid=grid, base=base, train=train), index, out)

        modules = study("modules", out=tmp_path / "m1")
        assert [r["name"] for r in modules["rows"]] == ["A", "B", "C", "D"]
        for r in modules["rows"]:
            assert tuple(r["setting"].values()) == MODULE_ROWS[r["name"]]
            assert r["failed"] == 0
        routes = study("route_type")
        assert {tuple(r["setting"].values()) for r in routes["rows"]} == set(ROUTE_ROWS.values())
        assert all(r["failed"] == 0 for r in routes["rows"])
        quality = study("caption_quality")
        assert [r["setting"]["caption_quality"] for r in quality["rows"]] == [35, 70, 100]
        assert all(r["failed"] == 0 for r in quality["rows"])
        again = study("modules", out=tmp_path / "m2")
        assert again == modules
        for f in ("report.json", "report.csv", "report.md"):
            assert (tmp_path / "m1" / f).read_bytes() == (tmp_path / "m2" / f).read_bytes()
        notes.append("modules 4 rows, routes 4 rows, quality 3 rows, reports reproducible")


# ---------------------------------------------------------------- 8

def test_criterion_8_freeze_contract(verdict, tiny_index):
    with verdict(8, "text encoder freeze") as notes:
        cfg = NextConfig(encoder=EncoderConfig(dim=32, heads=4, depth=1), num_semantic=2, num_structure=2)
        model = NextNet(cfg, tiny_index.num_classes)
        before = {k: v.clone() for k, v in model.text.state_dict().items()}
        visual = model.visual.state_dict()["trunks.0.patch.weight"].clone()
        opt = make_optimizer(model, cfg)
        text_ids = {id(p) for p in model.text.parameters()}
        assert not any(id(p) in text_ids for g in opt.param_groups for p in g["params"])
        fit(model, tiny_index, TrainConfig(steps=5, P=2, K=2))
        batch = collate(tiny_index.by_split("train"), tiny_index.label_map())
        for step in range(3):
            train_step(model, batch, opt, step)
        after = model.text.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)
        assert not model.text.training
        assert not torch.equal(visual, model.visual.state_dict()["trunks.0.patch.weight"])
        notes.append(f"{len(before)} text tensors unchanged after 8 steps")
