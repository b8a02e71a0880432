"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 share one experiment manifest and one set of runs. The
complete model trained on the full training split serves both the
forecasting-skill check and the ratio-1.0 point of the few-shot ladder;
with a ratio of 1.0 the harness trains on exactly the same data, so a
second identical run would add nothing but time.
"""

import functools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import cases
import mae_files
from acceptance_log import record
from vimts import harness
from vimts.backbone import BackboneConfig
from vimts.graph import ChannelGraph, compensate
from vimts.metrics import channel_means, locf_baseline, mean_baseline, mse
from vimts.model import VIMTS, ModelConfig, predict_batch
from vimts.patchify import TTCN
from vimts.synthetic import GeneratorConfig, generate_synthetic
from vimts.data import ImtsSample, apply_normalizer, build_forecast_tasks, fit_normalizer
from vimts.batching import PackedTasks, SectionGrid
from vimts.checkpoint import load_pretrained_checkpoint
from vimts.training import TrainPlan, finetune_loss, train_stage

pytestmark = pytest.mark.acceptance

ORACLE_TOL = 1e-5
N_CASES = 100


# -- 1 -------------------------------------------------------------------------


def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    worst = {
        "time_embedding": cases.time_embed_cases(N_CASES, seed=101),
        "ttcn": cases.ttcn_cases(N_CASES, seed=102),
        "patch_grid": cases.patch_grid_cases(N_CASES, seed=103),
        **cases.graph_cases(N_CASES, seed=104),
        **cases.attention_cases(N_CASES, seed=105),
        "mae_backbone": cases.backbone_cases(N_CASES, seed=106),
        "query_head": cases.head_cases(N_CASES, seed=107),
        "finetune_loss": cases.finetune_loss_cases(N_CASES, seed=108),
        "ssl_loss": cases.ssl_loss_cases(N_CASES, seed=109),
    }
    secs = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= ORACLE_TOL}
    ok = not bad and secs < 120
    detail = (f"{N_CASES} cases x {len(worst)} components, worst {max(worst.values()):.2e} "
              f"({max(worst, key=worst.get)}), tol {ORACLE_TOL:g}, {secs:.0f}s")
    if bad:
        detail += f"; over tolerance: {bad}"
    assert record(1, "oracle equivalence", ok, detail)


# -- 2 -------------------------------------------------------------------------


def _row_stochastic(rng):
    worst = 0.0
    for _ in range(200):
        N = int(rng.integers(1, 9))
        g = cases.jitter(ChannelGraph(N, 6, 4, 2), rng, 1.0)
        with torch.no_grad():
            A = g.adjacency(*g.hybrid_embeddings(torch.randn(5, N, 6) * 3))
        if not bool(((A >= 0) & (A <= 1)).all()):
            return math.inf
        worst = max(worst, float((A.sum(-1) - 1).abs().max()))
    return worst


def _ttcn_normalized(rng):
    worst = 0.0
    for _ in range(200):
        net = cases.jitter(TTCN(int(rng.integers(2, 9)), int(rng.integers(1, 9))), rng, 1.0)
        L = int(rng.integers(1, 12))
        pts = torch.randn(3, L, net.point_dim) * 3
        mask = torch.rand(3, L) < 0.7
        mask[:, 0] = True
        with torch.no_grad():
            w = net.weights(pts, mask)
        if bool((w[~mask] != 0).any()):
            return math.inf
        worst = max(worst, float((w.sum(-2) - 1).abs().max()))
    return worst


def _graph_permutation_mismatches(rng):
    bad = 0
    for _ in range(60):
        N = int(rng.integers(2, 9))
        g = cases.jitter(ChannelGraph(N, 5, 3, int(rng.integers(1, 4)), ordered=True).double(), rng)
        H = torch.as_tensor(rng.normal(size=(3, N, 5)))
        perm = torch.as_tensor(rng.permutation(N))
        twin = ChannelGraph(N, 5, 3, g.hops, ordered=True).double()
        twin.load_state_dict(g.state_dict())
        with torch.no_grad():
            for k in range(2):
                twin.static[k].copy_(g.static[k][perm])
        bad += not torch.equal(g(H)[:, perm], twin(H[:, perm]))
    return bad


def _section_locality(rng):
    for _ in range(50):
        N, P = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        g = cases.jitter(ChannelGraph(N, 4, 3, 2).double(), rng)
        grid = torch.as_tensor(rng.normal(size=(2, N, P, 4)))
        ref = compensate(grid, g)
        p = int(rng.integers(P))
        other = grid.clone()
        other[:, :, [q for q in range(P) if q != p]] = torch.as_tensor(rng.normal(size=(2, N, P - 1, 4)))
        if not torch.equal(compensate(other, g)[:, :, p], ref[:, :, p]):
            return False
    return True


def _visible_only(rng):
    for _ in range(50):
        model = cases.tiny_model(rng, 1, int(rng.integers(3, 6)))
        bb, P = model.backbone, model.cfg.grid.n_history
        H = torch.as_tensor(rng.normal(size=(1, P, bb.input_proj.in_features)))
        perm = rng.permutation(P) + 1
        k = int(rng.integers(1, P))
        vis = torch.as_tensor(np.sort(perm[k:]))[None]
        tgt = torch.as_tensor(np.sort(perm[:k]))[None]
        H2 = H.clone()
        H2[:, tgt[0] - 1] = torch.as_tensor(rng.normal(scale=50, size=(k, H.shape[-1])))
        if not (torch.equal(bb.encode(bb.embed_inputs(H), vis), bb.encode(bb.embed_inputs(H2), vis))
                and torch.equal(bb(H, vis, tgt), bb(H2, vis, tgt))):
            return False
    return True


def _frozen_immutable(rng):
    for policy in ("Freeze", "Norm", "NormStar", "Attn", "MLP", "Bias"):
        model = cases.tiny_model(rng, 3, 4)
        _, packed = cases.random_packed(rng, model, 6)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        res = train_stage(TrainPlan(freeze_policy=policy, lr=1e-2, batch_size=3, max_epochs=2), packed, None, model)
        for n, p in model.named_parameters():
            if n not in res.trainable and not torch.equal(p, before[n]):
                return False
    return True


def _seed_reproducible():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(99)
        model = cases.tiny_model(rng, 3, 4)
        _, packed = cases.random_packed(rng, model, 6)
        curves = []
        for stage in ("ssl", "finetune"):
            res = train_stage(TrainPlan(stage=stage, lr=1e-2, batch_size=2, max_epochs=3, seed=5), packed, packed,
                              model)
            curves.append([(r.train_loss, r.val_loss) for r in res.history])
        with torch.no_grad():
            fwd = model.eval().forecast(packed.batch(range(len(packed)))).numpy().tobytes()
        outs.append((curves, fwd))
    return outs[0] == outs[1]


def test_criterion_2_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    stoch = _row_stochastic(rng)
    ttcn = _ttcn_normalized(rng)
    checks = {
        "adjacency rows sum to 1 (+-1e-6)": stoch <= 1e-6,
        "TTCN weights sum to 1 (+-1e-6)": ttcn <= 1e-6,
        "graph permutation equivariance, bitwise": _graph_permutation_mismatches(rng) == 0,
        "full-model permutation equivariance, bitwise": cases.permutation_mismatches(30, seed=203) == 0,
        "section locality": _section_locality(rng),
        "visible-only encoding": _visible_only(rng),
        "frozen parameters unchanged": _frozen_immutable(rng),
        "seed reproducibility": _seed_reproducible(),
    }
    secs = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and secs < 180
    detail = (f"{len(checks) - len(failed)}/{len(checks)} green (row-sum err {stoch:.1e}, "
              f"TTCN weight-sum err {ttcn:.1e}), {secs:.0f}s")
    if failed:
        detail += f"; failed: {failed}"
    assert record(2, "invariants", ok, detail)


# -- 3 -------------------------------------------------------------------------


def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    errs = [cases.pipeline_gradient_error(seed=s) for s in (301, 302)]
    secs = time.perf_counter() - t0
    ok = max(errs) <= 1e-3 and secs < 120
    assert record(3, "end-to-end gradient check", ok,
                  f"N=2 P=3 D_e=8 float64, max relative error {max(errs):.2e} (tol 1e-3), {secs:.0f}s")


# -- 4 -------------------------------------------------------------------------


def test_criterion_4_overfit():
    t0 = time.perf_counter()
    ds, _ = generate_synthetic(GeneratorConfig(n_samples=8, coupling=0.95), seed=0)
    ds = apply_normalizer(ds, fit_normalizer(ds))
    grid = SectionGrid.for_spans(ds.obs_span, ds.horizon_span, ds.obs_span / 6)
    packed = PackedTasks(build_forecast_tasks(ds), grid, ds.channel_count)
    torch.manual_seed(0)
    model = VIMTS(ModelConfig(n_channels=ds.channel_count, grid=grid))  # desk defaults
    plan = TrainPlan(lr=1e-3, batch_size=8, max_epochs=2000, patience=2000, max_steps=2000)
    res = train_stage(plan, packed, None, model)
    with torch.no_grad():
        final = float(finetune_loss(model.eval(), packed.batch(range(len(packed)))))
    first = next((r.steps for r in res.history if r.train_loss < 1e-3), None)
    secs = time.perf_counter() - t0
    ok = final < 1e-3 and res.steps <= 2000 and secs < 300
    assert record(4, "overfit sanity", ok,
                  f"8 samples, L_ft {final:.2e} after {res.steps} steps (first below 1e-3 at step {first}), "
                  f"{secs:.0f}s")


# -- 5-7: shared experiment ----------------------------------------------------

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
RATIOS = (0.1, 0.2, 0.5, 1.0)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_runs")
    manifest = harness.ExperimentManifest.load(DESK).with_overrides(output_dir=str(root))

    @functools.cache
    def cached(variant: str, ratio: float | None, seed: int) -> dict:
        m = manifest.with_overrides(ablation=harness.Ablation.parse(variant), few_shot_ratio=ratio)
        res = harness.run_safely(m, seed)
        timing = res.run_dir / "timing.json"
        seconds = json.loads(timing.read_text())["total_seconds"] if timing.exists() else 0.0
        return {**res.metrics, "seconds": float(seconds)}

    def run(variant, ratio, seed):
        # a ratio of 1.0 trains on the full split, i.e. the same run as no ratio
        return cached(variant, None if ratio is None or ratio >= 1 else ratio, seed)

    return manifest, run


def _mse(runs):
    return np.array([r.get("mse", math.nan) for r in runs], float)


def test_criterion_5_forecasting_skill(experiment):
    manifest, run = experiment
    data = harness.prepare_data(manifest.data)
    fallback = channel_means(data.tasks["train"], data.dataset.channel_count)
    locf = mse(*locf_baseline(data.tasks["test"], fallback))
    mean = mse(*mean_baseline(data.tasks["test"], fallback))
    runs = [run("complete", None, s) for s in manifest.seeds]
    vals = _mse(runs)
    model = float(vals.mean())
    secs = sum(r["seconds"] for r in runs)
    gain_locf, gain_mean = 1 - model / locf, 1 - model / mean
    ok = bool(np.isfinite(vals).all()) and gain_locf >= 0.2 and gain_mean >= 0.2 and secs < 1800
    assert record(5, "forecasting skill", ok,
                  f"MSE {model:.4f} (seeds {np.round(vals, 4).tolist()}) vs LOCF {locf:.4f} "
                  f"({gain_locf:.0%} better) and mean {mean:.4f} ({gain_mean:.0%} better), "
                  f"need >=20%; {secs / 60:.1f} min")


def test_criterion_6_ablation_direction(experiment):
    manifest, run = experiment
    full = _mse([run("complete", None, s) for s in manifest.seeds])
    no_gcn = _mse([run("no_gcn", None, s) for s in manifest.seeds])
    few = _mse([run("complete", 0.1, s) for s in manifest.seeds])
    no_ssl = _mse([run("no_ssl", 0.1, s) for s in manifest.seeds])
    secs = sum(run(v, r, s)["seconds"] for v, r in (("complete", None), ("no_gcn", None), ("complete", 0.1),
                                                    ("no_ssl", 0.1)) for s in manifest.seeds)
    gcn_drop = no_gcn.mean() / full.mean() - 1
    ok = bool(gcn_drop >= 0.1 and no_ssl.mean() > few.mean() and secs < 3600)
    assert record(6, "ablation direction", ok,
                  f"no_gcn {no_gcn.mean():.4f} vs complete {full.mean():.4f} ({gcn_drop:+.0%}, need >=+10%); "
                  f"at ratio 0.1 no_ssl {no_ssl.mean():.4f} vs complete {few.mean():.4f} "
                  f"(per seed {np.round(no_ssl, 4).tolist()} vs {np.round(few, 4).tolist()}); {secs / 60:.1f} min")


def test_criterion_7_fewshot_monotone(experiment):
    manifest, run = experiment
    stats, secs = [], 0.0
    for r in RATIOS:
        runs = [run("complete", r, s) for s in manifest.seeds]
        secs += sum(x["seconds"] for x in runs)
        v = _mse(runs)
        stats.append((r, float(v.mean()), float(v.std())))
    violations = []
    for (r0, m0, s0), (r1, m1, s1) in zip(stats, stats[1:]):
        pooled = math.sqrt((s0 ** 2 + s1 ** 2) / 2)
        if not m1 <= m0 + pooled:
            violations.append(f"{r0:g}->{r1:g}")
    ok = not violations and secs < 4 * 3600
    ladder = ", ".join(f"{r:g}: {m:.4f}±{s:.4f}" for r, m, s in stats)
    assert record(7, "few-shot monotonicity", ok,
                  f"{ladder}; violations {violations or 'none'}; {secs / 60:.1f} min")
    harness.report(manifest.output_dir)


# -- 8 -------------------------------------------------------------------------


def test_criterion_8_checkpoint_ingestion(tmp_path):
    t0 = time.perf_counter()
    state = mae_files.mae_state(seed=8)  # ViT-B/16 encoder, 512-wide 8-block decoder
    path = tmp_path / "mae_pretrain_vit_base_full.pth"
    mae_files.write_torch_checkpoint(path, state)
    n_file, n_excl = len(state), mae_files.n_excluded(state)
    del state
    grid = SectionGrid(1 / 9, 6, 3)
    model = VIMTS(ModelConfig(n_channels=3, grid=grid, backbone=BackboneConfig.mae_base()))
    man = load_pretrained_checkpoint(model, path)
    cov = man.coverage()
    sample = ImtsSample("probe", [0.05, 0.2, 0.41, 0.6], [[0.3, 0.0, 0.9], [0.0, 0.5, 0.0], [0.2, 0.1, 0.0],
                                                          [0.0, 0.0, 0.4]],
                        [[1, 0, 1], [0, 1, 0], [1, 1, 0], [0, 0, 1]])
    preds = predict_batch(model, sample, [(0, 0.7), (1, 0.8), (2, 0.99)])
    secs = time.perf_counter() - t0
    ok = (set(cov) == {"encoder", "decoder", "mask_token"} and all(v == 1.0 for v in cov.values())
          and not man.unmapped and len(man.loaded) == n_file - n_excl and bool(np.isfinite(preds).all()))
    assert record(8, "checkpoint ingestion", ok,
                  f"{n_file} file keys, {len(man.loaded)} loaded, {len(man.excluded)} excluded image-only keys, "
                  f"coverage {cov}, forward finite={bool(np.isfinite(preds).all())}, {secs:.0f}s")
