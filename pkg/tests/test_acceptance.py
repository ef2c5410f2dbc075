"""Numbered acceptance criteria; the terminal summary prints one PASS/FAIL line per criterion.

Criteria 9 to 11 share one desk-scale pipeline run (three seeds through the CLI);
it is the long pole of the suite, about an hour and a half on one CPU core.
"""

import csv
import json
import math
import time
from collections import Counter

import numpy as np
import pytest
import torch

from gradutil import fd_relative_errors
from songssl import _kernels, analysis, ssl_mae, ssl_osc
from songssl import semisl as SS
from songssl import supervised as S
from songssl.dsp import SpectrogramConfig, compute_spectrogram
from songssl.model import ModelConfig, build_model, count_parameters, ema_decay_schedule, ema_update, make_teacher
from songssl.ssl_osc import OscConfig
from songssl.training import TrainPlan

acceptance = pytest.mark.acceptance


# ----------------------------------------------------------------------------
# 1. Sinkhorn-Knopp marginals
# ----------------------------------------------------------------------------


@acceptance(1)
def test_sinkhorn_marginals():
    rng = np.random.default_rng(0)
    n, k = 64, 1024
    t0 = time.perf_counter()
    worst_row, worst_col = 0.0, 0.0
    for _ in range(100):
        # unit-scale tempered logits z / tau
        z = torch.from_numpy(rng.standard_normal((n, k)))
        q = ssl_osc.sinkhorn_assign(z, 1.0, iters=3)
        worst_row = max(worst_row, float((q.sum(1) - 1).abs().max()))
        worst_col = max(worst_col, float(((q.sum(0) - n / k) / (n / k)).abs().max()))
    elapsed = time.perf_counter() - t0
    q = ssl_osc.sinkhorn_assign(torch.zeros(n, k, dtype=torch.float64), 0.04, iters=3)
    print(f"rows {worst_row:.2e}, columns {worst_col:.2%}, {elapsed:.2f}s")
    assert worst_row <= 1e-6
    assert worst_col <= 0.02
    assert torch.equal(q, torch.full((n, k), 1 / k, dtype=torch.float64))
    assert elapsed < 10


# ----------------------------------------------------------------------------
# 2. Gini regularizer
# ----------------------------------------------------------------------------


@acceptance(2)
def test_gini_regularizer():
    rng = np.random.default_rng(1)
    for k in (1, 2, 7, 64, 1024):
        for _ in range(20):
            scale = rng.choice([0.1, 1.0, 10.0])
            p1, p2 = (torch.softmax(torch.from_numpy(scale * rng.standard_normal((2, 9, k))), -1) for _ in range(2))
            g = float(ssl_osc.gini_loss(p1, p2))
            assert -1e-12 <= g <= 1 - 1 / k + 1e-12
    u = torch.full((1, 4, 1024), 1 / 1024, dtype=torch.float64)
    assert float(ssl_osc.gini_loss(u, u)) == pytest.approx(1 - 1 / 1024, abs=1e-12)
    assert round(1 - 1 / 1024, 6) == 0.999023

    p1 = torch.softmax(torch.from_numpy(rng.standard_normal((2, 5, 8))), -1).requires_grad_()
    p2 = torch.softmax(torch.from_numpy(rng.standard_normal((2, 5, 8))), -1).requires_grad_()
    g1, g2 = torch.autograd.grad(ssl_osc.gini_loss(p1, p2), (p1, p2))
    h = 1e-6
    for p, g in ((p1, g1), (p2, g2)):
        flat = p.detach().view(-1)
        for i in range(flat.numel()):
            with torch.no_grad():
                flat[i] += h
                up = float(ssl_osc.gini_loss(p1, p2))
                flat[i] -= 2 * h
                down = float(ssl_osc.gini_loss(p1, p2))
                flat[i] += h
            assert abs((up - down) / (2 * h) - float(g.view(-1)[i])) < 1e-6


# ----------------------------------------------------------------------------
# 3. loss gradients against central finite differences
# ----------------------------------------------------------------------------

F_TINY, D_TINY, K_TINY, C_TINY, T_TINY = 8, 16, 8, 4, 12


def _tiny(head, **kw):
    cfg = ModelConfig(input_bins=F_TINY, hidden=D_TINY, lstm_hidden=D_TINY, head=head, num_classes=C_TINY,
                      num_prototypes=K_TINY, **kw)
    model = build_model(cfg, seed=0).double()
    model.eval()
    return model


@acceptance(3)
def test_loss_gradients():
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(2, T_TINY, F_TINY, generator=gen, dtype=torch.float64)
    x2 = torch.rand(2, T_TINY, F_TINY, generator=gen, dtype=torch.float64)
    valid = torch.ones(2, T_TINY, dtype=torch.bool)
    valid[1, -3:] = False
    y = torch.randint(0, C_TINY, (2, T_TINY), generator=gen)
    conf = torch.rand(2, T_TINY, generator=gen, dtype=torch.float64)

    mae = _tiny("masked_prediction")
    xm = x.clone()
    xm[:, 3:8] = 0
    student = _tiny("clustering")
    teacher = make_teacher(student)
    with torch.no_grad():
        for p in teacher.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    osc_cfg = OscConfig(num_prototypes=K_TINY)
    clf = _tiny("classifier")

    checks = {
        "mae": (lambda: ssl_mae.mae_loss(mae(xm), x, valid), mae, 1e-5),
        "swapped_ce": (lambda: ssl_osc.osc_objective(student, teacher, x, x2, valid, osc_cfg).ce, student, 1e-5),
        "oc": (lambda: ssl_osc.osc_objective(student, teacher, x, x2, valid, osc_cfg).loss, student, 1e-5),
        "frame_ce": (lambda: S.frame_ce_logits(clf(x), y, valid), clf, 1e-5),
        "consistency": (lambda: SS.consistency_loss_logits(clf(x), y, conf, 0.5, valid), clf, 1e-5),
    }
    worst = {}
    for name, (fn, model, h) in checks.items():
        worst[name] = max(fd_relative_errors(fn, list(model.parameters()), h=h))
    elapsed = time.perf_counter() - t0
    print({k: f"{v:.1e}" for k, v in worst.items()}, f"{elapsed:.1f}s")
    assert all(v < 1e-3 for v in worst.values()), worst
    assert elapsed < 120


# ----------------------------------------------------------------------------
# 4. EMA algebra
# ----------------------------------------------------------------------------


@acceptance(4)
def test_ema_algebra():
    student = _tiny("classifier")
    teacher = make_teacher(student)
    with torch.no_grad():
        for p in teacher.parameters():
            p.normal_()
    theta0 = [p.clone() for p in teacher.parameters()]
    ema_update(teacher, student, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(teacher.parameters(), theta0))
    for _ in range(50):
        ema_update(teacher, student, 0.93)
    with torch.no_grad():
        for p, p0, ps in zip(teacher.parameters(), theta0, student.parameters()):
            assert float((p - (0.93**50 * p0 + (1 - 0.93**50) * ps)).abs().max()) < 1e-6
    ema_update(teacher, student, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(teacher.parameters(), student.parameters()))

    total = 10_000
    assert ema_decay_schedule(0, total) == 0.995
    assert ema_decay_schedule(total // 2, total, ramp_fraction=0.5) == pytest.approx(0.99998, abs=1e-12)
    assert ema_decay_schedule(total // 4, total, ramp_fraction=0.25) == pytest.approx(0.99998, abs=1e-12)
    assert ema_decay_schedule(total, total) == pytest.approx(0.99998, abs=1e-12)


# ----------------------------------------------------------------------------
# 5. MAE mask statistics
# ----------------------------------------------------------------------------


def expected_mask_fraction(n_frames, spec=ssl_mae.MaeMaskSpec()):
    """Exact mean masked fraction: per-frame coverage probability from every block's (start, length) law."""
    n_blocks = -(-n_frames // spec.block_len)
    t = np.arange(n_frames)
    n_len = spec.max_len - spec.min_len + 1
    uncovered = np.ones(n_frames)
    for b in range(n_blocks):
        cover = np.zeros(n_frames)
        for s in range(spec.start_max):
            d = t - (b * spec.block_len + s)
            # lengths L in [min_len, max_len] with L > d
            count = np.where(d < 0, 0, np.clip(spec.max_len - np.maximum(spec.min_len, d + 1) + 1, 0, n_len))
            cover += count / (spec.start_max * n_len)
        uncovered *= 1 - cover
    return float(np.mean(1 - uncovered))


@acceptance(5)
def test_mae_mask_statistics():
    rng = np.random.default_rng(5)
    n_frames = SpectrogramConfig().n_frames(3 * 44100)
    fractions = np.empty(10_000)
    for i in range(fractions.size):
        offsets, lengths = ssl_mae.sample_mask_runs(n_frames, rng)
        starts = offsets - np.arange(len(offsets)) * 200
        assert np.all((0 <= starts) & (starts < 100))
        assert np.all((50 <= lengths) & (lengths <= 200))
        fractions[i] = ssl_mae.runs_to_mask(n_frames, offsets, lengths).mean()
    want = expected_mask_fraction(n_frames)
    sigma = fractions.std(ddof=1) / math.sqrt(fractions.size)
    print(f"masked fraction {fractions.mean():.5f} vs {want:.5f} (3 sigma = {3 * sigma:.5f})")
    assert abs(fractions.mean() - want) < 3 * sigma


# ----------------------------------------------------------------------------
# 6. shapes and parameter count
# ----------------------------------------------------------------------------


@acceptance(6)
def test_shape_and_parameter_fidelity():
    wave = np.random.default_rng(6).standard_normal(3 * 44100)
    assert compute_spectrogram(wave).shape == (2068, 256)
    n = count_parameters(build_model(ModelConfig(num_classes=21)))
    print(f"{n} parameters")
    assert abs(n - 9.8e6) / 9.8e6 < 0.05


# ----------------------------------------------------------------------------
# 7. metrics oracle
# ----------------------------------------------------------------------------


def brute_confusion(pred, true, c):
    cm = np.zeros((c, c), dtype=np.int64)
    for p, t in zip(pred, true):
        cm[t, p] += 1
    return cm


def brute_metrics(cm):
    c = cm.shape[0]
    p_list, r_list, f_list = [], [], []
    for k in range(c):
        tp, pc, tc = cm[k, k], cm[:, k].sum(), cm[k, :].sum()
        if pc + tc == 0:
            continue
        p = tp / pc if pc else 0.0
        r = tp / tc if tc else 0.0
        p_list.append(p)
        r_list.append(r)
        f_list.append(2 * p * r / (p + r) if p + r else 0.0)
    return {"accuracy": np.trace(cm) / cm.sum(), "f1_macro": np.mean(f_list), "precision_macro": np.mean(p_list),
            "recall_macro": np.mean(r_list)}


@acceptance(7)
def test_metrics_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        c = int(rng.integers(2, 10))
        n = int(rng.integers(1, 3000))
        true = rng.integers(0, c, n)
        pred = np.where(rng.random(n) < 0.6, true, rng.integers(0, c, n))
        cm = brute_confusion(pred, true, c)
        assert np.array_equal(_kernels.confusion(true, pred, None, c), cm)
        got = analysis.frame_metrics(pred, true, None, c)
        assert got == {**analysis.metrics_from_confusion(cm), "frames": n}
        for key, v in brute_metrics(cm).items():
            assert got[key] == pytest.approx(v, abs=1e-12)


# ----------------------------------------------------------------------------
# 8. capacity
# ----------------------------------------------------------------------------


@acceptance(8)
def test_capacity_overfit():
    from songssl import synth
    from songssl.dsp import AugmentConfig

    t0 = time.perf_counter()
    corpus = synth.gen_corpus(40, seed=0)
    recs = corpus.recordings[:2]
    c = corpus.split.num_classes
    model = S.classifier_from(None, c, ModelConfig(hidden=64, lstm_hidden=64), seed=0)
    plan = TrainPlan(epochs=20, lr_start=1e-3, lr_peak=1e-3, lr_min=1e-3, warmup_epochs=0, batch_size=2,
                     crop_window_s=None)
    rng = np.random.default_rng(8)
    acc, epochs = 0.0, 0
    while epochs < 300:
        S.train_supervised(recs, c, plan, rng, model=model, aug=AugmentConfig.off(), seed=epochs)
        epochs += plan.epochs
        acc = S.evaluate(model, recs)["accuracy"]
        if acc >= 0.99:
            break
    elapsed = time.perf_counter() - t0
    print(f"train accuracy {acc:.4f} after {epochs} epochs, {elapsed:.0f}s")
    assert acc >= 0.99
    assert elapsed < 20 * 60


# ----------------------------------------------------------------------------
# 9 to 11. desk-scale pipeline on the default synthetic corpus
# ----------------------------------------------------------------------------

SEEDS = (0, 1, 2)
BUDGET_S = 2 * 3600


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _metrics(path):
    return json.loads((path / "metrics.json").read_text())


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Per seed: MAE and OSC pretraining, three finetunes (random, MAE, OSC init), post-training of the OSC model."""
    from chain import run

    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    common = ["--preset", "desk", "-q"]
    assert run("synth", *common, "--seed", 0, "--out", root / "data") == 0
    common += ["--split", root / "data" / "split.yaml"]
    runs = {}
    for seed in SEEDS:
        d = root / f"seed{seed}"
        c = common + ["--seed", seed]
        assert run("pretrain-mae", *c, "--out", d / "mae") == 0
        assert run("pretrain-osc", *c, "--out", d / "osc") == 0
        assert run("train", *c, "--init", "random", "--out", d / "random") == 0
        assert run("train", *c, "--init", d / "mae" / "checkpoint.pt", "--out", d / "mae_ft") == 0
        assert run("train", *c, "--init", d / "osc" / "checkpoint.pt", "--out", d / "osc_ft") == 0
        assert run("posttrain", *c, "--ckpt", d / "osc_ft" / "checkpoint.pt", "--out", d / "semi") == 0
        runs[seed] = d
    elapsed = time.perf_counter() - t0
    return {"root": root, "runs": runs, "elapsed": elapsed}


@acceptance(9)
def test_end_to_end_ordering(desk):
    rows = []
    for seed, d in desk["runs"].items():
        f1 = {name: _metrics(d / name)["test_f1_macro"] for name in ("random", "mae_ft", "osc_ft")}
        semi = _metrics(d / "semi")
        rows.append((f1["random"], f1["mae_ft"], f1["osc_ft"], semi["before_f1_macro"], semi["test_f1_macro"]))
        print(f"seed {seed}: random {f1['random']:.4f} mae {f1['mae_ft']:.4f} osc {f1['osc_ft']:.4f} "
              f"semi {semi['before_f1_macro']:.4f} -> {semi['test_f1_macro']:.4f}")
    rows = np.array(rows)
    print(f"pipeline wall time {desk['elapsed'] / 60:.1f} min")
    assert np.sum(rows[:, 1] >= rows[:, 0]) >= 2, "MAE init"
    assert np.sum(rows[:, 2] >= rows[:, 0]) >= 2, "OSC init"
    gain = rows[:, 4] - rows[:, 3]
    assert np.all(gain >= -0.01), "post-training degraded F1"
    assert np.sum(gain > 0) >= 2, "post-training gain"
    assert desk["elapsed"] <= BUDGET_S


@acceptance(10)
def test_osc_anti_collapse(desk):
    from songssl.config import DESK_PRESET

    k = DESK_PRESET["osc"]["num_prototypes"]
    warmup = DESK_PRESET["osc_plan"]["warmup_epochs"]
    for seed, d in desk["runs"].items():
        rows = _rows(d / "osc" / "loss.csv")
        share = np.array([float(r["max_cluster_share"]) for r in rows])
        gini = np.array([float(r["l_gini"]) for r in rows if int(r["epoch"]) >= warmup])
        print(f"seed {seed}: max share {share.max():.3f}, min gini after warmup {gini.min():.4f}")
        assert np.all(share < 0.9)
        assert np.all(gini >= 0.5 * (1 - 1 / k))


@acceptance(11)
def test_clustering_pipeline(desk):
    from chain import run
    from songssl.synth import RARE_LABEL

    root = desk["root"]
    out = root / "cluster"
    assert run("analyze", "cluster", "--preset", "desk", "-q", "--split", root / "data" / "split.yaml",
               "--ssl-ckpt", desk["runs"][0] / "osc" / "checkpoint.pt", "--out", out) == 0
    m = _metrics(out)
    rows = _rows(out / "embeddings.csv")
    rare_clusters = Counter(int(r["cluster"]) for r in rows if int(r["label"]) == RARE_LABEL)
    planted = rare_clusters.most_common(1)[0][0]
    print(f"AMI {m['ami']:.3f} over {m['syllables']} syllables, k={m['k']}; rare class in cluster {planted}, "
          f"flagged {m['rare_clusters']}")
    assert m["k"] == len({int(r["label"]) for r in rows})
    assert m["ami"] >= 0.6
    assert planted in m["rare_clusters"]


# desk-scale training-progress examples, checked on the same runs


def test_desk_mae_loss_halves(desk):
    for d in desk["runs"].values():
        loss = [float(r["loss"]) for r in _rows(d / "mae" / "loss.csv")]
        assert loss[-1] < 0.5 * loss[0]


def test_desk_osc_ce_decreases(desk):
    from songssl.config import DESK_PRESET

    warmup = int(math.ceil(DESK_PRESET["osc_plan"]["warmup_epochs"]))
    for d in desk["runs"].values():
        ce = [float(r["l_ce"]) for r in _rows(d / "osc" / "loss.csv")]
        assert ce[-1] <= 0.8 * ce[warmup]


# ----------------------------------------------------------------------------
# 12. determinism
# ----------------------------------------------------------------------------


def _snapshot(root):
    out = {}
    for path in sorted(root.rglob("metrics.json")):
        out[str(path.relative_to(root))] = path.read_bytes()
    for path in sorted(root.rglob("run.json")):
        out[str(path.relative_to(root)) + ":checkpoint"] = json.loads(path.read_text())["checkpoint_sha256"]
    return out


@acceptance(12)
def test_rerun_is_bit_identical(tiny_config, tmp_path):
    from chain import STAGE_DIRS, run_chain

    first = _snapshot(run_chain(tmp_path, tiny_config))
    second = _snapshot(run_chain(tmp_path, tiny_config))
    assert len(first) >= len(STAGE_DIRS) + 1
    assert first == second
