"""Acceptance suite: one or more tests per headline criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
PASS/FAIL line per criterion. The training benchmark behind criteria 4-8 is
computed once and cached (see ``benchmark``); a fresh run takes hours on one core.
"""

import os
import time

import numpy as np
import pytest

from _benchmark import TAPS, mean_of, run_benchmark, settings_key, table
from _oracles import iou_oracle, point_oracle, random_curve, random_point_fixture
from lgad import numcore as nc
from lgad.attention import attention_distance, attention_mean
from lgad.cli import main
from lgad.distill import DistillPlan, build_aux_heads, dml_loss, ds_loss, fmd_loss, lat_loss, total_loss
from lgad.lanedata import GenParams, gen_dataset
from lgad.laneval import culane_f1, tusimple_metrics
from lgad.netlib import NetworkConfig, build_network, forward, label_to_image
from lgad.numcore import Tensor, grad_check, shadow64
from lgad.trainer import TrainConfig, evaluate, train_teacher

C1 = "1 gradient suite"
C2 = "2 attention algebra"
C3 = "3 teacher competence"
C4 = "4 LGAD directional effect"
C5 = "5 attention alignment"
C6 = "6 strategy equivalence"
C7 = "7 ablation ordering"
C8 = "8 position robustness"
C9 = "9 metric oracles"
C10 = "10 determinism"


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def dot(t, w):
    """Scalar projection <t, w>, used to reduce an op's output to a loss."""
    return nc.Tensor._result(np.asarray((t.data * w).sum()), (t,), lambda g: (g * w,))


# ---------------------------------------------------------------------------
# 1. gradients


def _op_cases(rng):
    """One scalar objective per differentiable op on a random shape."""
    n, c, h, w = (int(v) for v in (rng.integers(1, 3), rng.integers(1, 4), rng.integers(4, 9), rng.integers(4, 9)))
    x = t64(rng.standard_normal((n, c, h, w)))
    o, k = int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    wt, b = t64(rng.standard_normal((o, c, k, k))), t64(rng.standard_normal(o))
    stride = int(rng.choice([1, 2]))
    cw = rng.standard_normal(nc.conv2d(x, wt, b, stride, k // 2).shape)
    xs = t64(rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.05)  # distinct values: no pooling ties
    pw = rng.standard_normal((n, c, h // 2, w // 2))
    xr = rng.standard_normal((n, c, h, w))
    xr[np.abs(xr) < 0.05] = 0.5  # keep clear of the relu kink
    rw = xr + 1.0
    xr = t64(xr)
    hu, wu = h + int(rng.integers(1, 6)), w + int(rng.integers(1, 6))
    uw = rng.standard_normal((n, c, hu, wu))
    lg = t64(rng.standard_normal((n, c + 1, h, w)))
    tgt = rng.integers(0, c + 1, (n, h, w))
    tgt[0, 0, 0] = 255
    z, ez = t64(rng.standard_normal((n, 3))), rng.integers(0, 2, (n, 3)).astype(float)
    v, lw, lb = t64(rng.standard_normal((n, c))), t64(rng.standard_normal((c, 2))), t64(rng.standard_normal(2))
    lwt = rng.standard_normal((n, 2))
    gw = rng.standard_normal((n, c))
    x2 = t64(rng.standard_normal((n, o, h, w)))
    catw = rng.standard_normal((n, c + o, h, w))
    a2 = t64(rng.standard_normal((n, c, h, w)))
    mref = rng.standard_normal((n, c, h, w))
    p = float(rng.choice([1.0, 2.0, 3.0]))
    aref = np.abs(rng.standard_normal((n, h, w)))
    peer = rng.standard_normal((n, c + 1, h, w))
    taps = {"stage1": x, "stage2": a2}
    t_taps = {"stage1": Tensor(rng.standard_normal((n, c, h, w))), "stage2": Tensor(rng.standard_normal((n, c, h, w)))}
    aux = build_aux_heads({"stage1": c, "stage2": c}, 3, ("stage1", "stage2"), seed=int(rng.integers(1000)))
    for t in aux.values():
        t.requires_grad = True
    ds_lab = rng.integers(0, 3, (n, 2 * h, 2 * w))
    return {
        "conv2d": (lambda: dot(nc.conv2d(x, wt, b, stride, k // 2), cw), [x, wt, b]),
        "relu": (lambda: dot(nc.relu(xr), rw), [xr]),
        "max_pool": (lambda: dot(nc.max_pool(xs, 2, 2), pw), [xs]),
        "bilinear_upsample": (lambda: dot(nc.bilinear_upsample(x, hu, wu), uw), [x]),
        "softmax_cross_entropy": (lambda: nc.softmax_cross_entropy(lg, tgt, ignore=255), [lg]),
        "sigmoid_bce": (lambda: nc.sigmoid_bce(z, ez), [z]),
        "global_avg_pool": (lambda: dot(nc.global_avg_pool(x), gw), [x]),
        "linear": (lambda: dot(nc.linear(v, lw, lb), lwt), [v, lw, lb]),
        "concat": (lambda: dot(nc.concat([x, x2]), catw), [x, x2]),
        "add+scale": (lambda: dot(nc.add(x, nc.scale(a2, 0.3)), mref), [x, a2]),
        "mean_squared_difference": (lambda: nc.mean_squared_difference(a2, mref), [a2]),
        "attention_mean": (lambda: attention_distance(attention_mean(xr, p), aref), [xr]),
        "attention_mean_normalized": (lambda: attention_distance(attention_mean(xr, p, True), aref / 10), [xr]),
        "lat_loss": (lambda: lat_loss({"stage1": xr}, {"stage1": Tensor(mref)}, DistillPlan("LGAD", ("stage1",))), [xr]),
        "dml_loss": (lambda: dml_loss(lg, peer), [lg]),
        "fmd_loss": (lambda: fmd_loss(taps, t_taps, ("stage1", "stage2")), [x, a2]),
        "ds_loss": (lambda: ds_loss(taps, ds_lab, aux, ("stage1", "stage2")), [x, a2, *aux.values()]),
    }


@pytest.mark.criterion(C1)
def test_gradient_suite_ops():
    start = time.perf_counter()
    failures = []
    names = None
    with shadow64():
        for seed in range(20):
            cases = _op_cases(np.random.default_rng(seed))
            names = list(cases)
            for name, (fn, params) in cases.items():
                rep = grad_check(fn, params, tol=1e-3, eps=1e-6)
                if not rep.passed:
                    failures.append((name, seed, rep.max_error, rep.failure))
    elapsed = time.perf_counter() - start
    print(f"{len(names)} ops x 20 seeds, {elapsed:.1f}s, failures: {failures}")
    assert not failures
    assert elapsed < 120


@pytest.mark.criterion(C1)
def test_gradient_suite_full_objective():
    """Student forward, cross-entropy, existence BCE and the attention term."""
    start = time.perf_counter()
    worst = 0.0
    with shadow64():
        for seed in range(20):
            rng = np.random.default_rng(500 + seed)
            cfg = NetworkConfig(stage_widths=(2, 2, 3, 3), max_lanes=2, num_classes=3)
            student, teacher = build_network(cfg, seed), build_network(cfg, seed + 1)
            for name, t in student.params.items():
                if name.endswith(".b"):  # zero biases put dead regions exactly on the relu kink
                    t.data[...] = rng.normal(0, 0.1, t.shape)
            x = Tensor(rng.random((2, 3, 16, 16)))
            y = rng.integers(0, 3, (2, 16, 16))
            e = rng.integers(0, 2, (2, 2)).astype(float)
            t_taps = forward(teacher, label_to_image(y, 3, 3)).taps
            plan = DistillPlan("LGAD", tuple(rng.choice(["stage1", "stage2", "stage3", "stage4"], 2, replace=False)))

            def objective():
                res = forward(student, x)
                seg = nc.add(nc.softmax_cross_entropy(res.logits, y), nc.scale(nc.sigmoid_bce(res.existence_logits, e), 0.1))
                return total_loss(seg, lat_loss(res.taps, t_taps, plan), plan.alpha)

            rep = grad_check(objective, student.params, tol=1e-3, eps=1e-6, max_entries=3, rng=np.random.default_rng(seed))
            worst = max(worst, rep.max_error)
            assert rep.passed, (seed, rep.errors)
    elapsed = time.perf_counter() - start
    print(f"full objective: 20 seeds, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. attention algebra (dyadic fixtures keep every sum exact)


def _dyadic(rng, shape):
    return rng.integers(-64, 65, shape) / 8.0


@pytest.mark.criterion(C2)
@pytest.mark.parametrize("seed", range(25))
def test_attention_algebra(seed):
    rng = np.random.default_rng(seed)
    # power-of-two channel counts keep the channel mean exact
    n, c, h, w = 2, int(rng.choice([1, 2, 4, 8])), int(rng.integers(2, 9)), int(rng.integers(2, 9))
    r = _dyadic(rng, (n, c, h, w))
    with shadow64():
        for p in (1, 2):
            a = attention_mean(Tensor(r), p).data
            assert (a >= 0).all()
            perm = rng.permutation(c)
            assert np.array_equal(attention_mean(Tensor(r[:, perm]), p).data, a)
        k = float(rng.choice([-4.0, -2.0, -0.5, 0.25, 3.0]))
        assert np.array_equal(attention_mean(Tensor(k * r), 1).data, abs(k) * attention_mean(Tensor(r), 1).data)

        s = {f"stage{i}": Tensor(_dyadic(rng, (n, c, h, w))) for i in (1, 2, 3)}
        t = {f"stage{i}": Tensor(_dyadic(rng, (n, c, h, w))) for i in (1, 2, 3)}
        singles = [float(lat_loss(s, t, DistillPlan("LGAD", (k_,)))) for k_ in ("stage1", "stage2", "stage3")]
        assert float(lat_loss(s, t, DistillPlan("LGAD", ("stage1", "stage2", "stage3")))) == \
            (singles[0] + singles[1]) + singles[2]
        assert float(lat_loss(s, t, DistillPlan("LGAD", ("stage1", "stage3")))) == singles[0] + singles[2]
        assert float(lat_loss(s, s, DistillPlan("LGAD", ("stage1", "stage2", "stage3")))) == 0.0


# ---------------------------------------------------------------------------
# 3. teacher competence


@pytest.mark.criterion(C3)
@pytest.mark.parametrize("seed", range(3))
def test_teacher_competence(seed):
    scenes = gen_dataset(GenParams(), 1, 200)
    start = time.perf_counter()
    # batch 4: 200 scenes give only 500 steps at batch 8, where one init in three stalls
    res = train_teacher(scenes, TrainConfig(epochs=20, seed=seed, batch_size=4, teacher_lr0=0.1))
    rep = evaluate(res.net, scenes, teacher_inputs=True, protocol="point")
    elapsed = time.perf_counter() - start
    iou = rep.extra["foreground_iou"]
    print(f"seed {seed}: teacher foreground IoU {iou:.4f} on its 200 training labels after 20 epochs, {elapsed:.0f}s")
    assert iou >= 0.95
    assert elapsed < 600


# ---------------------------------------------------------------------------
# 4-8. distillation benchmark


@pytest.fixture(scope="session")
def benchmark(request):
    """Benchmark results, cached per source hash (runs are deterministic with one thread).

    Set LGAD_BENCH_FRESH=1 to ignore the cache.
    """
    key = "lgad/benchmark/" + settings_key()
    results = None if os.environ.get("LGAD_BENCH_FRESH") else request.config.cache.get(key, None)
    if results is None:
        # a fresh run takes a couple of hours on one core; report progress past output capture
        reporter = request.config.pluginmanager.get_plugin("terminalreporter")
        results = run_benchmark(log=lambda m: reporter.write_line(m) if reporter else None)
        request.config.cache.set(key, results)
    return results


def _runs(benchmark, name):
    return {s: r["runs"][name] for s, r in benchmark["seeds"].items()}


@pytest.mark.slow
@pytest.mark.criterion(C4)
def test_lgad_directional_effect(benchmark):
    print(table(benchmark))
    base, lgad = _runs(benchmark, "NONE"), _runs(benchmark, "LGAD@stage2")
    worse = [s for s in base if not lgad[s]["accuracy"] > base[s]["accuracy"]]
    l_lgad, l_base = mean_of(benchmark, "LGAD@stage2", "final_l_seg"), mean_of(benchmark, "NONE", "final_l_seg")
    print(f"mean final l_seg: LGAD {l_lgad:.4f}, baseline {l_base:.4f}")
    assert not worse, f"LGAD accuracy not above baseline for seeds {worse}"
    assert l_lgad <= l_base


@pytest.mark.slow
@pytest.mark.criterion(C5)
def test_attention_alignment(benchmark):
    rising = []
    for seed, r in benchmark["seeds"].items():
        for name, run in r["runs"].items():
            if "LGAD" not in name:
                continue
            for tap, d in run["dist"].items():
                print(f"seed {seed} {name} {tap}: {d[0]:.4f} -> {d[-1]:.4f}")
                if not d[-1] < d[0]:
                    rising.append((seed, name, tap))
    assert not rising


@pytest.mark.slow
@pytest.mark.criterion(C6)
def test_strategy_equivalence(benchmark):
    seq, col = mean_of(benchmark, "LGAD@stage2", "accuracy"), mean_of(benchmark, "CLGAD@stage2", "accuracy")
    print(f"mean accuracy: sequential {seq:.4f}, collaborative {col:.4f}, gap {abs(seq - col) * 100:.2f} points")
    assert abs(seq - col) < 0.02


@pytest.mark.slow
@pytest.mark.criterion(C7)
def test_ablation_ordering(benchmark):
    acc = {n: mean_of(benchmark, n, "accuracy") for n in ("NONE", "LGAD@stage2", "DS@stage2", "DML", "FMD@stage2")}
    print(", ".join(f"{n} {v:.4f}" for n, v in acc.items()))
    lgad, base = acc["LGAD@stage2"], acc["NONE"]
    for other in ("DS@stage2", "DML", "FMD@stage2"):
        assert lgad >= acc[other], other
        assert acc[other] >= base, other
    assert lgad > base


@pytest.mark.slow
@pytest.mark.criterion(C8)
def test_position_robustness(benchmark):
    base = mean_of(benchmark, "NONE", "accuracy")
    acc = {t: mean_of(benchmark, f"LGAD@{t}", "accuracy") for t in TAPS}
    spread = max(acc.values()) - min(acc.values())
    print(f"baseline {base:.4f}; " + ", ".join(f"{t} {v:.4f}" for t, v in acc.items())
          + f"; spread {spread * 100:.2f} points")
    assert all(v > base for v in acc.values())
    assert spread < 0.02


# ---------------------------------------------------------------------------
# 9. metric oracles


@pytest.mark.criterion(C9)
@pytest.mark.parametrize("seed", range(60))
def test_point_metric_oracle(seed):
    rng = np.random.default_rng(7000 + seed)
    preds, gts = random_point_fixture(rng)
    thr, frac = float(rng.choice([2.0, 5.0, 20.0])), float(rng.choice([0.5, 0.85]))
    rep = tusimple_metrics(preds, gts, thr, frac)
    assert (rep.accuracy, rep.fp_rate, rep.fn_rate) == point_oracle(preds, gts, thr, frac)
    assert rep.accuracy == rep.n_correct / rep.n_gt_points


@pytest.mark.criterion(C9)
@pytest.mark.parametrize("seed", range(60))
def test_iou_metric_oracle(seed):
    rng = np.random.default_rng(9000 + seed)
    dims, width = (16, 16), int(rng.integers(1, 5))
    gts = [[random_curve(rng, *dims) for _ in range(rng.integers(1, 3))] for _ in range(2)]
    preds = []
    for g in gts:
        p = [c + rng.normal(0, 1.5, c.shape) * [1, 0] for c in g if rng.random() < 0.8]
        if rng.random() < 0.4:
            p.append(random_curve(rng, *dims))
        preds.append(p)
    rep = culane_f1(preds, gts, dims, width, 0.5)
    assert (rep.tp, rep.fp, rep.fn) == iou_oracle(preds, gts, dims, width, 0.5)
    p, r = rep.precision, rep.recall
    assert p == (rep.tp / (rep.tp + rep.fp) if rep.tp + rep.fp else 0.0)
    assert r == (rep.tp / (rep.tp + rep.fn) if rep.tp + rep.fn else 0.0)
    assert rep.f1 == (0.0 if p + r == 0 else 2 * p * r / (p + r))


# ---------------------------------------------------------------------------
# 10. determinism


TINY = ["--threads", "1", "--set", "data.height=32", "--set", "data.width=32", "--set", "data.train_count=12",
        "--set", "data.test_count=4", "--set", "net.stage_widths=4,4,8,8", "--set", "train.epochs=2",
        "--set", "train.teacher_epochs=2", "--set", "train.batch_size=4"]


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.mark.criterion(C10)
def test_determinism(tmp_path):
    def twice(build):
        """Run a command, then re-run it from the config it wrote; compare outputs."""
        a, b = tmp_path / "a" / build.__name__, tmp_path / "b" / build.__name__
        assert main(build(a, TINY)) == 0
        assert main(build(b, ["--threads", "1", "--config", str(a / "config.txt")])) == 0
        assert _tree(a) == _tree(b), build.__name__
        return a

    def gen(out, flags):
        return ["gen", str(out), *flags]

    data = twice(gen)

    def teacher(out, flags):
        return ["train", "--data", str(data), "--out", str(out), *flags, "--set", "train.role=teacher"]

    tdir = twice(teacher)
    ckpt = str(tdir / "model.bin")

    def lgad(out, flags):
        return ["train", "--data", str(data), "--out", str(out), "--teacher", ckpt, *flags,
                "--set", "distill.family=LGAD", "--set", "distill.positions=stage1,stage3"]

    def collaborative(out, flags):
        return ["train", "--data", str(data), "--out", str(out), *flags,
                "--set", "distill.family=LGAD", "--set", "train.strategy=COLLABORATIVE"]

    def mutual(out, flags):
        return ["train", "--data", str(data), "--out", str(out), *flags, "--set", "distill.family=DML"]

    def evaluation(out, flags):
        return ["eval", ckpt, "--data", str(data), "--out", str(out), *flags]

    def attention(out, flags):
        return ["attention", ckpt, "--data", str(data), "--out", str(out), "--samples", "0,1", *flags]

    def ablation(out, flags):
        return ["ablate", "--data", str(data), "--out", str(out), "--teacher", ckpt,
                "--families", "NONE,LGAD,DS,FMD", "--positions", "stage2,stage4", *flags]

    for cmd in (lgad, collaborative, mutual, evaluation, attention, ablation):
        twice(cmd)
