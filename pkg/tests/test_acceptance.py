"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from paresis import causal, ndiff
from paresis.distill import TrainConfig, accuracy, fkd_loss, total_loss, train
from paresis.metrics import ConfusionMatrix, balanced_accuracy_from_rates, report
from paresis.models import ModelBundle, load_checkpoint, save_checkpoint
from paresis.synthgen import SynthSpec, export, generate
from paresis.windowing import (Recording, SplitSpec, SubjectMeta, build_dataset, normalize_window,
                               slide_windows, window_count)

from _oracles import brute_posterior, naive_softmax, numeric_grad, random_model, rel_error, scan_window_count
from test_models import objective_grad_error, small_bundle

SEEDS = (0, 1, 2)


# -- 1 ---------------------------------------------------------------------

def _layer_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}

    def check(name, forward, backward, inputs):
        y, cache = forward()
        R = rng.normal(size=y.shape)
        grads = backward(R, cache)
        loss = lambda: float(np.sum(forward()[0] * R))  # noqa: E731
        errs[name] = max(rel_error(grads[k], numeric_grad(loss, v)) for k, v in inputs.items())

    x = rng.normal(size=(2, 9, 3))
    spec = ndiff.ConvSpec(4, 3, stride=int(rng.integers(1, 3)))
    w, b = rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    check("conv1d", lambda: ndiff.conv1d(x, w, b, spec),
          lambda R, c: dict(zip(("x", "w", "b"), (lambda g: (g.dx, g.params["w"], g.params["b"]))(
              ndiff.conv1d_backward(R, c)))), {"x": x, "w": w, "b": b})
    g, be = rng.normal(size=3), rng.normal(size=3)
    check("batchnorm", lambda: ndiff.batchnorm(x, g, be, ndiff.BatchNormState.fresh(3)),
          lambda R, c: (lambda r: {"x": r.dx, "g": r.params["gamma"], "be": r.params["beta"]})(
              ndiff.batchnorm_backward(R, c)), {"x": x, "g": g, "be": be})
    xr = x + np.where(np.abs(x) < 1e-3, 0.5, 0.0)
    check("relu", lambda: ndiff.relu(xr), lambda R, m: {"x": ndiff.relu_backward(R, m).dx}, {"x": xr})
    W, bd = rng.normal(size=(3, 5)), rng.normal(size=5)
    check("dense", lambda: ndiff.dense(x, W, bd),
          lambda R, c: (lambda r: {"x": r.dx, "W": r.params["W"], "bd": r.params["b"]})(
              ndiff.dense_backward(R, c)), {"x": x, "W": W, "bd": bd})
    p = {"Wx": rng.normal(size=(3, 16)) * 0.5, "Wh": rng.normal(size=(4, 16)) * 0.5, "b": rng.normal(size=16) * 0.5}
    xs = x[:, :5].copy()
    check("lstm", lambda: ndiff.lstm_forward(xs, p),
          lambda R, c: (lambda r: {"xs": r.dx, **r.params})(ndiff.lstm_backward(R, c)), {"xs": xs, **p})
    return errs


def test_criterion_1_gradient_fidelity(verdict):
    start = time.time()
    layer = {}
    for seed in range(20):
        for k, v in _layer_errors(seed).items():
            layer[k] = max(layer.get(k, 0.0), v)
    objective = max(objective_grad_error(small_bundle(seed=seed), seed) for seed in range(20))
    elapsed = time.time() - start
    ok = max(layer.values()) < 1e-4 and objective < 1e-3 and elapsed < 120
    verdict(1, ok, f"worst layer rel. error {max(layer.values()):.2e} (<1e-4), objective {objective:.2e} "
                   f"(<1e-3), 20 seeds, {elapsed:.0f}s (<120s)")
    assert ok


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_loss_algebra(verdict):
    rng = np.random.default_rng(0)
    nonneg, iff = True, True
    for i in range(1000):
        n = int(rng.integers(2, 10))
        p = rng.dirichlet(np.ones(n))
        q = p.copy() if i % 10 == 0 else rng.dirichlet(np.ones(n))
        d = float(fkd_loss(p, q))
        nonneg &= d >= 0
        iff &= (d == 0) if np.array_equal(p, q) else (d > 0)
    worst_decomp = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        logits = {k: r.normal(size=(8, 5)) * 2 for k in ("tcn", "lstm", "fusion")}
        parts = total_loss(logits, r.integers(0, 5, 8), float(r.uniform(1, 8)))
        worst_decomp = max(worst_decomp, abs(parts.total - parts.fusion_ce - sum(parts.fkd) - sum(parts.ce)))
    z = np.zeros((4, 2))
    uniform = total_loss({"tcn": z, "lstm": z, "fusion": z}, np.array([0, 1, 1, 0])).total
    logits = rng.normal(size=(200, 9)) * 5
    soft = float(np.abs(ndiff.softmax_t(logits, 1.0) - naive_softmax(logits)).max())
    ok = nonneg and iff and worst_decomp < 1e-10 and abs(uniform - 3 * math.log(2)) <= 1e-4 and soft <= 1e-12
    verdict(2, ok, f"fkd>=0 & iff-equal over 1000 pairs: {nonneg and iff}; decomposition err {worst_decomp:.1e}; "
                   f"uniform binary {uniform:.5f} vs 3ln2; softmax_t(T=1) err {soft:.1e}")
    assert ok


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_windowing(verdict):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        L, T, skip = int(rng.integers(1, 500)), int(rng.integers(1, 130)), int(rng.integers(1, 70))
        mismatches += window_count(L, T, skip) != scan_window_count(L, T, skip)
    meta = SubjectMeta(50, "M", "Mild", 10.0, 60)
    rec = Recording("r", ["a", "b", "c"], rng.normal(size=(300, 3)) + 5, 100.0, "Left", "shelf", meta)
    first_zero = all(np.all(normalize_window(w).data[0] == 0.0) for w in slide_windows(rec, 32))
    overlap = True
    for T in (32, 64):
        wins = slide_windows(rec, T)
        overlap &= len(wins) == window_count(300, T, T // 2)
        overlap &= all(np.array_equal(a.data[T // 2:], b.data[:T // 2]) for a, b in zip(wins, wins[1:]))
    ok = mismatches == 0 and first_zero and overlap
    verdict(3, ok, f"count mismatches {mismatches}/1000; first row zero: {first_zero}; "
                   f"50% overlap sharing T=32,64: {overlap}")
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_metrics(verdict):
    rep = report(ConfusionMatrix(np.array([[40, 10], [20, 30]]), ("pos", "neg")))
    got = (rep.accuracy, rep.precision[0], rep.recall[0], rep.f1[0])
    target = (0.7, 0.6667, 0.8, 0.7273)
    hand_ok = all(abs(a - b) <= 1e-4 for a, b in zip(got, target))
    bal = balanced_accuracy_from_rates([97.38, 98.58])
    ok = hand_ok and abs(bal - 97.98) <= 0.01
    verdict(4, ok, "acc/prec/rec/F1 = " + "/".join(f"{v:.4f}" for v in got) + f"; balanced accuracy {bal:.2f}%")
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_criterion_5_bayesian_inference(verdict):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = random_model(rng, 6, p_edge=0.4, max_card=int(rng.integers(2, 6)))
        names = list(m.nodes)
        query = names[rng.integers(6)]
        ev = {n: m.nodes[n].states[rng.integers(m.nodes[n].card)]
              for n in rng.permutation(names)[:rng.integers(0, 4)] if n != query}
        worst = max(worst, float(np.abs(causal.posterior(m, ev, query) - brute_posterior(m, ev, query)).max()))
    dag = causal.Dag({"X": causal.NodeSpec("X", ("0", "1"))}, [])
    fitted = causal.fit_cpts(dag, [{"X": "1"}, {"X": "1"}, {"X": "0"}], 1.0).cpts["X"]
    laplace = bool(np.array_equal(fitted, [2 / 5, 3 / 5]))
    chain = causal.Dag({"A": causal.NodeSpec("A", ("0", "1")), "B": causal.NodeSpec("B", ("0", "1"))},
                       [("A", "B")])
    m = causal.CausalModel(chain, {"A": np.array([1.0, 0.0]), "B": np.eye(2)})
    try:
        causal.posterior(m, {"B": "1"}, "A")
        raised = False
    except causal.ImpossibleEvidence:
        raised = True
    ok = worst <= 1e-9 and laplace and raised
    verdict(5, ok, f"max |VE - enumeration| {worst:.1e} over 100 models; Laplace exact: {laplace}; "
                   f"impossible evidence raises: {raised}")
    assert ok


# -- 6 ---------------------------------------------------------------------

PARETIC_EPOCHS = 4


@pytest.mark.slow
def test_criterion_6_paretic_learnability(verdict):
    start = time.time()
    recs, _ = generate(SynthSpec())
    tr, va, te = build_dataset(recs, "paretic", 64, split=SplitSpec())
    rows, ok = [], True
    for seed in SEEDS:
        acc = {}
        for mode in ("fused", "tcn", "lstm"):
            b = ModelBundle(tr.X.shape[2], 2, 64, task="paretic", mode=mode, seed=seed)
            b, _ = train(b, tr.X, tr.y, va.X, va.y, TrainConfig(epochs=PARETIC_EPOCHS, seed=seed))
            acc[mode] = accuracy(b, te.X, te.y)
        ok &= acc["fused"] >= 0.95 and acc["fused"] >= max(acc["tcn"], acc["lstm"]) - 0.01
        rows.append(f"seed {seed}: fused {acc['fused']:.4f} tcn {acc['tcn']:.4f} lstm {acc['lstm']:.4f}")
    elapsed = time.time() - start
    verdict(6, ok, "; ".join(rows) + f" (need fused>=0.95 and >=max-0.01); {elapsed:.0f}s")
    assert ok


# -- 7 ---------------------------------------------------------------------

ACTION_EPOCHS = 8
ACTION_SPEC = dict(noise_sigma=1.0)


@pytest.mark.slow
def test_criterion_7_action_window_size(verdict):
    start = time.time()
    rows, ok = [], True
    for seed in SEEDS:
        recs, _ = generate(SynthSpec(seed=seed, **ACTION_SPEC))
        acc = {}
        for T in (32, 64):
            tr, va, te = build_dataset(recs, "action", T, split=SplitSpec(seed=seed))
            b = ModelBundle(tr.X.shape[2], 9, T, task="action", seed=seed)
            b, _ = train(b, tr.X, tr.y, va.X, va.y, TrainConfig(epochs=ACTION_EPOCHS, seed=seed))
            acc[T] = accuracy(b, te.X, te.y)
        ok &= acc[64] >= acc[32] - 0.02
        rows.append(f"seed {seed}: T64 {acc[64]:.4f} T32 {acc[32]:.4f}")
    elapsed = time.time() - start
    verdict(7, ok, "; ".join(rows) + f" (need T64 >= T32 - 0.02 per seed); {elapsed:.0f}s")
    assert ok


# -- 8 ---------------------------------------------------------------------

def test_criterion_8_determinism(verdict, tmp_path):
    spec = SynthSpec(n_subjects=4, recordings_per_subject=3, length=120, channels=9, seed=11)
    trees = []
    for name in ("a", "b"):
        recs, _ = generate(spec)
        export(recs, tmp_path / name, spec)
        trees.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
    data_same = trees[0] == trees[1]
    recs, _ = generate(spec)
    tr, va, _ = build_dataset(recs, "paretic", 32, split=SplitSpec(seed=11))
    runs = []
    for name in ("a", "b"):
        b = ModelBundle(tr.X.shape[2], 2, 32, task="paretic", seed=5)
        b, hist = train(b, tr.X, tr.y, va.X, va.y, TrainConfig(epochs=2, seed=5, batch_size=16))
        save_checkpoint(b, tmp_path / f"{name}.npz", {"seed": 5})
        runs.append((hist, (tmp_path / f"{name}.npz").read_bytes()))
    hist_same = runs[0][0] == runs[1][0]
    ckpt_same = runs[0][1] == runs[1][1]
    reloaded, _ = load_checkpoint(tmp_path / "a.npz")
    save_checkpoint(reloaded, tmp_path / "c.npz", {"seed": 5})
    resave_same = (tmp_path / "c.npz").read_bytes() == runs[0][1]
    ok = data_same and hist_same and ckpt_same and resave_same
    verdict(8, ok, f"dataset bytes equal: {data_same}; history equal: {hist_same}; "
                   f"checkpoint bytes equal: {ckpt_same}; reload+save equal: {resave_same}")
    assert ok
