"""Acceptance criteria C1..C10, each at its stated tolerance.

Every test records a PASS/FAIL line that pytest prints in an
"acceptance criteria" section at the end of the run. Running this file
directly (``python tests/test_acceptance.py``) prints the same lines.
"""
import itertools
import math
import statistics
import time
from dataclasses import replace

import numpy as np

from domainmix import model
from domainmix.cluster import ClusterAssignment, DbscanParams, dbscan, quantity_keep
from domainmix.diffcore import Tape, softmax
from domainmix.evaluation import evaluate_features, map_oracle
from domainmix.experiment import RunSpec, run_experiment, run_one
from domainmix.losses import (
    domain_balance_loss,
    domain_classification_loss,
    identity_loss,
    kl_to_uniform,
    triplet_loss,
)
from domainmix.synthgen import BenchmarkSpec, generate, generate_holdout
from domainmix.train import TrainConfig, build_epoch_dataset, run

from conftest import central_diff, record, rel_err

SEEDS = range(5)
A2 = math.log(2) / 2


# C1 -----------------------------------------------------------------------


def _full_graph(params, X, y, d, margin, a, norm_tri):
    """Scalar objective touching every layer and every loss on one tape."""
    tape = Tape()
    p = {k: tape.param(k, v) for k, v in params.items()}
    h = tape.const(X)
    for k in range(3):
        h = tape.affine(h, p[f"enc.W{k}"], p[f"enc.b{k}"])
        if k < 2:
            h = tape.relu(h)
    f = h
    logits = tape.matmul(f, tape.hstack(p["head.W1"], p["head.W2"]))
    l_id = tape.head(logits, identity_loss, y)
    l_tri = tape.head(tape.normalize_rows(f) if norm_tri else f, triplet_loss, y, margin)
    g = f
    for k in range(3):
        g = tape.affine(g, p[f"disc.W{k}"], p[f"disc.b{k}"])
        if k < 2:
            g = tape.relu(g)
    probs = tape.softmax(g)
    l_db = tape.head(probs, domain_balance_loss, a)
    l_d = tape.head(probs, domain_classification_loss, d)
    return tape, tape.weighted_sum([(0.7, l_db), (1.3, l_id), (1.0, l_tri), (0.4, l_d)])


def test_c1_gradients():
    t0 = time.perf_counter()
    worst, n_cfg = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d_in, h, d_f, h_d = (int(v) for v in rng.integers(2, 6, size=4))
        n_cls, k = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        n_syn = int(rng.integers(1, n_cls))
        y = np.repeat(np.arange(n_cls), k)
        d = (y >= n_syn).astype(int)
        if d.min() == d.max():
            d[0] = 1 - d[0]
        X = rng.normal(size=(len(y), d_in))
        params = {
            **model.init_mlp(rng, [d_in, h, h, d_f], "enc"),
            **model.init_mlp(rng, [d_f, h_d, h_d, 2], "disc"),
            "head.W1": rng.normal(size=(d_f, n_syn)),
            "head.W2": rng.normal(size=(d_f, n_cls - n_syn)),
        }
        for k_ in params:
            if ".b" in k_:
                params[k_] = rng.normal(scale=0.1, size=params[k_].shape)
        margin = float(rng.choice([0.3, 5.0]))
        norm_tri = bool(seed % 2)
        tape, loss = _full_graph(params, X, y, d, margin, A2, norm_tri)
        grads = tape.backward(loss)
        for name, value in params.items():

            def fn(v, name=name):
                return float(_full_graph({**params, name: v}, X, y, d, margin, A2, norm_tri)[1].value[0, 0])

            worst = max(worst, rel_err(grads[name], central_diff(fn, value)))
        n_cfg += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and n_cfg >= 100 and elapsed < 30
    record("C1", ok, f"max rel err {worst:.2e} over {n_cfg} configs in {elapsed:.1f}s (need <1e-6, >=100, <30s)")
    assert ok


# C2 -----------------------------------------------------------------------


def test_c2_balance_minimum():
    rng = np.random.default_rng(0)
    rows = softmax(rng.normal(scale=2, size=(1000, 2)))
    vals = np.array([domain_balance_loss(r[None], A2)[0] for r in rows])
    at_uniform = domain_balance_loss(np.full((5, 2), 0.5), A2)[0]
    hand = domain_balance_loss([[0.9, 0.1]], A2)[0]
    ok = at_uniform == 0.0 and vals.min() > 0 and abs(hand - 0.3681) < 1e-4
    record("C2", ok, f"L_db(uniform)={at_uniform:.1e}, min over 1000 rows {vals.min():.2e}, (0.9,0.1) -> {hand:.6f}")
    assert ok


# C3 -----------------------------------------------------------------------


def _naive_dbscan(X, eps, ms):
    n = len(X)
    near = [[j for j in range(n) if math.dist(X[i], X[j]) <= eps] for i in range(n)]
    core = [len(near[i]) >= ms for i in range(n)]
    lab = [-1] * n
    c = 0
    for i in range(n):
        if core[i] and lab[i] < 0:
            lab[i], todo = c, [i]
            while todo:
                for j in near[todo.pop()]:
                    if core[j] and lab[j] < 0:
                        lab[j] = c
                        todo.append(j)
            c += 1
    out = list(lab)
    for i in range(n):
        if not core[i]:
            reach = [lab[j] for j in near[i] if core[j]]
            out[i] = min(reach) if reach else -1
    return np.array(out)


def test_c3_dbscan_oracle():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    agree = 0
    for _ in range(50):
        n, dim = int(rng.integers(1, 61)), int(rng.integers(1, 5))
        centers = rng.normal(scale=3, size=(int(rng.integers(1, 5)), dim))
        X = centers[rng.integers(0, len(centers), size=n)] + rng.normal(scale=0.5, size=(n, dim))
        eps, ms = float(rng.uniform(0.2, 1.2)), int(rng.integers(1, 6))
        agree += np.array_equal(dbscan(X, DbscanParams(eps=eps, min_samples=ms)).labels, _naive_dbscan(X, eps, ms))
    elapsed = time.perf_counter() - t0
    ok = agree == 50 and elapsed < 10
    record("C3", ok, f"{agree}/50 partitions identical to the naive oracle in {elapsed:.2f}s")
    assert ok


# C4 -----------------------------------------------------------------------


def test_c4_quantity_exhaustive():
    checked = mismatches = 0
    for k in range(1, 5):
        for sizes in itertools.combinations_with_replacement(range(1, 11), k):
            a = ClusterAssignment.from_labels(np.repeat(np.arange(k), sizes))
            for b in range(1, 11):
                checked += 1
                mismatches += quantity_keep(a, b) != {i for i in range(k) if sizes[i] >= b}
    ok = mismatches == 0
    record("C4", ok, f"{checked} (size multiset, b) cases, {mismatches} mismatches")
    assert ok


# C5 -----------------------------------------------------------------------


def test_c5_map_oracle():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n_ids = int(rng.integers(2, 6))
        gy = np.concatenate([np.arange(n_ids), rng.integers(0, n_ids, size=int(rng.integers(0, 15)))])
        qy = rng.integers(0, n_ids, size=int(rng.integers(1, 8)))
        dim = int(rng.integers(2, 6))
        qf, gf = rng.normal(size=(len(qy), dim)), rng.normal(size=(len(gy), dim))
        feats = np.vstack([qf, gf])
        ref = map_oracle(list(zip(range(len(qy)), qy)), list(zip(range(len(qy), len(feats)), gy)), feats)
        worst = max(worst, abs(evaluate_features(qf, qy, gf, gy).mAP - ref))
    hand = evaluate_features([[0.0]], [1], [[0.0], [1.0], [2.0], [3.0]], [1, 2, 1, 3]).mAP
    ok = worst < 1e-12 and hand == (1 / 1 + 2 / 3) / 2
    record("C5", ok, f"max |mAP - oracle| {worst:.1e} on 100 instances; hand case {hand!r} (5/6)")
    assert ok


# C6 -----------------------------------------------------------------------


def test_c6_alternation():
    bench = generate(BenchmarkSpec(seed=0))
    cfg = TrainConfig()
    prev, violations, counts = {}, [], {"backbone": 0, "discriminator": 0, "skip": 0}

    def hook(epoch, it, kind, state):
        now = {
            "enc": model.params_digest(state.encoder),
            "head": model.params_digest(state.head.as_params()),
            "disc": model.params_digest(state.disc),
        }
        counts[kind] += 1
        if prev:
            moved = {k for k in now if now[k] != prev[k]}
            if it == 0:
                moved.discard("head")  # rebuilt by the per-epoch init, not by a step
            both = bool(moved & {"enc", "head"}) and "disc" in moved
            warm_disc = epoch < cfg.warmup_epochs and "disc" in moved
            if both or warm_disc:
                violations.append((epoch, it, kind, sorted(moved)))
        prev.update(now)

    run(cfg, bench, hook=hook, evaluate_each_epoch=False)
    ok = not violations and counts["discriminator"] > 0
    record("C6", ok, f"{counts['backbone']} backbone / {counts['discriminator']} discriminator batches, "
                     f"{len(violations)} batches touched both or hit the discriminator in warm-up")
    assert ok


# C7 / C8 ------------------------------------------------------------------

_RUNS = {}


def _result(preset, seed):
    key = (preset, seed)
    if key not in _RUNS:
        _RUNS[key] = run_one(BenchmarkSpec(), TrainConfig(), preset, seed)
    return _RUNS[key]


def _median_map(preset):
    return statistics.median(_result(preset, s)[2].reports[-1].mAP for s in SEEDS)


def test_c7_ablation_ordering():
    t0 = time.perf_counter()
    presets = ["dbscan", "dbscan_q", "no_aci", "no_db", "only_A", "domainmix_labeled", "domainmix_unlabeled"]
    med = {p: _median_map(p) for p in presets}
    elapsed = time.perf_counter() - t0
    full = med["domainmix_unlabeled"]
    checks = {
        "a dbscan_q>dbscan": med["dbscan_q"] > med["dbscan"],
        "b ACI>no_aci": full > med["no_aci"],
        "c DB>no_db": full > med["no_db"],
        "d full>only_A": full > med["only_A"],
        "e labeled>=unlabeled": med["domainmix_labeled"] >= full,
    }
    ok = all(checks.values()) and elapsed < 600
    detail = ", ".join(f"{p}={v:.4f}" for p, v in med.items())
    failed = [k for k, v in checks.items() if not v]
    record("C7", ok, f"medians {detail}; {elapsed:.0f}s" + (f"; failed {failed}" if failed else ""))
    assert ok


def _heldout_kl(preset, seed):
    bench, cfg, res = _result(preset, seed)
    h = generate_holdout(replace(BenchmarkSpec(), seed=seed))
    f = model.encode(res.state.encoder, np.vstack([h["A"][0], h["B"][0]]))
    if cfg.normalize_disc_input:
        f = model.normalize_features(f)
    return float(kl_to_uniform(model.discriminate(res.state.disc, f)).mean())


def test_c8_adversarial_effect():
    with_db = statistics.median(_heldout_kl("domainmix_unlabeled", s) for s in SEEDS)
    without = statistics.median(_heldout_kl("no_db", s) for s in SEEDS)
    ok = with_db < 0.05 and without > 0.2
    record("C8", ok, f"held-out KL to uniform: {with_db:.4f} with balance loss (<0.05), {without:.4f} without (>0.2)")
    assert ok


# C9 -----------------------------------------------------------------------


def test_c9_aci_warm_start():
    fracs = []
    for seed in range(20):
        bench = generate(BenchmarkSpec(seed=100 + seed))
        cfg = TrainConfig(total_epochs=2, warmup_epochs=2, iters_per_epoch=25, seed=seed)
        state = run(cfg, bench, evaluate_each_epoch=False).state
        ds = build_epoch_dataset(state.encoder, bench.train_A, bench.train_B, cfg.dbscan, cfg.criteria)
        f = model.normalize_features(model.encode(state.encoder, ds.X))
        head = model.adaptive_init(state.head, [f[r] for r in ds.clusters])
        p = softmax(model.classify_identity(head, f))
        M = head.n_classes
        hits = [p[r, ds.n_synthetic + i] > 1 / M for i, rows in enumerate(ds.clusters) for r in rows]
        if hits:
            fracs.append(float(np.mean(hits)))
    pooled = min(fracs) if fracs else 0.0
    ok = len(fracs) == 20 and pooled >= 0.95
    record("C9", ok, f"own-class probability > 1/M on >= {pooled:.3f} of clustered points (worst of {len(fracs)} benchmarks)")
    assert ok


# C10 ----------------------------------------------------------------------


def test_c10_determinism(tmp_path):
    spec = RunSpec(BenchmarkSpec(), TrainConfig(), "domainmix_unlabeled", "", (7,))
    blobs = []
    for name in ("first", "second"):
        run_experiment(replace(spec, out_dir=str(tmp_path / name)))
        blobs.append((tmp_path / name / "domainmix_unlabeled" / "seed7.csv").read_bytes())
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0
    record("C10", ok, f"two executions wrote {'identical' if ok else 'different'} CSV logs ({len(blobs[0])} bytes)")
    assert ok


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    import conftest

    for name, fn in list(globals().items()):
        if name.startswith("test_c"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                pass
    for cid in sorted(conftest.ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = conftest.ACCEPTANCE[cid]
        print(f"{'PASS' if ok else 'FAIL'} {cid}: {detail}")
    sys.exit(0 if all(ok for ok, _ in conftest.ACCEPTANCE.values()) else 1)
