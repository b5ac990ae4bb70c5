"""Acceptance criteria, one test each, at their stated tolerances.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion with the measured values.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from ddlab import cli
from ddlab.config import load_config, pretrain_config, synth_config, train_config
from ddlab.distribution import estimate_histogram, histogram_nodes
from ddlab.losses import kl_divergence
from ddlab.metrics import histogram_intersection
from ddlab.pairing import build_minibatch, hard_negative_similarities, pools_from_dataset, random_negative_similarities
from ddlab.synth import EASY, SynthConfig, generate, split_train_eval
from ddlab.tensor import l2_normalize
from ddlab.trainer import evaluate, init_net, train
from gradcheck import configs, directional_check, random_setup

REFERENCE = Path(__file__).parent.parent / "configs" / "reference.cfg"
SEEDS = (0, 1, 2)

# pinned tolerances
GRAD_REL_TOL = 1e-4
GRAD_BUDGET_S = 120.0
RAW_GRAD_ABS_TOL = 1e-12
MASS_SUM_TOL = 1e-12
EASY_RANK1_SLACK = 0.02
REPRO_BUDGET_S = 15 * 60.0


def detail(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.mark.criterion(1, "end-to-end gradients vs central differences")
def test_criterion_1_gradients(request):
    t0 = time.process_time()
    errors = []
    for trial, R, b, K in configs(108):
        obj = random_setup(trial, R, b, K)
        errors.append(directional_check(obj, np.random.default_rng([trial, 1]), h=1e-5))
    elapsed = time.process_time() - t0
    covered = {(R, b, K) for _, R, b, K in configs(108)}
    detail(request, f"configs={len(errors)} max_rel_err={max(errors):.2e} cpu={elapsed:.1f}s")
    assert len(covered) == 18
    assert max(errors) < GRAD_REL_TOL
    assert elapsed < GRAD_BUDGET_S


@pytest.mark.criterion(2, "raw-mass gradient equals the closed form")
def test_criterion_2_raw_gradient(request):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        R = int(rng.integers(2, 101))
        gamma = float(rng.uniform(0.1, 2000.0))
        s = rng.uniform(-1, 1, int(rng.integers(1, 40)))
        h = estimate_histogram(s, R, gamma)
        r = int(rng.integers(0, R))
        i = int(rng.integers(0, len(s)))
        t = histogram_nodes(R)[r]
        delta = np.exp(-gamma * (s[i] - t) ** 2)
        closed = -2.0 * gamma * delta * (s[i] - t) / len(s)
        worst = max(worst, abs(h.raw_jacobian()[r, i] - closed))
    detail(request, f"points=1000 max_abs_err={worst:.2e}")
    assert worst <= RAW_GRAD_ABS_TOL


@pytest.mark.criterion(3, "histogram and KL sanity")
def test_criterion_3_distribution_sanity(request):
    rng = np.random.default_rng(3)
    worst_sum, worst_int, min_kl = 0.0, 0.0, np.inf
    for _ in range(1000):
        R = int(rng.integers(2, 101))
        p = estimate_histogram(rng.uniform(-1, 1, int(rng.integers(1, 50))), R)
        q = estimate_histogram(np.clip(rng.normal(0.3, 0.3, int(rng.integers(1, 50))), -1, 1), R)
        worst_sum = max(worst_sum, abs(p.masses.sum() - 1), abs(q.masses.sum() - 1))
        assert kl_divergence(p, p)[0] == 0.0
        min_kl = min(min_kl, kl_divergence(p, q)[0])
        worst_int = max(worst_int, abs(histogram_intersection(p, p) - 1))
    detail(request, f"max|sum-1|={worst_sum:.1e} min KL={min_kl:.2e} max|I(H,H)-1|={worst_int:.1e}")
    assert worst_sum <= MASS_SUM_TOL
    assert min_kl >= 0
    assert worst_int <= MASS_SUM_TOL


def _scan(gram):
    b = len(gram)
    vals, args = [], []
    for a in range(b):
        best, arg = -np.inf, -1
        for c in range(b):
            if c != a and gram[a, c] > best:
                best, arg = gram[a, c], c
        vals.append(best)
        args.append(arg)
    return vals, args


@pytest.mark.criterion(4, "hard mining equals the brute-force scan and dominates random mining")
def test_criterion_4_mining(request):
    rng = np.random.default_rng(4)
    for trial in range(100):
        b = int(rng.integers(2, 65))
        e = l2_normalize(rng.standard_normal((b, int(rng.integers(2, 12)))))
        if trial % 10 == 0:
            e[1] = e[0]  # force exact ties
        rows = np.arange(b)
        hard = hard_negative_similarities(e, rows)
        vals, args = _scan(np.clip(e @ e.T, -1.0, 1.0))
        assert hard.values.tolist() == vals and hard.right.tolist() == args
        rand = random_negative_similarities(e, rows, [trial])
        assert np.all(hard.values >= rand.values)
    detail(request, "batches=100 exact match, dominance in every trial")


@pytest.mark.criterion(5, "mini-batch sample counts")
def test_criterion_5_batch_counts(request):
    cfg = SynthConfig(n_identities=40, samples_per_identity=3, dim=8, hard_sigmas=(0.1, 0.15, 0.2), hard_ranks=(5, 4, 3))
    _, ds = generate(cfg)
    pools = pools_from_dataset(ds)
    sizes = {(b, K): len(build_minibatch(pools, b, K, [b, K])) for b in (8, 16, 32) for K in (1, 2, 3)}
    for (b, K), n in sizes.items():
        assert n == 3 * b * (K + 1)
    assert sizes[16, 2] == 144 and sizes[32, 1] == 192
    detail(request, "all 9 (b, K) cells; 144 at (16,2), 192 at (32,1)")


# -- reference runs shared by criteria 6 and 7 --------------------------------


def hard_mean(report, key):
    return float(np.mean([getattr(v, key) for d, v in report.domains.items() if d != EASY]))


@pytest.fixture(scope="session")
def reference_runs():
    cfg = load_config(REFERENCE)
    t0 = time.process_time()
    runs, cpu = {}, {}
    for seed in SEEDS:
        c = dict(cfg, seed=seed)
        _, ds = generate(synth_config(c))
        tr, ev = split_train_eval(ds, c["split_fraction"], seed)
        start = time.process_time()
        net0 = init_net(ds.features.shape[1], len(np.unique(tr.identities)), c["hidden"], c["embed_dim"], seed, c["activation"])
        base, _ = train(pretrain_config(c, eval_every=1.0), tr, net0)
        for mode in ("finetune-plain", "ddl"):
            tc = train_config(c, mode=mode, eval_every=1.0)
            runs[seed, mode] = evaluate(train(tc, tr, base)[0], ev, tc)
        cpu[seed] = time.process_time() - start
        for mode in ("kl-only", "order-only", "ddl-mixture"):
            tc = train_config(c, mode=mode, eval_every=1.0)
            runs[seed, mode] = evaluate(train(tc, tr, base)[0], ev, tc)
    return runs, sum(cpu.values()), time.process_time() - t0


@pytest.mark.criterion(6, "DDL vs plain fine-tuning on the reference config")
def test_criterion_6_ddl_vs_finetune(request, reference_runs):
    runs, cpu, _ = reference_runs
    wins = {"margin": 0, "intersection": 0, "rank1": 0}
    lines, easy_drop = [], []
    for seed in SEEDS:
        ft, ddl = runs[seed, "finetune-plain"], runs[seed, "ddl"]
        dm = hard_mean(ddl, "margin") - hard_mean(ft, "margin")
        di = hard_mean(ddl, "intersection") - hard_mean(ft, "intersection")
        dr = hard_mean(ddl, "rank1") - hard_mean(ft, "rank1")
        wins["margin"] += dm > 0
        wins["intersection"] += di < 0
        wins["rank1"] += dr >= 0
        easy_drop.append(ft.domains[EASY].rank1 - ddl.domains[EASY].rank1)
        lines.append(f"s{seed}: dm={dm:+.4f} dI={di:+.4f} dr1={dr:+.3f}")
    detail(request, f"wins={wins} max easy drop={max(easy_drop):.3f} cpu={cpu:.0f}s | " + "; ".join(lines))
    assert all(w >= 2 for w in wins.values())
    assert max(easy_drop) <= EASY_RANK1_SLACK
    assert cpu < REPRO_BUDGET_S


@pytest.mark.criterion(7, "ablation direction on the reference config")
def test_criterion_7_ablation(request, reference_runs):
    runs, _, _ = reference_runs
    ok = {"kl-only": 0, "order-only": 0, "mixture": 0}
    lines = []
    for seed in SEEDS:
        ddl = hard_mean(runs[seed, "ddl"], "margin")
        kl = hard_mean(runs[seed, "kl-only"], "margin")
        order = hard_mean(runs[seed, "order-only"], "margin")
        hardest = runs[seed, "ddl"].domains["hard-2"].margin
        mixed = runs[seed, "ddl-mixture"].domains["hard-2"].margin
        ok["kl-only"] += ddl >= kl
        ok["order-only"] += ddl >= order
        ok["mixture"] += hardest >= mixed
        lines.append(f"s{seed}: ddl={ddl:.4f} kl={kl:.4f} order={order:.4f} hard-2 K=2 {hardest:.4f} vs mix {mixed:.4f}")
    detail(request, f"seeds holding={ok} | " + "; ".join(lines))
    assert all(v >= 2 for v in ok.values())


@pytest.mark.criterion(8, "byte-for-byte reproducibility of files")
def test_criterion_8_determinism(request, tmp_path):
    compared = 0
    for rep in ("a", "b"):
        root = tmp_path / rep
        assert cli.main(["synth", "--config", str(REFERENCE), "--seed", "1", "--out", str(root / "data.csv")]) == 0
        assert cli.main(["train", "--config", str(REFERENCE), "--seed", "1", "--data", str(root / "data.csv"),
                         "--out", str(root / "train")]) == 0
        assert cli.main(["eval", "--config", str(REFERENCE), "--seed", "1", "--data", str(root / "data.csv"),
                         "--checkpoint", str(root / "train" / "final.ckpt"), "--out", str(root / "eval")]) == 0
    a_files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b_files = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert a_files == b_files
    for rel in a_files:
        if rel.name == "timing.json":
            continue  # wall-clock only, deliberately kept out of every other file
        a, b = (tmp_path / "a" / rel).read_bytes(), (tmp_path / "b" / rel).read_bytes()
        # manifests record their own output directory
        if rel.suffix == ".json" and "manifest" in rel.name:
            a, b = a.replace(b"/a/", b"/x/"), b.replace(b"/b/", b"/x/")
        assert a == b, rel
        compared += 1
    detail(request, f"{compared} files identical across two runs")
