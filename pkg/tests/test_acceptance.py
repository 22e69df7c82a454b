"""Acceptance suite: end-to-end checks the package must pass before release.

Each test prints one ``[A*] PASS/FAIL`` line (visible with ``pytest -s`` or
on failure) and covers one release gate:

  A1  analytic gradients match central finite differences on a toy problem
  A2  mixture-of-powers guarantees hold on ten thousand random draws
  A3  pooling matches a brute-force oracle; mesh and cloud paths agree
  A4  sphere spectrum, rigid invariance, and SIHKS scale invariance
  A5  synthetic retrieval benchmark: method ladder and learned-model accuracy
  A6  learned transform is competitive with every fixed transform
  A7  cross-validated point-cloud classification accuracy
  A8  retrieval metrics match an independent reference implementation
  A9  extract/train/eval reruns are bit-identical

The synthetic benchmark (4 classes x 20 shapes) and its extraction cache
are session-scoped and shared across A5, A6 and A7; everything downstream
of the fixed data seed is deterministic, so these tests have no flakiness
budget at all.
"""

import math
import time

import numpy as np
import pytest

from conftest import random_rotation, random_simplex
from specpool import pipeline, storage, synth
from specpool.cli import main
from specpool.config import RunConfig
from specpool.descriptors import DescriptorField, sihks
from specpool.errors import DataError
from specpool.evaluation import (format_report, loo_nn_accuracy,
                                 query_metrics, rank, retrieval_metrics,
                                 split_fraction, split_kfold)
from specpool.lb_operator import mesh_spectrum
from specpool.pooling import (cloud_weights, mesh_weights,
                              pool_second_order)
from specpool.shape_io import TriMesh, load_manifest
from specpool.spdm import FIXED_TRANSFORMS, mpf_eval, mpf_q_matrix, power_grid
from specpool.trainer import FeatureSet, gradcheck

pytestmark = pytest.mark.slow

BENCH_SEED = 7

# calibrated on the shipped benchmark; see configs/retrieval_synth.cfg
RETRIEVAL = dict(task="retrieval", descriptor="sihks_wks", d_m=32, epochs=60)
LADDER = ("st_net", "surf_o2_ml", "surf_o1_ml", "surf_o2")


def verdict(tag, ok, detail):
    print(f"[{tag}] {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


# ---------------------------------------------------------------------------
# shared benchmark fixtures

@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    synth.generate(synth.SynthSpec(seed=BENCH_SEED), out)
    return out


@pytest.fixture(scope="session")
def bench(bench_dir):
    return load_manifest(bench_dir / "manifest.tsv")


@pytest.fixture(scope="session")
def cache(tmp_path_factory):
    return storage.ShapeCache(tmp_path_factory.mktemp("cache"))


@pytest.fixture(scope="session")
def ladder_runs(bench, cache):
    """Extraction plus the full 3-seed benchmark protocol, timed.

    Returns per-seed NN scores for every method, the seed-0 retrieval
    reports (reused by A6), and the wall-clock total.
    """
    t0 = time.perf_counter()
    base = RunConfig(**RETRIEVAL)
    records, failures = pipeline.extract_manifest(bench, base, cache)
    assert not failures, failures

    scores = {}
    seed0_reports = {}
    for seed in (0, 1, 2):
        run = RunConfig(seed=seed, **RETRIEVAL)
        split = split_fraction(bench, 0.4, seed=seed)
        train_e, test_e = split.subset("train"), split.subset("test")
        nn = {}
        for ablation in LADDER:
            mode = pipeline.feature_mode(ablation)
            test_f = pipeline.build_features(records, test_e, mode, run)
            blocks = None
            if ablation != "surf_o2":
                train_f = pipeline.build_features(records, train_e, mode,
                                                  run)
                blocks, _, _ = pipeline.train_run(run, train_f)
            report, _ = pipeline.retrieval_eval(test_f, blocks)
            nn[ablation] = report.nn
            if seed == 0:
                seed0_reports[ablation] = report
        scores[seed] = nn
    return {"scores": scores, "seed0_reports": seed0_reports,
            "records": records, "elapsed": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# A1: gradients

class TestA1Gradients:
    def test_analytic_gradients_match_finite_differences(self):
        t0 = time.perf_counter()
        report = gradcheck(seed=0)
        elapsed = time.perf_counter() - t0
        corrupt = gradcheck(seed=0, corrupt_scatter=True)
        verdict(
            "A1", report.passed and elapsed < 30.0 and not corrupt.passed,
            f"max rel err {report.max_error:.2e} (threshold "
            f"{report.threshold:g}), {elapsed:.1f}s; corrupted scatter "
            f"detected: {not corrupt.passed}")
        assert report.passed, report.format()
        assert elapsed < 30.0
        # a wrong off-diagonal gradient scatter must be caught
        assert not corrupt.passed
        assert corrupt.max_error >= report.threshold


# ---------------------------------------------------------------------------
# A2: mixture-of-powers guarantees

class TestA2MixtureGuarantees:
    def test_ten_thousand_random_draws_no_violations(self):
        rng = np.random.default_rng(2)
        violations = 0
        for _ in range(10_000):
            gamma = random_simplex(rng, 11)
            x_lo, x_hi = np.sort(rng.uniform(0.0, 1.0, size=2))
            f_lo, f_hi = mpf_eval(gamma, x_lo), mpf_eval(gamma, x_hi)
            if not (f_lo >= 0.0 and f_hi >= 0.0):
                violations += 1  # non-negativity
            if not f_lo <= f_hi:
                violations += 1  # monotonicity / order preservation
            if mpf_eval(gamma, 1.0) != 1.0:
                violations += 1  # exact normalization at x = 1
            if mpf_eval(gamma, 0.0) != gamma[0]:
                violations += 1  # exact limit at x = 0
        ok = verdict("A2", violations == 0,
                     f"0 of 10000 draws violated non-negativity, "
                     f"monotonicity, f(1)=1 or f(0)=gamma_0"
                     if violations == 0 else f"{violations} violations")
        assert ok


# ---------------------------------------------------------------------------
# A3: pooling against a brute-force oracle

class TestA3PoolingOracle:
    def test_hundred_random_instances(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            d = int(rng.integers(2, 17))
            s = int(rng.integers(1, 51))
            h = rng.normal(size=(s, d)) * rng.uniform(0.5, 20.0)
            areas = rng.uniform(0.1, 3.0, size=s)
            pooled = pool_second_order(DescriptorField(h, "hks"),
                                       mesh_weights(areas))
            pi = areas / areas.sum()
            oracle = np.zeros((d, d))
            for i in range(s):
                oracle += pi[i] * np.outer(h[i], h[i])
            err = np.abs(pooled.H - oracle).max() / np.abs(oracle).max()
            worst = max(worst, err)
        ok = verdict("A3", worst <= 1e-13,
                     f"worst relative error {worst:.2e} over 100 "
                     f"instances (bound 1e-13)")
        assert ok

    def test_uniform_mesh_equals_cloud_exactly(self):
        rng = np.random.default_rng(33)
        h = rng.normal(size=(37, 9))
        field = DescriptorField(h, "wks")
        via_mesh = pool_second_order(field, mesh_weights(np.full(37, 2.5)))
        via_cloud = pool_second_order(field, cloud_weights(37))
        ok = verdict("A3", np.array_equal(via_mesh.H, via_cloud.H),
                     "uniform-area mesh pooling bitwise equals cloud "
                     "pooling")
        assert ok


# ---------------------------------------------------------------------------
# A4: spectrum and descriptor invariances on the unit sphere

@pytest.fixture(scope="module")
def sphere():
    verts, faces = synth.icosphere(4)  # 2562 vertices
    mesh = TriMesh(verts, faces)
    return mesh, mesh_spectrum(mesh, k=100)


class TestA4SpectralInvariances:
    def test_sphere_eigenvalues(self, sphere):
        _, spec = sphere
        lam = spec.eigenvalues[1:4]
        rel = np.abs(lam / 2.0 - 1.0).max()
        ok = verdict("A4", rel <= 0.05,
                     f"lambda_2..4 = {np.round(lam, 4)} within "
                     f"{100 * rel:.2f}% of 2.0 (bound 5%)")
        assert ok

    def test_rigid_motion_invariance(self, sphere):
        mesh, spec = sphere
        rng = np.random.default_rng(4)
        moved = TriMesh(mesh.vertices @ random_rotation(rng).T
                        + np.array([0.3, -1.2, 2.0]), mesh.faces)
        lam = spec.eigenvalues[1:]
        lam_m = mesh_spectrum(moved, k=100).eigenvalues[1:]
        rel = np.abs(lam_m - lam).max() / lam.max()
        ok = verdict("A4", rel < 1e-9,
                     f"eigenvalue drift under rotation+translation "
                     f"{rel:.2e} (bound 1e-9)")
        assert ok

    def test_sihks_scale_invariance(self, sphere):
        # at benchmark scale: the log-time sampling window covers the
        # heat-decay band of shapes a few hundred units across, so the
        # factor-2 invariance is only meaningful in that regime
        mesh, _ = sphere
        base = TriMesh(256.0 * mesh.vertices, mesh.faces)
        doubled = TriMesh(512.0 * mesh.vertices, mesh.faces)
        a = sihks(mesh_spectrum(base, k=100)).values
        b = sihks(mesh_spectrum(doubled, k=100)).values
        rel = np.abs(a - b).max() / np.abs(a).max()
        ok = verdict("A4", rel <= 1e-3,
                     f"SIHKS drift under vertex scaling by 2.0: "
                     f"{rel:.2e} (bound 1e-3)")
        assert ok


# ---------------------------------------------------------------------------
# A5: synthetic retrieval benchmark

class TestA5RetrievalBenchmark:
    def test_method_ladder_and_accuracy(self, ladder_runs):
        scores = ladder_runs["scores"]
        ladder_ok = 0
        for seed, nn in scores.items():
            if (nn["st_net"] >= nn["surf_o2_ml"] >= nn["surf_o1_ml"]
                    and nn["st_net"] >= nn["surf_o2"]):
                ladder_ok += 1
        st_min = min(nn["st_net"] for nn in scores.values())
        elapsed = ladder_runs["elapsed"]
        verdict(
            "A5", ladder_ok >= 2 and st_min >= 0.95 and elapsed < 600.0,
            f"ladder held on {ladder_ok}/3 seeds (need 2), min st_net "
            f"NN {st_min:.3f} (need 0.95), protocol {elapsed:.0f}s "
            f"(budget 600s)")
        for seed, nn in scores.items():
            print(f"      seed {seed}: " + "  ".join(
                f"{m}={nn[m]:.3f}" for m in LADDER))
        assert ladder_ok >= 2
        assert st_min >= 0.95
        assert elapsed < 600.0


# ---------------------------------------------------------------------------
# A6: learned transform vs fixed spectral transforms

class TestA6LearnedVsFixed:
    def test_learned_transform_is_competitive(self, bench, ladder_runs):
        run = RunConfig(seed=0, **RETRIEVAL)
        records = ladder_runs["records"]
        split = split_fraction(bench, 0.4, seed=0)
        train_e, test_e = split.subset("train"), split.subset("test")

        names, rows = ["st_net"], [ladder_runs["seed0_reports"]["st_net"]]
        fixed_nn, undefined = {}, []
        for kind in FIXED_TRANSFORMS:
            mode = f"fixed:{kind}"
            try:
                train_f = pipeline.build_features(records, train_e, mode,
                                                  run)
                test_f = pipeline.build_features(records, test_e, mode, run)
            except DataError as exc:
                # the plain log is undefined on rank-deficient pooled
                # matrices; a baseline that cannot run scores nothing
                undefined.append(f"{kind} ({exc})")
                continue
            blocks, _, _ = pipeline.train_run(run, train_f)
            report, _ = pipeline.retrieval_eval(test_f, blocks)
            names.append(kind)
            rows.append(report)
            fixed_nn[kind] = report.nn

        print()
        print(format_report(rows, names))
        for line in undefined:
            print(f"      undefined on this data: {line}")
        st_nn = ladder_runs["seed0_reports"]["st_net"].nn
        best = max(fixed_nn.values())
        ok = verdict(
            "A6", st_nn >= best - 0.02,
            f"learned NN {st_nn:.3f} vs best fixed {best:.3f} "
            f"({max(fixed_nn, key=fixed_nn.get)}); slack 0.02")
        assert ok


# ---------------------------------------------------------------------------
# A7: cross-validated point-cloud classification

class TestA7Classification:
    def test_five_fold_lsf_accuracy(self, bench, cache):
        run = RunConfig(task="classification", descriptor="lsf",
                        n_points=3000, d_m=32, batch_size=15,
                        learning_rate=1.0, epochs=30, seed=0)
        records, failures = pipeline.extract_manifest(bench, run, cache)
        assert not failures, failures

        # one Q factor per shape, shared across folds (the fold split
        # changes which shapes train, not their features)
        alphas = power_grid(run.n_mix)
        qmats = {sid: mpf_q_matrix(r.U, r.lam[:, None] ** alphas[None, :])
                 for sid, r in records.items()}
        del records

        def featset(entries):
            ids = [e.shape_id for e in entries]
            return FeatureSet("stnet", ids,
                              np.array([e.label for e in entries]),
                              qmats=[qmats[i] for i in ids])

        accs, row_err = [], 0.0
        for fold in split_kfold(bench, 5, seed=0):
            train_f = featset(fold.subset("train"))
            test_f = featset(fold.subset("test"))
            blocks, _, _ = pipeline.train_run(run, train_f, n_classes=4)
            _, acc, probs = pipeline.classification_eval(test_f, blocks)
            accs.append(acc)
            row_err = max(row_err, np.abs(probs.sum(axis=1) - 1.0).max())
        mean_acc = float(np.mean(accs))
        verdict(
            "A7", mean_acc >= 0.90 and row_err <= 1e-12,
            f"5-fold mean accuracy {mean_acc:.3f} (need 0.90), per-fold "
            f"{np.round(accs, 3)}, softmax row-sum error {row_err:.1e}")
        assert mean_acc >= 0.90
        assert row_err <= 1e-12


# ---------------------------------------------------------------------------
# A8: retrieval metrics vs an independent reference

def reference_metrics(rel):
    """Textbook formulas, vectorized where possible; written separately
    from the shipped scalar kernels on purpose."""
    rel = np.asarray(rel, dtype=bool)
    n_rel = int(rel.sum())
    positions = np.flatnonzero(rel) + 1  # 1-based ranks of relevant items

    nn = 1.0 if rel[0] else 0.0
    tier1 = int(rel[:n_rel].sum()) / n_rel
    tier2 = int(rel[:2 * n_rel].sum()) / n_rel

    hits32 = int(rel[:32].sum())
    if hits32 == 0:
        e_measure = 0.0
    else:
        precision, recall = hits32 / 32, hits32 / n_rel
        e_measure = 2.0 / (1.0 / precision + 1.0 / recall)

    gain = sum(1.0 if p == 1 else 1.0 / math.log2(p) for p in positions)
    ideal = sum(1.0 if k == 1 else 1.0 / math.log2(k)
                for k in range(1, n_rel + 1))
    dcg = gain / ideal

    ap = sum((i + 1.0) / p for i, p in enumerate(positions)) / n_rel
    return nn, tier1, tier2, e_measure, dcg, ap


class TestA8MetricReference:
    def test_fifty_random_ranked_lists_match_exactly(self):
        rng = np.random.default_rng(8)
        mismatches = 0
        for _ in range(50):
            n = int(rng.integers(5, 41))
            rel = rng.random(n) < 0.4
            if not rel.any():
                rel[int(rng.integers(n))] = True
            if query_metrics(rel) != reference_metrics(rel):
                mismatches += 1
        ok = verdict("A8", mismatches == 0,
                     "all 50 random ranked lists match the reference "
                     "implementation exactly" if mismatches == 0
                     else f"{mismatches} mismatching lists")
        assert ok

    def test_nn_equals_loo_accuracy(self):
        rng = np.random.default_rng(88)
        vecs = rng.normal(size=(24, 8))
        labels = np.repeat(np.arange(4), 6)
        ids = [f"s{i:02d}" for i in range(24)]
        report = retrieval_metrics(rank(vecs, ids, labels))
        loo = loo_nn_accuracy(vecs, labels)
        verdict("A8", report.nn == loo,
                f"NN {report.nn:.4f} equals leave-one-out 1-NN "
                f"accuracy from the independent path")
        assert report.nn == loo


# ---------------------------------------------------------------------------
# A9: bit-identical reruns

class TestA9Reproducibility:
    def test_extract_train_eval_twice(self, bench_dir, tmp_path_factory):
        root = tmp_path_factory.mktemp("repro")
        cfg = root / "run.cfg"
        cfg.write_text("task = retrieval\ndescriptor = sihks_wks\n"
                       "d_m = 32\nepochs = 15\n")
        assert main(["make-splits", "--manifest",
                     str(bench_dir / "manifest.tsv"),
                     "--scheme", "fraction:0.4", "--seed", "0",
                     "--out", str(root / "splits")]) == 0
        split = root / "splits" / "split.tsv"

        outputs = {}
        for tag in ("first", "second"):
            out = root / tag
            cache_dir = root / f"cache_{tag}"  # cold cache for both runs
            assert main(["extract", "--manifest", str(split),
                         "--config", str(cfg),
                         "--cache", str(cache_dir)]) == 0
            assert main(["train", "--manifest", str(split),
                         "--config", str(cfg), "--cache", str(cache_dir),
                         "--seed", "0", "--out", str(out)]) == 0
            assert main(["eval", "--manifest", str(split),
                         "--config", str(cfg), "--cache", str(cache_dir),
                         "--model", str(out / "model.npz"),
                         "--out", str(out)]) == 0
            outputs[tag] = {name: (out / name).read_bytes()
                            for name in ("model.npz", "report.tsv",
                                         "ranked_lists.tsv")}

        same = {name: outputs["first"][name] == outputs["second"][name]
                for name in outputs["first"]}
        ok = verdict("A9", all(same.values()),
                     "model.npz, report.tsv and ranked_lists.tsv are "
                     "bit-identical across independent reruns"
                     if all(same.values()) else f"differs: {same}")
        assert ok
