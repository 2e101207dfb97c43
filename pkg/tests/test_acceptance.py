"""Acceptance gate: each test enforces one criterion at its stated
tolerance and prints one pass/fail line.  Expensive artifacts (the
trained model, the synthetic dataset) are module-scoped so the suite
stays inside its runtime budgets.

Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import math
import time

import numpy as np
import pytest

from wsvad import autodiff as ad
from wsvad import features as fs
from wsvad import losses as ls
from wsvad import memory as mem
from wsvad import metrics as mt
from wsvad import model as md
from wsvad import training as tr
from wsvad.attention import attention
from wsvad.errors import FeatureIOError, FormatError
from wsvad.evaluation import evaluate_bags
from wsvad.suite import run_suite

AUC_TARGET = 0.95
AP_TARGET = 0.90
ABLATION_SLACK = 0.02

_lines = []


def _report(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    _lines.append(line)
    print(line)
    assert passed, line


@pytest.fixture(scope="module")
def synth_dataset():
    """Criterion-3 data: mean_shift 4, gain 1.5, 40+40 train, 10+10 test,
    seed 7."""
    spec = fs.SynthSpec(n_normal=50, n_abnormal=50, mean_shift=4.0,
                        magnitude_gain=1.5, seed=7)
    bags, oracle = fs.generate_synth(spec)
    fs.split_synth(bags, 10, 10)
    return bags, oracle


def _train_full(bags, seed=7, disabled=()):
    cfg = tr.model_config_for([b for b in bags if b.split == "train"],
                              disabled=disabled)
    train_cfg = tr.TrainConfig(lr_uniform=1e-3, epochs=30, seed=seed)
    return tr.train(bags, cfg, train_cfg)


@pytest.fixture(scope="module")
def trained(synth_dataset):
    bags, _ = synth_dataset
    start = time.perf_counter()
    result = _train_full(bags)
    result.wall_seconds = time.perf_counter() - start
    return result


class TestCriterion1GradientSuite:
    def test_every_block_matches_finite_differences(self):
        start = time.perf_counter()
        results = run_suite(seeds=5)
        elapsed = time.perf_counter() - start
        failed = [r for r in results if not r.passed]
        worst = max(r.max_rel_err for r in results)
        ok = not failed and worst < 1e-3 and elapsed < 120.0
        _report("criterion 1 (gradient suite)", ok,
                f"{len(results)} checks, {len(failed)} failed, "
                f"max rel err {worst:.2e}, {elapsed:.1f}s (< 120s)")


class TestCriterion2OracleEquivalence:
    def test_selection_and_metric_oracles(self):
        start = time.perf_counter()
        rng = np.random.default_rng(0)

        # top-k nomination vs scan oracle, exhaustive T <= 64
        topk_ok = True
        for t in range(1, 65):
            feats = rng.normal(size=(t, 5)).astype(np.float32)
            idx, _ = md.topk_nominate(ad.tensor(feats), 0.3, 0.0, rng, False)
            k = max(1, int(0.3 * t + 0.5))
            mags = np.sqrt((feats.astype(np.float64) ** 2).sum(axis=1))
            want = sorted(sorted(range(t), key=lambda i: (-mags[i], i))[:k])
            topk_ok &= list(idx) == want

        # attention vs row-loop oracle
        att_err = 0.0
        for _ in range(50):
            t, d = int(rng.integers(1, 9)), int(rng.integers(1, 7))
            q, k, v = (rng.normal(size=(t, d)) for _ in range(3))
            got = attention(ad.tensor(q, dtype=np.float64),
                            ad.tensor(k, dtype=np.float64),
                            ad.tensor(v, dtype=np.float64)).data
            logits = q @ k.T / math.sqrt(d)
            want = np.vstack([
                (lambda e: (e / e.sum()) @ v)(np.exp(row - row.max()))
                for row in logits])
            att_err = max(att_err, float(np.abs(got - want).max()))

        # memory read vs scalar-loop oracle
        mem_err = 0.0
        for _ in range(50):
            t, k_m, d = (int(rng.integers(1, 8)) for _ in range(3))
            bank = mem.MemoryBank(ad.tensor(rng.normal(size=(k_m, d)),
                                            requires_grad=True, dtype=np.float64), "normal")
            x = rng.normal(size=(t, d))
            sims, aug = mem.memory_read(ad.tensor(x, dtype=np.float64), bank)
            want_s = np.empty((t, k_m))
            for i in range(t):
                for j in range(k_m):
                    want_s[i, j] = 1.0 / (1.0 + math.exp(
                        -float(x[i] @ bank.slots.data[j]) / math.sqrt(d)))
            mem_err = max(mem_err, float(np.abs(sims.data - want_s).max()),
                          float(np.abs(aug.data - want_s @ bank.slots.data).max()))

        # conv1d vs sliding-dot loop oracle
        conv_err = 0.0
        for _ in range(50):
            t = int(rng.integers(1, 16))
            k = int(rng.integers(1, 6))
            d_in, d_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            x = rng.normal(size=(t, d_in))
            ker = rng.normal(size=(k, d_in, d_out))
            for causal in (False, True):
                got = ad.conv1d(ad.tensor(x, dtype=np.float64),
                                ad.tensor(ker, dtype=np.float64), causal=causal).data
                pad_l = k - 1 if causal else (k - 1) // 2
                want = np.zeros((t, d_out))
                for ti in range(t):
                    for j in range(k):
                        src = ti + j - pad_l
                        if 0 <= src < t:
                            want[ti] += x[src] @ ker[j]
                conv_err = max(conv_err, float(np.abs(got - want).max()))

        # AUC / AP vs O(n^2) and rank oracles, 1000 random instances
        metric_err = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=n)
            pos, neg = scores[labels == 1], scores[labels == 0]
            wins = sum(1.0 if p > nv else 0.5 if p == nv else 0.0
                       for p in pos for nv in neg)
            want_auc = wins / (len(pos) * len(neg))
            metric_err = max(metric_err, abs(mt.roc_auc(scores, labels) - want_auc))
            order = sorted(range(n), key=lambda i: (-scores[i], i))
            hits, ap_sum = 0, 0.0
            for rank, i in enumerate(order, start=1):
                if labels[i] == 1:
                    hits += 1
                    ap_sum += hits / rank
            want_ap = ap_sum / labels.sum()
            metric_err = max(metric_err,
                             abs(mt.average_precision(scores, labels) - want_ap))

        elapsed = time.perf_counter() - start
        ok = (topk_ok and att_err <= 1e-12 and mem_err <= 1e-12
              and conv_err <= 1e-12 and metric_err <= 1e-12 and elapsed < 60.0)
        _report("criterion 2 (oracle equivalence)", ok,
                f"topk exact={topk_ok}, attention {att_err:.1e}, memory {mem_err:.1e}, "
                f"conv1d {conv_err:.1e}, metrics {metric_err:.1e}, {elapsed:.1f}s (< 60s)")


class TestCriterion3SyntheticEndToEnd:
    def test_heldout_frame_metrics(self, synth_dataset, trained):
        bags, oracle = synth_dataset
        report, _ = evaluate_bags(trained.model, bags)
        test_ids = {b.video_id for b in bags if b.split == "test"}
        oracle_auc = mt.roc_auc(
            np.concatenate([oracle.scores[v] for v in sorted(test_ids)]),
            np.concatenate([oracle.labels[v] for v in sorted(test_ids)]))
        ok = (report.auc >= AUC_TARGET and report.ap >= AP_TARGET
              and oracle_auc > 0.99 and trained.wall_seconds < 600.0)
        _report("criterion 3 (synthetic end-to-end)", ok,
                f"AUC {report.auc:.4f} (>= {AUC_TARGET}), AP {report.ap:.4f} "
                f"(>= {AP_TARGET}), oracle AUC {oracle_auc:.4f}, "
                f"train {trained.wall_seconds:.0f}s (< 600s)")

    def test_smoothing_regression_guard(self, synth_dataset, trained):
        bags, _ = synth_dataset
        base, _ = evaluate_bags(trained.model, bags, kappa=1)
        smoothed, _ = evaluate_bags(trained.model, bags, kappa=2)
        drop = base.auc - smoothed.auc
        _report("criterion 3b (kappa=2 regression guard)", drop <= 0.02,
                f"AUC drop {drop:+.4f} (<= 0.02)")


class TestCriterion4AblationDirection:
    def test_full_configuration_dominates(self, synth_dataset, trained):
        bags, _ = synth_dataset
        full_report, _ = evaluate_bags(trained.model, bags)
        rows = [f"full={full_report.auc:.4f}"]
        ok = True
        for toggle in ("tca", "topk", "mhsa", "dmu", "mc"):
            result = _train_full(bags, disabled=(toggle,))
            report, _ = evaluate_bags(result.model, bags)
            rows.append(f"-{toggle}={report.auc:.4f}")
            ok &= full_report.auc >= report.auc - ABLATION_SLACK
        no_ss, _ = evaluate_bags(trained.model, bags, use_ss=False)
        rows.append(f"-ss={no_ss.auc:.4f}")
        ok &= full_report.auc >= no_ss.auc - ABLATION_SLACK
        _report("criterion 4 (ablation ordering)", ok, " ".join(rows))


class TestCriterion5Determinism:
    def test_bitwise_repeat(self, synth_dataset, trained):
        bags, _ = synth_dataset
        repeat = _train_full(bags)
        logs_equal = trained.history == repeat.history
        r1, _ = evaluate_bags(trained.model, bags)
        r2, _ = evaluate_bags(repeat.model, bags)
        reports_equal = r1.to_dict() == r2.to_dict()
        _report("criterion 5 (determinism)", logs_equal and reports_equal,
                f"loss logs identical={logs_equal}, reports identical={reports_equal}")


class TestCriterion6FormatStability:
    def test_round_trips_and_corruption(self, tmp_path):
        rng = np.random.default_rng(42)
        path = tmp_path / "probe.wsvf"
        round_trips_ok = True
        for _ in range(10_000):
            t = int(rng.integers(1, 17))
            c = 1 if rng.random() < 0.8 else 5
            d = int(rng.integers(1, 33))
            seq = fs.FeatureSequence("rgb_i3d",
                                     rng.normal(size=(t, c, d)).astype(np.float32))
            fs.write_features(seq, path)
            back = fs.read_features(path)
            round_trips_ok &= back.data.tobytes() == seq.data.tobytes()

        fs.write_features(fs.FeatureSequence(
            "rgb_i3d", rng.normal(size=(4, 1, 8)).astype(np.float32)), path)
        pristine = path.read_bytes()
        corrupt_ok = True
        for _ in range(2_000):
            raw = bytearray(pristine)
            for _ in range(int(rng.integers(1, 5))):
                raw[int(rng.integers(0, fs.HEADER.size))] = int(rng.integers(0, 256))
            path.write_bytes(bytes(raw))
            try:
                fs.read_features(path)
            except (FormatError, FeatureIOError):
                pass
            except Exception:
                corrupt_ok = False
        _report("criterion 6 (format stability)", round_trips_ok and corrupt_ok,
                f"10000 round trips bit-exact={round_trips_ok}, "
                f"2000 corruptions typed={corrupt_ok}")


class TestCriterion7LossIdentities:
    def test_identities(self):
        perfect = mem.DualMemoryScores(
            s_nn=[ad.tensor(np.full((4, 3), 1.0 - 1e-7))],
            s_na=[ad.tensor(np.full((4, 3), 1e-7))],
            s_an=[ad.tensor(np.full((4, 3), 1.0 - 1e-7))],
            s_aa=[ad.tensor(np.full((4, 3), 1.0 - 1e-7))])
        dm_zero = mem.dual_memory_loss(perfect, top_k=2).item() < 1e-5

        rng = np.random.default_rng(1)
        vals = rng.uniform(0.5, 2.0, size=5)
        linear = True
        for lam_name in ("lam_kd", "lam_mc", "lam_dm", "lam_kl"):
            probes = []
            for lam in (0.0, 1.0, 2.0):
                kw = {"lam_kd": 1.0, "lam_mc": 1.0, "lam_dm": 1.0, "lam_kl": 1.0,
                      lam_name: lam}
                parts = [ad.tensor(v, dtype=np.float64) for v in vals]
                total, _ = ls.total_loss(*parts, ls.LossWeights(**kw))
                probes.append(total.item())
            linear &= abs((probes[2] - probes[1]) - (probes[1] - probes[0])) < 1e-9

        s = rng.uniform(size=17)
        identity = np.array_equal(mt.smooth_scores(s, 1), s)
        _report("criterion 7 (loss identities)", dm_zero and linear and identity,
                f"dm@perfect<1e-5={dm_zero}, lambda-linear={linear}, "
                f"kappa1-identity={identity}")
