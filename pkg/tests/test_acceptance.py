"""Acceptance criteria 1-10, each run at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line (visible with or
without ``-s``) and then asserts, so a failure is both reported and fatal.
Criteria 4 and 6-8 run the full 100-epoch, 8-worker desk scenario from
``configs/acceptance.ini`` and take a few minutes in total.
"""
import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

from maskreduce import codec, harness
from maskreduce.collective import SyncMode, masked_allreduce, ring_allreduce
from maskreduce.model import Mlp
from maskreduce.sparsity import PruneConfig, Status
from maskreduce.tensor import SparsityMask
from maskreduce.trainer import train
from maskreduce.transport import LinkModel, Topology, run_simulated, run_tcp

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "acceptance.ini"
LINK = LinkModel(100e6)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


@pytest.fixture(scope="module")
def scenario():
    return harness.parse_config(CONFIG)


@pytest.fixture(scope="module")
def experiment(scenario, tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    records = harness.run_experiment(dataclasses.replace(scenario, output=out), log=lambda *_: None)
    elapsed = time.perf_counter() - t0
    target = json.loads((out / "experiment.json").read_text())["target_accuracy"]
    return {r.mode: r for r in records}, target, elapsed


def _epochs_to(rows, target):
    return next((r["epoch"] for r in rows if r["test_acc"] >= target), None)


# 1 ---------------------------------------------------------------------

def test_criterion_1_lossless_roundtrip(report):
    rng = np.random.default_rng(101)
    lengths = (1, 7, 64, 4096, 1_000_000)
    pairs = 10_000
    # scratch buffers reused across pairs; fresh 4 MB arrays per pair cost more in page faults than the codec
    top = max(lengths)
    noise = np.empty(-(-top // 2), dtype=np.float64)
    grad_buf = np.empty(top, dtype=np.uint32)
    expect_buf = np.empty(top, dtype=np.uint32)
    diff_buf = np.empty(top, dtype=np.bool_)
    keep_buf = np.empty(top, dtype=np.bool_)
    raw = rng.bit_generator.random_raw
    bad = 0
    t0 = time.perf_counter()
    for i in range(pairs):
        n = lengths[i % len(lengths)]
        # uniform doubles reinterpreted as 32-bit words, top exponent bit cleared: finite floats of both
        # signs and many magnitudes, including denormals
        rng.random(out=noise[:-(-n // 2)])
        g_bits = np.bitwise_and(noise.view(np.uint32)[:n], np.uint32(0xBFFFFFFF), out=grad_buf[:n])
        g = g_bits.view(np.float32)
        keep = np.less(raw(-(-n // 8)).view(np.uint8)[:n], rng.integers(0, 257), out=keep_buf[:n])
        mask = SparsityMask(keep)
        out = codec.unpack(codec.pack(g, mask), mask)
        # oracle: bit patterns times 0/1 (independent of the AND-based kernels), so cleared slots are +0.0
        expect = np.multiply(g_bits, keep.view(np.uint8), out=expect_buf[:n])
        bad += bool(np.not_equal(out.view(np.uint32), expect, out=diff_buf[:n]).any())
    elapsed = time.perf_counter() - t0
    report(1, bad == 0 and elapsed < 30, f"{pairs} pairs, {bad} mismatches, {elapsed:.1f}s (limit 30s)")


# 2 ---------------------------------------------------------------------

def _ring(comm, x):
    return ring_allreduce(x, comm)


def test_criterion_2_ring_allreduce(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for n in (2, 4, 8):
        for _ in range(5):
            xs = [rng.standard_normal(4096).astype(np.float32) for _ in range(n)]
            seq = np.zeros(4096, dtype=np.float64)
            for x in xs:
                seq += x
            for out in run_simulated(Topology.uniform(n, LINK), _ring, [(x,) for x in xs]):
                worst = max(worst, float(np.linalg.norm(out - seq) / np.linalg.norm(seq)))
    xs = [rng.standard_normal(4096).astype(np.float32) for _ in range(4)]
    topo = Topology.uniform(4, LINK)
    tcp = run_tcp(topo, _ring, [(x,) for x in xs])
    sim = run_simulated(topo, _ring, [(x,) for x in xs])
    tcp_rel = max(float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-30))) for a, b in zip(tcp, sim))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and tcp_rel <= 1e-5 and elapsed < 60
    report(2, ok, f"worst rel err {worst:.2e} (n=2,4,8), tcp vs sim {tcp_rel:.1e}, {elapsed:.1f}s (limit 60s)")


# 3 ---------------------------------------------------------------------

def test_criterion_3_ternary_unbiased(report):
    g = np.array([0.3, -0.7, 0.05], dtype=np.float32)
    draws = 200_000
    total = np.zeros(3)
    for seed in range(draws):
        total += codec.deternarize(codec.ternarize(g, seed))
    mean = total / draws
    g64 = g.astype(np.float64)
    s = np.max(np.abs(g64))
    se = np.sqrt((s * np.abs(g64) - g64 ** 2) / draws)
    err = np.abs(mean - g64)
    # the largest-magnitude element is encoded deterministically (SE 0), so it must be exact
    ok = bool(np.all(np.where(se > 0, err <= 3 * se, err == 0)))
    z = np.divide(err, se, out=np.zeros(3), where=se > 0)
    report(3, ok, f"{draws} draws, |mean-g|/SE = {np.round(z, 2).tolist()} (limit 3)")


# 4 ---------------------------------------------------------------------

def test_criterion_4_gse_persistence(report, scenario):
    cfg = scenario.cell_config(harness.ModeSpec.parse("packed"))
    assert cfg.prune.ratio == 0.5 and cfg.workers == 8 and cfg.epochs == 100
    violations, checks = [], [0]

    def check(rank, epoch, params, mask):
        checks[0] += 1
        violations.append(int(np.count_nonzero(params[~mask.bits])))
        if mask.nnz != len(mask) - len(mask) // 2:
            violations.append(-1)

    train(cfg, LINK, on_epoch_end=check)
    ok = checks[0] == 800 and sum(violations) == 0
    report(4, ok, f"{checks[0]} rank-epoch boundaries checked, {sum(violations)} nonzero pruned weights")


# 5 ---------------------------------------------------------------------

def _masked(comm, g, mask, status):
    return masked_allreduce(g, mask, status, comm)


def test_criterion_5_byte_proportionality(report):
    length, n = 1_000_000, 4
    rng = np.random.default_rng(505)
    g = rng.standard_normal(length).astype(np.float32)
    topo = Topology.uniform(n, LINK)
    full = run_simulated(topo, _masked, [(g, SparsityMask.ones(length), Status.UNSTABLE)] * n)[0][1].bytes_on_wire
    lines, ok = [], True
    for ratio in (0.5, 0.8, 0.9):
        mask = SparsityMask(rng.permutation(length) >= int(ratio * length))
        gm = np.where(mask.bits, g, 0).astype(np.float32)
        out = run_simulated(topo, _masked, [(gm, mask, Status.STABLE)] * n)
        frac = out[0][1].bytes_on_wire / full
        ok &= out[0][1].mode_used is SyncMode.PACKED and frac <= (1 - ratio) + 0.01
        lines.append(f"r={ratio}: {frac:.4f}")
    report(5, ok, "packed/full bytes " + ", ".join(lines))


# 6 ---------------------------------------------------------------------

def test_criterion_6_tta_trend(report, experiment):
    recs, target, elapsed = experiment
    full, packed, tern = (recs[m].tta_seconds for m in ("full", "packed", "packed+ternary"))
    ok = None not in (full, packed, tern) and packed <= 0.7 * full and tern <= 0.4 * full and elapsed < 600
    def ratio(x):
        return f"{x / full:.3f}" if full and x else "n/a"

    detail = (f"target {target:.4f}; TTA full {full}, packed {packed}, packed+ternary {tern}; "
              f"ratios {ratio(packed)} (<=0.7), {ratio(tern)} (<=0.4); experiment {elapsed:.0f}s")
    report(6, ok, detail)


# 7 ---------------------------------------------------------------------

def test_criterion_7_pruning_accuracy(report, scenario, experiment):
    recs, _, _ = experiment
    dense = recs["full"].final_accuracy
    at_half = recs["packed"].final_accuracy
    cfg = scenario.cell_config(harness.ModeSpec.parse("packed"))
    cfg = cfg.with_(prune=dataclasses.replace(cfg.prune, ratio=0.8))
    at_08 = train(cfg, LINK).metrics[-1].test_accuracy
    ok = dense - at_half <= 0.02 and dense - at_08 <= 0.05
    report(7, ok, f"dense {dense:.4f}, ratio 0.5 {at_half:.4f} (drop {dense - at_half:+.4f} <= 0.02), "
                  f"ratio 0.8 {at_08:.4f} (drop {dense - at_08:+.4f} <= 0.05)")


# 8 ---------------------------------------------------------------------

def test_criterion_8_topk_information_loss(report, experiment):
    recs, target, _ = experiment
    e_topk = _epochs_to(recs["topk@0.01"].rows, target)
    e_packed = _epochs_to(recs["packed"].rows, target)
    ok = e_packed is not None and (e_topk is None or e_topk > e_packed)
    report(8, ok, f"epochs to target: topk@0.01 {e_topk if e_topk is not None else 'never'}, packed {e_packed}")


# 9 ---------------------------------------------------------------------

def _hidden_pattern(model, params, features):
    w, b = model._layers(params)[0]
    return (features @ w + b) > 0


def _central_difference(model, p, i, step, batch):
    e = np.zeros_like(p)
    e[i] = step
    return (model.loss_and_grad(p + e, batch)[0] - model.loss_and_grad(p - e, batch)[0]) / (2 * step), e


def test_criterion_9_gradient_correctness(report):
    rng = np.random.default_rng(909)
    worst, refined = 0.0, 0
    for trial in range(10):
        model = Mlp.initialize((64, 128, 10), seed=trial)
        batch = (rng.standard_normal((16, 64)), rng.integers(0, 10, 16))
        p = model.params.astype(np.float64)
        _, grad = model.loss_and_grad(p, batch)
        for i in rng.choice(len(p), 50, replace=False):
            fd, e = _central_difference(model, p, i, 1e-3, batch)
            # a probe that flips a ReLU is differencing across a kink; shrink it until both sides agree
            step = 1e-3
            while step > 1e-9 and not np.array_equal(_hidden_pattern(model, p + e, batch[0]),
                                                     _hidden_pattern(model, p - e, batch[0])):
                step /= 10
                fd, e = _central_difference(model, p, i, step, batch)
            refined += step < 1e-3
            worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8))
    report(9, worst <= 1e-3, f"500 coordinates over 10 models, worst relative error {worst:.2e} (limit 1e-3); "
                             f"{refined} probes shortened to avoid a ReLU kink")


# 10 --------------------------------------------------------------------

def test_criterion_10_fallback_safety(report, scenario):
    rng = np.random.default_rng(1010)
    cfg = scenario.cell_config(harness.ModeSpec.parse("packed")).with_(epochs=12)
    bad_epoch = int(rng.integers(1, cfg.epochs))
    bad_rank = int(rng.integers(0, cfg.workers))
    bad_bit = int(rng.integers(0, 64 * 128))

    def diverge(rank, epoch, it, mask):
        return mask.with_flipped(bad_bit) if rank == bad_rank and epoch >= bad_epoch else mask

    try:
        faulty = train(cfg, LINK, fault=diverge)
    except Exception as exc:  # noqa: BLE001
        report(10, False, f"run crashed: {type(exc).__name__}: {exc}")
        return
    reference = train(cfg, LINK, schedule=lambda e: SyncMode.FULL if e >= bad_epoch else SyncMode.PACKED)
    same = all(a.params.tobytes() == b.params.tobytes() for a, b in zip(faulty.workers, reference.workers))
    fell_back = all(m.mode_histogram.get("fallback", 0) > 0 for m in faulty.metrics[bad_epoch:])
    report(10, same and fell_back, f"mask diverged on rank {bad_rank} from epoch {bad_epoch}: no crash, "
                                   f"fallback engaged {fell_back}, final weights identical to Full re-run {same}")


def test_ternary_path_used_in_scenario(experiment):
    recs, _, _ = experiment
    assert recs["packed+ternary"].rows[-1]["mode"] == "packed+ternary"
    assert recs["packed"].rows[-1]["mode"] == "packed"


def test_prune_config_of_scenario():
    cfg = harness.parse_config(CONFIG)
    assert cfg.train.prune == PruneConfig(0.5, method="grasp", scope="global")
    assert cfg.bandwidths == (100e6,) and cfg.train.compute_seconds_per_iteration == 0
