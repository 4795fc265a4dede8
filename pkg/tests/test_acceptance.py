"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""
import random
import time
from fractions import Fraction
from pathlib import Path

import pytest

from cpplan import cli
from cpplan.comm import build_transfer_tables, compute_kv_demands, redundancy_report
from cpplan.dispatch import (
    DISPATCHERS,
    DispatchChunk,
    DispatchPlan,
    brute_force_dispatch,
    greedy_dispatch,
    shard_into_chunks,
    zigzag_dispatch,
)
from cpplan.errors import ConstraintViolation
from cpplan.mask import NAMED_PATTERNS, AttnMask, AttnSlice, SliceMaskType, TokenRange, build_named_mask
from cpplan.metrics import WorkloadSpec, flops
from cpplan.overlap import Affine, CostModel, OverlapParams, rank_work, solve_stages
from cpplan.packing import OnlinePacker, PackingConfig, lognormal_stream
from cpplan.pipeline import load_config, parse_scenario, run_sweep, simulate
from cpplan.sim import COMPUTE, cso_steps, simulate_cso, simulate_magi, simulate_ulysses

from oracles import balanced_optimum, consumers_dense, dense_pattern

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_criterion_01_causal_ring_redundancy(criterion):
    t0 = time.perf_counter()
    mask = build_named_mask("causal", {"seqlen": 8})
    plan = zigzag_dispatch(shard_into_chunks(mask, 1), 4)
    report = redundancy_report(mask, plan)
    ratio = Fraction(report.sent_ring - report.needed, report.sent_ring)
    elapsed = time.perf_counter() - t0
    ok = (report.sent_ring, report.sent_group, ratio) == (24, 18, Fraction(1, 4)) and elapsed < 1
    criterion(1, "causal 8 chunks zigzag cp=4", ok,
              f"ring {report.sent_ring}, group-cast {report.sent_group}, ratio {ratio} ({elapsed:.3f}s)")
    assert ok


def test_criterion_02_varlen_last_global_redundancy(criterion):
    t0 = time.perf_counter()
    params = {"lengths": [12, 4], "block": 4}
    mask = build_named_mask("varlen_block_causal_last_global", params)
    plan = zigzag_dispatch(shard_into_chunks(mask, 2), 4)
    report = redundancy_report(mask, plan)
    cast, _ = build_transfer_tables(compute_kv_demands(mask, plan), 2, 4)
    dense_needed = sum(len(c) for c in consumers_dense(
        dense_pattern("varlen_block_causal_last_global", **params), plan.assignment, 2))
    group_redundancy = Fraction(report.sent_group - report.needed, report.sent_group)
    elapsed = time.perf_counter() - t0
    ok = (group_redundancy == 0 and report.needed == dense_needed
          and cast.total_volume == 2 * report.sent_group
          and report.redundancy_ratio > 0.33 and elapsed < 1)
    criterion(2, "varlen block-causal + last global block, lengths [12, 4], block 4, 8 chunks, cp=4", ok,
              f"group-cast redundancy {group_redundancy}, ring {report.sent_ring} vs needed {report.needed} "
              f"-> ring redundancy {report.redundancy_ratio:.4f} ({elapsed:.3f}s)")
    assert ok


def test_criterion_03_greedy_quality(criterion):
    t0 = time.perf_counter()
    rng = random.Random(2024)
    ratios, oracle_mismatch = [], 0
    for _ in range(1000):
        cp = rng.randint(1, 4)
        n = cp * rng.randint(1, 12 // cp)
        areas = [rng.randint(1, 1000) for _ in range(n)]
        chunks = [DispatchChunk(i, TokenRange(i, i + 1), a) for i, a in enumerate(areas)]
        opt = brute_force_dispatch(chunks, cp).max_workload
        oracle_mismatch += opt != balanced_optimum(areas, cp)
        ratios.append(greedy_dispatch(chunks, cp).max_workload / opt)
    hand = [DispatchChunk(i, TokenRange(i, i + 1), a) for i, a in enumerate([8, 7, 6, 5, 4, 3, 2, 1])]
    g, b = greedy_dispatch(hand, 2).max_workload, brute_force_dispatch(hand, 2).max_workload
    mean, worst = sum(ratios) / len(ratios), max(ratios)
    elapsed = time.perf_counter() - t0
    ok = mean <= 1.05 and worst <= 1.34 and g == b == 18 and oracle_mismatch == 0 and elapsed < 30
    criterion(3, "greedy vs optimum over 1000 instances (n <= 12, cp <= 4)", ok,
              f"mean {mean:.4f}, max {worst:.4f}, hand instance {g} vs {b}, "
              f"optimum/oracle mismatches {oracle_mismatch} ({elapsed:.1f}s)")
    assert ok


def test_criterion_04_dispatch_constraints(criterion, tmp_path, capsys):
    import yaml

    checked = violations = 0
    for pattern in sorted(NAMED_PATTERNS):
        for cp in (1, 2, 4, 8):
            for chunk in (2, 4, 8):
                seqlen = 128
                params = {"seqlen": seqlen, "block": 8, "window": 9, "lengths": [40, 8, 64, 16]}
                mask = build_named_mask(pattern, params)
                for name, dispatcher in sorted(DISPATCHERS.items()):
                    chunks = shard_into_chunks(mask, chunk)
                    n = len(chunks)
                    if name == "brute_force" and (n > 16 or cp > 4):
                        continue
                    if name == "zigzag" and n % (2 * cp):
                        continue
                    plan = dispatcher(chunks, cp)
                    checked += 1
                    sizes = [len(b) for b in plan.buckets()]
                    if sizes != [n // cp] * cp or seqlen % (cp * plan.chunk_size):
                        violations += 1
    codes = []
    bad_configs = [
        {"mask": {"pattern": "causal", "params": {"seqlen": 10}}, "cp_size": 4, "dispatch": {"chunk_size": 1}},
        {"mask": {"pattern": "causal", "params": {"seqlen": 64}}, "cp_size": 4, "dispatch": {"chunk_size": 32}},
        {"mask": {"pattern": "full", "params": {"seqlen": 24}}, "cp_size": 2,
         "dispatch": {"chunk_size": 4, "algorithm": "zigzag"}},
    ]
    for i, cfg in enumerate(bad_configs):
        path = tmp_path / f"bad{i}.yaml"
        path.write_text(yaml.safe_dump(cfg))
        codes.append(cli.main(["plan", "--config", str(path), "--out", str(tmp_path / "o")]))
    capsys.readouterr()
    try:
        DispatchPlan(2, 1, [0, 0, 0, 1], [1, 1, 1, 1])
        codes.append(0)
    except ConstraintViolation:
        codes.append(3)
    ok = violations == 0 and checked > 0 and codes == [3, 3, 3, 3]
    criterion(4, "dispatch cardinality and divisibility", ok,
              f"{checked} plans checked, {violations} violations; violation exit codes {codes}")
    assert ok


def _random_triple(rng):
    cp = rng.randint(1, 4)
    per = rng.randint(1, 4)
    chunk = rng.randint(1, 6)
    n = cp * per
    seqlen = n * chunk
    slices = []
    for _ in range(rng.randint(1, 5)):
        a, b = sorted(rng.randint(0, seqlen) for _ in range(2))
        c, d = sorted(rng.randint(0, seqlen) for _ in range(2))
        slices.append(AttnSlice(TokenRange(a, b), TokenRange(c, d), rng.choice(list(SliceMaskType))))
    mask = AttnMask(seqlen, seqlen, tuple(slices))
    assignment = [r for r in range(cp) for _ in range(per)]
    rng.shuffle(assignment)
    plan = DispatchPlan(cp, chunk, assignment, [c.area for c in shard_into_chunks(mask, chunk)])
    model = CostModel(
        ffa_fwd=Affine(rng.randint(0, 3), rng.choice([1, 0.5, 0.37])),
        ffa_bwd=Affine(rng.randint(0, 3), rng.choice([2.5, 1, 0.9])),
        cast=Affine(rng.randint(0, 4), rng.choice([0, 0.5, 1, 3])),
        reduce=Affine(rng.randint(0, 4), rng.choice([0, 0.5, 1, 3])),
    )
    params = OverlapParams(rng.randint(1, 6), rng.randint(1, 8))
    return mask, plan, model, params


def test_criterion_05_estimate_matches_simulation(criterion):
    t0 = time.perf_counter()
    rng = random.Random(55)
    mismatches = covered = exposed_ok = 0
    for _ in range(200):
        mask, plan, model, params = _random_triple(rng)
        cast, _ = build_transfer_tables(compute_kv_demands(mask, plan), plan.chunk_size, plan.cp_size)
        solved = solve_stages([rank_work(mask, plan, cast, r) for r in range(plan.cp_size)], model, params)
        for pass_ in ("fwd", "bwd"):
            rep = simulate_magi(mask, plan, cast, solved, model, pass_=pass_)
            for sp in solved.plans:
                est = sp.est_cost_fwd if pass_ == "fwd" else sp.est_cost_bwd
                mismatches += rep.timeline.rank_end(sp.rank) != est
            est_global = max(p.est_cost_fwd if pass_ == "fwd" else p.est_cost_bwd for p in solved.plans)
            mismatches += rep.makespan != est_global
            if pass_ == "bwd":
                for sp in solved.plans:
                    c = sp.costs_bwd
                    if all(c.cf(j) >= max(c.gc(j + 1), c.gr(j - 1)) for j in range(c.s + 1)):
                        covered += 1
                        tl = rep.timeline
                        exposed_ok += tl.rank_end(sp.rank) - tl.busy(sp.rank, COMPUTE) == c.gr(c.s)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and exposed_ok == covered and covered > 0 and elapsed < 60
    criterion(5, "staged estimate equals simulated makespan, 200 random triples", ok,
              f"{mismatches} mismatches; final-reduce-only exposure on {exposed_ok}/{covered} covered ranks "
              f"({elapsed:.1f}s)")
    assert ok


def test_criterion_06_flops_closed_forms(criterion):
    params = {
        "full": dict(seqlen=256), "causal": dict(seqlen=256),
        "sliding_window_causal": dict(seqlen=256, window=31), "block_causal": dict(seqlen=256, block=16),
        "varlen_full": dict(lengths=[100, 56, 100]), "varlen_causal": dict(lengths=[13, 200, 43]),
        "varlen_block_causal": dict(lengths=[64, 96, 96], block=32),
        "varlen_block_causal_last_global": dict(lengths=[64, 96, 96], block=32),
    }
    w = WorkloadSpec(batch_size=1, num_heads_q=64, head_dim=128)
    bad = []
    for pattern, p in params.items():
        cells = int(dense_pattern(pattern, **p).sum())
        mask = build_named_mask(pattern, p)
        if flops(mask, w, "fwd") != 4 * cells * 64 * 128 or flops(mask, w, "bwd") * 2 != 5 * flops(mask, w, "fwd"):
            bad.append(pattern)
    big = build_named_mask("full", {"seqlen": 4096})
    f, b = flops(big, w, "fwd"), flops(big, w, "bwd")
    ok = not bad and set(params) == set(NAMED_PATTERNS) and f == 549_755_813_888 and b == 1_374_389_534_720
    criterion(6, "FLOPs from areas", ok,
              f"{len(params) - len(bad)}/{len(params)} patterns match dense enumeration; full 4096 fwd {f}, bwd {b}")
    assert ok


def test_criterion_07_packing_utilization(criterion):
    t0 = time.perf_counter()
    cfg = PackingConfig(max_length=65536, bins_per_iteration=32, pool_capacity=512, dp_size=4, cp_size=8)
    packer = OnlinePacker(cfg)
    batches = list(packer.run(lognormal_stream(100_000, median=4096, sigma=1.0, seed=0)))
    stats = packer.stats()
    violations = sum(f > cfg.max_length for b in batches for f in b.fills)
    elapsed = time.perf_counter() - t0
    ok = stats.mean >= 0.99 and violations == 0 and stats.dp_spread < 0.01 and elapsed < 60
    criterion(7, "online packing, 1e5 lognormal samples, 64k bins, N=32, M=512", ok,
              f"mean {stats.mean:.5f}, min {stats.min:.5f}, dp spread {stats.dp_spread:.5f}, "
              f"{violations} capacity violations, {stats.batches} batches, {len(packer.skipped)} oversize skipped "
              f"({elapsed:.1f}s)")
    assert ok


def test_criterion_08_scaling_signature(criterion):
    sc = parse_scenario(load_config(CONFIGS / "scaling_varlen_full.yaml"))
    records = run_sweep(sc, jobs=1)
    cps = [1, 2, 4, 8]

    def curve(schedule, pass_):
        by_cp = {r["cp_size"]: r for r in records if r["schedule"] == schedule and r["pass"] == pass_}
        return [by_cp[cp] for cp in cps]

    def spread(values):
        return (max(values) - min(values)) / max(values)

    magi = {p: [r["tflops_per_gpu"] for r in curve("magi", p)] for p in ("fwd", "bwd")}
    ring = {p: [r["tflops_per_gpu"] for r in curve("ring", p)] for p in ("fwd", "bwd")}
    ring_total = [
        (f["flops_total"] + b["flops_total"]) / ((f["makespan"] + b["makespan"]) * f["cp_size"])
        for f, b in zip(curve("ring", "fwd"), curve("ring", "bwd"))
    ]
    magi_ok = all(spread(v) <= 0.05 for v in magi.values())
    strictly = lambda v: all(b < a for a, b in zip(v, v[1:]))  # noqa: E731
    ring_ok = (strictly(ring_total) and strictly(ring["bwd"])
               and all(all(b <= a for a, b in zip(v, v[1:])) and v[-1] < v[0] for v in ring.values()))
    fmt = lambda v: "[" + ", ".join(f"{x:.1f}" for x in v) + "]"  # noqa: E731
    ok = magi_ok and ring_ok
    criterion(8, "per-GPU throughput vs cp in {1,2,4,8}, 64k tokens per rank, varlen full", ok,
              f"magi fwd {fmt(magi['fwd'])} bwd {fmt(magi['bwd'])} (spread {spread(magi['fwd']):.4f}/"
              f"{spread(magi['bwd']):.4f}); ring fwd {fmt(ring['fwd'])} bwd {fmt(ring['bwd'])}, "
              f"fwd+bwd strictly decreasing: {strictly(ring_total)}")
    assert ok


def test_criterion_09_ulysses_and_cso(criterion):
    t0 = time.perf_counter()
    w = WorkloadSpec()
    cheap = CostModel(phases={**CostModel().phases, "a2a": Affine(0, 1e-4)})
    hidden = simulate_ulysses(build_named_mask("full", {"seqlen": 8192}), w, cheap, 8).exposed_comm
    shipped = [r for r in simulate(parse_scenario(load_config(CONFIGS / "ulysses_full_64k.yaml")))
               if r["schedule"] == "ulysses"][0]
    expected = [
        ((("k_comm", 0), ("v_comm", 0)), (("q_compute", 0),)),
        ((("q_comm", 1),), (("kv_cache_update", 0),)),
        ((("q_comm", 2),), (("o_compute", 1),)),
        ((("q_comm", 3), ("o_comm", 1)), (("o_compute", 2),)),
        ((("q_comm", 4), ("o_comm", 2)), (("o_compute", 3),)),
        ((("q_comm", 5), ("o_comm", 3)), (("o_compute", 4),)),
        ((("o_comm", 4),), (("o_compute", 5),)),
        ((("o_comm", 5),), (("cross_attn", 0),)),
    ]
    listing_ok = cso_steps(5) == expected
    slow = CostModel().scaled_comm(10)
    worse = []
    for pattern in ("full", "causal"):
        for seqlen in (8192, 32768, 65536):
            for cp in (2, 4, 8):
                mask = build_named_mask(pattern, {"seqlen": seqlen})
                c, u = simulate_cso(mask, w, slow, cp).makespan, simulate_ulysses(mask, w, slow, cp).makespan
                if c > u:
                    worse.append((pattern, seqlen, cp, c, u))
    elapsed = time.perf_counter() - t0
    ok = hidden == 0 and shipped["exposed_comm_fraction"] < 0.03 and listing_ok and not worse and elapsed < 10
    criterion(9, "Ulysses and context-shuffle schedules", ok,
              f"hidden-comm exposure {hidden}; shipped full-64k cp=8 exposure "
              f"{100 * shipped['exposed_comm_fraction']:.2f}%; 5-chunk listing {'matches' if listing_ok else 'differs'}; "
              f"CSO slower than Ulysses in {len(worse)}/18 low-bandwidth cases ({elapsed:.1f}s)")
    assert ok


def test_criterion_10_determinism(criterion, tmp_path, capsys):
    import yaml

    small_pack = yaml.safe_load((CONFIGS / "pack_longtail.yaml").read_text())
    small_pack["stream"]["count"] = 5000
    pack_cfg = tmp_path / "pack.yaml"
    pack_cfg.write_text(yaml.safe_dump(small_pack))
    sweep_cfg = tmp_path / "sweep.yaml"
    sweep_cfg.write_text(yaml.safe_dump({
        "schedules": ["magi", "ring"],
        "sweep": {"cp_sizes": [1, 2, 4], "per_rank_seqlen": 4096, "pattern": "varlen_causal",
                  "docs": {"median": 512, "sigma": 1.0}, "chunks_per_rank": 8},
    }))
    commands = {
        "mask": ["mask", "--pattern", "varlen_block_causal_last_global", "--lengths", "12,4", "--block", "4"],
        "plan": ["plan", "--config", str(CONFIGS / "causal_comm_heavy.yaml"), "--seed", "5"],
        "simulate": ["simulate", "--config", str(CONFIGS / "cso_low_bandwidth.yaml"), "--format", "csv"],
        "pack": ["pack", "--config", str(pack_cfg), "--seed", "11"],
        "sweep": ["sweep", "--config", str(sweep_cfg), "--seed", "3", "--jobs", "2"],
    }
    differing = []
    for name, argv in commands.items():
        outputs = []
        for attempt in range(2):
            extra = ["--out", str(tmp_path / f"{name}{attempt}")] if name == "plan" else []
            code = cli.main(argv + extra)
            out = capsys.readouterr().out
            files = {}
            if name == "plan":
                files = {p.name: p.read_bytes() for p in sorted((tmp_path / f"{name}{attempt}").iterdir())}
            outputs.append((code, out, files))
        if outputs[0] != outputs[1] or outputs[0][0] != 0:
            differing.append(name)
    ok = not differing
    criterion(10, "byte-identical reruns", ok,
              f"{len(commands) - len(differing)}/{len(commands)} commands identical"
              + (f"; differing: {differing}" if differing else ""))
    assert ok
