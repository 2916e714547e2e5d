"""Release gate: eleven end-to-end checks over the whole stack.

Each test prints exactly one PASS/FAIL line (straight to the terminal, past
pytest's capture) so the gate can be read at a glance. Tests are ordered and
independent; every one re-derives what it needs from scratch.
"""

import itertools
import json
import time
from pathlib import Path

import numpy as np

from edgerun.audio import AudioClip, SAMPLE_RATE, mfcc
from edgerun.bench import benchmark
from edgerun.executor import (
    default_assignment,
    execute,
    prepare,
    reference_execute,
)
from edgerun.graph import CONVOLUTION, count_flops, model_size_bytes
from edgerun.kernels import default_registry, implementations_for
from edgerun.netbuilder import Candidate, build_preset, pareto_frontier
from edgerun.passes import CompileOptions, compile_graph, naive_plan
from edgerun.quantizer import calibrate, quantize, quantized_payload_bytes
from edgerun.search import (
    QTable,
    SearchConfig,
    brute_force,
    greedy_rollout,
    search,
)
from edgerun.workflow import ArtifactStore, WorkflowSpec, run_workflow

from conftest import make_conv_graph
from oracles import naive_conv, oracle_mfcc

SAMPLES_DIR = Path(__file__).resolve().parents[1] / "samples"


def announce(capsys, idx, title, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    tail = f"  ({detail})" if detail else ""
    with capsys.disabled():
        print(f"[{idx:2d}/11] {title:<46s} {status}{tail}")


def test_01_flop_accounting(capsys):
    t0 = time.perf_counter()
    published = {"kws1": 223.4, "kws3": 87.6, "kws9": 37.7}
    got = {name: count_flops(build_preset(name)).total_mflops
           for name in published}
    elapsed = time.perf_counter() - t0
    ok = (all(abs(got[n] - published[n]) <= 0.1 for n in published)
          and elapsed < 1.0)
    announce(capsys, 1, "conv FLOP reproduction (three presets)", ok,
             f"{got['kws1']:.2f}/{got['kws3']:.2f}/{got['kws9']:.2f} MFLOPs, "
             f"{elapsed:.2f}s")
    assert ok, got


def test_02_model_sizes(capsys):
    t0 = time.perf_counter()
    published_kb = {"kws1": 707.0, "kws3": 282.1, "kws9": 125.3}
    got_kb = {name: model_size_bytes(build_preset(name)) / 1000
              for name in published_kb}
    elapsed = time.perf_counter() - t0
    ok = (all(abs(got_kb[n] - published_kb[n]) / published_kb[n] < 0.02
              for n in published_kb) and elapsed < 1.0)
    announce(capsys, 2, "model size reproduction (2% band)", ok,
             f"{got_kb['kws1']:.1f}/{got_kb['kws3']:.1f}/"
             f"{got_kb['kws9']:.1f} KB, {elapsed:.2f}s")
    assert ok, got_kb


def test_03_quantized_payload_ratio(capsys):
    rng = np.random.default_rng(3)
    calib = [rng.standard_normal((1, 40, 32)).astype(np.float32)
             for _ in range(2)]
    ratios = {}
    ok = True
    for scheme, want in [("int16_sym", 0.50), ("int8_sym", 0.25)]:
        for name in ["kws1", "kws3", "kws9"]:
            g = build_preset(name, seed=1)
            q = quantize(g, calibrate(g, calib, scheme))
            r = quantized_payload_bytes(q) / quantized_payload_bytes(g)
            ratios[(scheme, name)] = r
            ok = ok and abs(r - want) <= 0.01
    announce(capsys, 3, "weight payload ratios (int16 0.50, int8 0.25)", ok,
             f"i16 {ratios[('int16_sym', 'kws1')]:.3f}, "
             f"i8 {ratios[('int8_sym', 'kws1')]:.3f}")
    assert ok, ratios


def _random_graph(rng):
    cin = int(rng.integers(1, 6))
    h = int(rng.integers(6, 15))
    w = int(rng.integers(6, 15))
    stages = []
    for _ in range(int(rng.integers(1, 4))):
        k_h, k_w = rng.choice([1, 3, 5]), rng.choice([1, 3, 5])
        s_h, s_w = [(1, 1), (1, 2), (2, 2)][int(rng.integers(0, 3))]
        stage = {"kh": int(k_h), "kw": int(k_w),
                 "out_channels": int(rng.integers(2, 9)),
                 "stride_h": s_h, "stride_w": s_w}
        if rng.random() < 0.3:
            prev = stages[-1]["out_channels"] if stages else cin
            stage["out_channels"] = prev
            stage["groups"] = prev
        stages.append(stage)
    tails = [(), ("relu",), ("pool",), ("pool", "flatten", "fc"),
             ("pool", "flatten", "fc", "softmax")]
    return make_conv_graph(
        stages, input_shape=(cin, h, w), seed=int(rng.integers(0, 10000)),
        bn_scale_relu=bool(rng.random() < 0.5),
        tail=tails[int(rng.integers(0, len(tails)))])


def test_04_compiled_graphs_match_reference(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    reg = default_registry()
    worst = 0.0
    ok = True
    for _ in range(100):
        g = _random_graph(rng)
        x = rng.standard_normal(g.input_desc.shape).astype(np.float32)
        want = reference_execute(g, x)
        plan = compile_graph(g)
        assignment = {}
        for node in plan.graph.nodes:
            if node.kind == "input":
                continue
            cands = implementations_for(reg, node, plan.graph)
            assignment[node.id] = cands[int(rng.integers(0, len(cands)))]
        ready = prepare(plan, assignment)
        got = execute(ready, assignment, x)
        tol = (1e-4 if "winograd_f32" in assignment.values() else 1e-5)
        rel = float(np.max(np.abs(got.astype(np.float64) - want))
                    / max(1.0, np.max(np.abs(want))))
        worst = max(worst, rel / tol)
        ok = ok and rel <= tol
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 120.0
    announce(capsys, 4, "100 random graphs: compiled == reference", ok,
             f"worst {worst:.2f}x of tolerance, {elapsed:.1f}s")
    assert ok


SHAPES = [(1, 1), (3, 3), (4, 10), (5, 5)]
STRIDES = [(1, 1), (1, 2), (2, 2)]
DRAWS = 50


def _run_conv(plan_cache, g, impl, x):
    nid = g.nodes[1].id
    key = impl
    if key not in plan_cache:
        plan = compile_graph(g, CompileOptions(fold=False, fuse=False))
        plan_cache[key] = prepare(plan, {nid: impl})
    return execute(plan_cache[key], {nid: impl}, x)


def test_05_conv_kernel_agreement(capsys):
    rng = np.random.default_rng(5)
    reg = default_registry()
    worst = {"f32": 0.0, "int": 0.0}
    ok = True
    checked = set()
    for (kh, kw), (sh, sw) in itertools.product(SHAPES, STRIDES):
        shape = (3, 12, 14)
        dense = make_conv_graph(
            [{"kh": kh, "kw": kw, "out_channels": 5,
              "stride_h": sh, "stride_w": sw}],
            input_shape=shape, seed=kh * 100 + kw + sh * 10 + sw)
        grouped = make_conv_graph(
            [{"kh": kh, "kw": kw, "out_channels": 4, "groups": 4,
              "stride_h": sh, "stride_w": sw}],
            input_shape=(4, 12, 14), seed=kh * 100 + kw + sh)
        for g in (dense, grouped):
            node = g.nodes[1]
            impls = implementations_for(reg, node, g)
            plan_cache = {}
            for _ in range(DRAWS):
                x = rng.standard_normal(g.input_desc.shape).astype(np.float32)
                want = reference_execute(g, x)
                for impl in impls:
                    got = _run_conv(plan_cache, g, impl, x)
                    tol = 1e-4 if impl == "winograd_f32" else 1e-5
                    rel = float(np.max(np.abs(got - want))
                                / max(1.0, np.max(np.abs(want))))
                    worst["f32"] = max(worst["f32"], rel / tol)
                    ok = ok and rel <= tol
                    checked.add(impl)

        # integer kernels: inputs drawn on the activation grid, agreement
        # within two output quantization steps. Calibration draws span a
        # wider range than the probes so no output ever clips.
        for scheme, impl in [("int16_sym", "gemm_i16"), ("int8_sym", "gemm_i8")]:
            calib = [rng.uniform(-1.0, 1.0, shape).astype(np.float32)
                     for _ in range(3)]
            q = quantize(dense, calibrate(dense, calib, scheme))
            nid = q.nodes[1].id
            s_in = q.quant.act_scales[0]
            s_w = q.quant.weight_scales[nid]
            s_out = q.quant.act_scales[nid]
            w = q.weights["c1_w"].data.astype(np.float64) * s_w
            b = q.weights["c1_b"].data.astype(np.float64)
            plan = prepare(compile_graph(q, CompileOptions(fold=False,
                                                           fuse=False)),
                           {nid: impl})
            for _ in range(DRAWS):
                codes = rng.integers(-80, 81, size=shape)
                x = (codes * s_in).astype(np.float32)
                want = naive_conv(x.astype(np.float64), w, b, (sh, sw),
                                  padding="same")
                got = execute(plan, {nid: impl}, x)
                err = float(np.max(np.abs(got - want)))
                worst["int"] = max(worst["int"], err / (2 * s_out))
                ok = ok and err <= 2 * s_out + 1e-9
                checked.add(impl)

    conv_impls = {i for i in reg.ids()
                  if CONVOLUTION in reg.descriptor(i).kinds}
    ok = ok and checked == conv_impls
    announce(capsys, 5, "every conv impl vs reference (12 shape grids)", ok,
             f"{len(checked)} impls, worst f32 {worst['f32']:.2f}x, "
             f"int {worst['int']:.2f}x of bound")
    assert ok, (sorted(conv_impls - checked), worst)


def test_06_memory_plan_and_poisoning(capsys):
    g = build_preset("kws1", seed=6)
    plan = compile_graph(g)
    peak = plan.memory.peak_bytes
    naive = naive_plan(plan.graph).peak_bytes
    asg = default_assignment(plan.graph)
    x = np.random.default_rng(6).standard_normal((1, 40, 32)).astype(
        np.float32)
    clean = execute(plan, asg, x, poison=False)
    poisoned = execute(plan, asg, x, poison=True)
    identical = np.array_equal(clean, poisoned)
    ok = peak < naive and identical
    announce(capsys, 6, "planned peak < naive; poisoning changes nothing", ok,
             f"{peak} < {naive} bytes, output bit-identical: {identical}")
    assert ok, (peak, naive, identical)


def _synthetic_measure(conv_ids, costs, penalty):
    def measure(assignment):
        total, prev = 0.0, None
        for nid in conv_ids:
            impl = assignment[nid]
            total += costs[(nid, impl)]
            if prev is not None and prev != impl:
                total += penalty
            prev = impl
        return total

    return measure


def test_07_assignment_search_optimality(capsys):
    t0 = time.perf_counter()
    g = make_conv_graph([{"kh": 3, "kw": 3, "out_channels": 4}] * 3,
                        input_shape=(3, 8, 8))
    reg = default_registry()
    conv_ids = [n.id for n in g.nodes if n.kind == CONVOLUTION]
    allowed = frozenset({"direct_f32", "im2col_f32", "winograd_f32"})
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        costs = {(nid, impl): float(rng.uniform(1.0, 10.0))
                 for nid in conv_ids for impl in sorted(allowed)}
        measure = _synthetic_measure(conv_ids, costs,
                                     penalty=float(rng.uniform(0.0, 4.0)))
        cfg = SearchConfig(total_episodes=1000, exploration_episodes=350,
                           seed=seed, allowed=allowed)
        best, _ = search(g, reg, measure, cfg)
        opt = brute_force(g, reg, measure, allowed=allowed)
        hits += measure(best) <= measure(opt) + 1e-9
    synth_ok = hits >= 95

    # real measurement on the largest preset: the learned mixed assignment
    # must not lose to any uniform one-impl-everywhere choice
    kg = build_preset("kws1", seed=7)
    plan = compile_graph(kg)
    x = np.random.default_rng(7).standard_normal((1, 40, 32)).astype(
        np.float32)
    reg = default_registry()

    def measure(assignment):
        # min over runs is a far more noise-robust latency statistic than
        # the mean on a busy machine
        return benchmark(plan, assignment, x, runs=6, warmups=1).total.min

    cfg = SearchConfig(total_episodes=700, exploration_episodes=120,
                       alpha=0.25, seed=7)
    qtable = QTable()
    best_asg, _ = search(plan.graph, reg, measure, cfg, qtable=qtable)
    greedy_asg = greedy_rollout(qtable, plan.graph, reg)

    uniforms = {impl: default_assignment(plan.graph, prefer=[impl])
                for impl in ["direct_f32", "im2col_f32", "winograd_f32",
                             "pointwise_f32", "direct_f32_cmin"]}
    found = {"best_ever": best_asg, "greedy": greedy_asg}
    # measure each distinct assignment in interleaved rounds so clock drift
    # hits every candidate equally; min-of-mins estimates the latency floor
    distinct = {}
    for asg in list(uniforms.values()) + list(found.values()):
        distinct[tuple(sorted(asg.items()))] = asg
    prepared = {key: prepare(plan, asg) for key, asg in distinct.items()}
    rounds = {key: [] for key in distinct}
    for _ in range(5):
        for key, asg in distinct.items():
            rep = benchmark(prepared[key], asg, x, runs=10, warmups=2)
            rounds[key].append(rep.total.min)
    stable = {key: min(times) for key, times in rounds.items()}

    def key_of(asg):
        return tuple(sorted(asg.items()))

    best_latency = min(stable[key_of(a)] for a in found.values())
    uniform_key = min((key_of(a) for a in uniforms.values()),
                      key=stable.get)
    best_uniform = stable[uniform_key]
    # the spread of repeated floor estimates for one fixed assignment is the
    # finest latency difference this host can resolve; on this network the
    # true optimum IS a uniform assignment (and 1x1 im2col equals pointwise),
    # so a tie inside the resolution band must not read as a loss. The band
    # never exceeds a few percent: a search that systematically loses (all
    # direct +4%, winograd 3x, channel-minor 12x) still fails.
    spread = max(rounds[uniform_key]) - min(rounds[uniform_key])
    resolution = max(min(spread, 0.1 * best_uniform), 0.02 * best_uniform)
    identical = any(key_of(a) == uniform_key for a in found.values())
    real_ok = identical or best_latency <= best_uniform + resolution
    elapsed = time.perf_counter() - t0
    ok = synth_ok and real_ok and elapsed < 600.0
    announce(capsys, 7, "impl search: brute-force match + beats uniforms", ok,
             f"synthetic {hits}/100, learned {best_latency * 1e3:.2f} ms vs "
             f"best uniform {best_uniform * 1e3:.2f} ms "
             f"(resolution {resolution * 1e3:.2f} ms), {elapsed:.0f}s")
    assert ok, (hits, best_latency, best_uniform, resolution, stable)


def test_08_mfcc_contract(capsys):
    rng = np.random.default_rng(8)
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    clips = [np.sin(2 * np.pi * f * t) * 0.5
             for f in [150.0, 440.0, 997.0, 2500.0, 6100.0]]
    clips += [rng.uniform(-0.8, 0.8, SAMPLE_RATE) for _ in range(3)]
    clips.append(np.sin(2 * np.pi * (100 + 2000 * t) * t) * 0.4)  # chirp
    clips.append(np.zeros(SAMPLE_RATE))  # silence
    assert len(clips) == 10
    worst = 0.0
    ok = True
    for x in clips:
        x = x.astype(np.float32)
        feats = mfcc(AudioClip(SAMPLE_RATE, x))
        ok = ok and feats.shape == (40, 32)
        err = float(np.max(np.abs(feats - oracle_mfcc(x))))
        worst = max(worst, err)
        ok = ok and err < 1e-3
    announce(capsys, 8, "MFCC 40x32 contract + oracle agreement (10 clips)",
             ok, f"worst |delta| {worst:.2e}")
    assert ok, worst


def test_09_benchmark_protocol(capsys):
    g = make_conv_graph([{"kh": 3, "kw": 3, "out_channels": 3}],
                        input_shape=(2, 6, 6))
    plan = compile_graph(g)
    calls = []

    def counting_fn(x):
        calls.append(time.perf_counter())
        if len(calls) == 1:
            time.sleep(0.05)  # a deliberately slow warm-up
        return np.zeros(3, np.float32), {1: 0.001}

    report = benchmark(plan, {}, np.zeros((2, 6, 6), np.float32),
                       runs=10, warmups=1, execute_fn=counting_fn)
    ok = (len(calls) == 11 and report.runs == 10 and report.warmups == 1
          and report.total.max < 0.05)
    announce(capsys, 9, "bench protocol: 1 discarded warm-up + 10 runs", ok,
             f"{len(calls)} invocations, slow warm-up excluded: "
             f"{report.total.max < 0.05}")
    assert ok, (len(calls), report.total)


def test_10_workflow_caching(capsys, tmp_path):
    spec = WorkflowSpec.from_yaml(SAMPLES_DIR / "kws_workflow.yaml")
    store = ArtifactStore(tmp_path / "store")
    first = run_workflow(spec, store)
    all_steps = [s.name for s in spec.steps]
    reports_ok = True
    try:
        for artifact, fname in [("compiled", "plan.json"),
                                ("compiled", "passes.json"),
                                ("quantized", "quant_report.json"),
                                ("assignment", "assignment.json"),
                                ("report", "bench.json")]:
            json.loads((store.dir(artifact) / fname).read_text())
    except Exception:
        reports_ok = False
    second = run_workflow(spec, store)
    ok = (first.executed == all_steps and not first.failed
          and reports_ok and second.executed == []
          and second.skipped == all_steps)
    announce(capsys, 10, "example pipeline: runs, valid JSON, then cached",
             ok, f"{len(first.executed)} steps, rerun executed "
             f"{len(second.executed)}")
    assert ok, (first.to_dict(), second.to_dict(), reports_ok)


def test_11_pareto_retention(capsys):
    table = [Candidate(0.951, 223.4, name="kws1"),
             Candidate(0.941, 87.6, name="kws3"),
             Candidate(0.934, 37.7, name="kws9")]
    front = pareto_frontier(table)
    all_kept = {c.name for c in front} == {"kws1", "kws3", "kws9"}
    dominated = Candidate(0.930, 100.0, name="loser")
    front2 = pareto_frontier(table + [dominated])
    only_loser_gone = {c.name for c in front2} == {"kws1", "kws3", "kws9"}
    ok = all_kept and only_loser_gone
    announce(capsys, 11, "published triple mutually non-dominated", ok,
             f"kept {len(front)}, dominated extra removed: {only_loser_gone}")
    assert ok
