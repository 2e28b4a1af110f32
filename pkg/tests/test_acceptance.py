"""The ten acceptance criteria, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is echoed (via
``conftest.py``) in the terminal summary and also printed directly.
Criteria 6 to 10 share one end-to-end run on the seeded synthetic set.
"""

import time

import numpy as np
import pytest

import conftest
import oracles
from ddnn import checkpoint, kernels
from ddnn.cli import write_history
from ddnn.data import SynthParams, split, synth_generate
from ddnn.experiments import (
    SweepResult,
    device_order,
    measure,
    run_fault_tolerance,
    run_threshold_sweep,
    train_individuals,
)
from ddnn.model import ChannelProjection, DeviceBranch, FloatLinear, device_memory_bytes
from ddnn.policy import CommModel, ExitThresholds, comm_cost, infer_dataset, normalized_entropy, round_half_up
from ddnn.tensor import BatchNormParams, Tensor, batch_norm, conv2d, fully_connected, maxpool, softmax_cross_entropy
from ddnn.train import TrainConfig, build_model, individual_accuracy, train

RAW_OFFLOAD_BYTES = 32 * 32 * 3
GRID = [round(0.1 * i, 1) for i in range(11)]
BUDGET_SECONDS = 15 * 60


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# ------------------------------------------------------------ 1. cost model

TABLE_ROWS = [(0.0000, 140), (0.0058, 139), (0.0175, 138), (0.0292, 136),
              (0.2281, 111), (0.6082, 62), (0.8304, 34), (1.0000, 12)]


def test_criterion_1_cost_model_table():
    comm = CommModel(num_classes=3, filters=4, filter_output_size=256)
    got = [round_half_up(comm_cost(l, comm)) for l, _ in TABLE_ROWS]
    want = [b for _, b in TABLE_ROWS]
    record(1, got == want, f"bytes {got} vs table {want}")


# ---------------------------------------------------------- 2. entropy suite


def test_criterion_2_entropy():
    ok = normalized_entropy([1 / 3, 1 / 3, 1 / 3]) == 1.0 and normalized_entropy([1.0, 0.0, 0.0]) == 0.0
    half = normalized_entropy([0.5, 0.5, 0.0])
    ok &= abs(half - 0.63093) <= 1e-5
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        p = rng.dirichlet(np.ones(rng.integers(2, 8)))
        worst = max(worst, abs(normalized_entropy(p) - normalized_entropy(rng.permutation(p))))
    ok &= worst < 1e-12
    record(2, bool(ok), f"(0.5,0.5,0) -> {half:.6f}; worst permutation diff {worst:.1e} over 1000")


# ------------------------------------------------------ 3. kernels vs oracles


def test_criterion_3_kernels_match_oracles():
    worst = {"conv2d": 0.0, "maxpool": 0.0, "fully_connected": 0.0}
    prev = kernels.get_backend()
    try:
        for backend in kernels.BACKENDS:
            kernels.set_backend(backend)
            rng = np.random.default_rng(3)
            for _ in range(100):
                n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5)
                h, w = rng.integers(1, 9), rng.integers(1, 9)
                x = rng.standard_normal((n, c, h, w)).astype(np.float32)
                wt = rng.choice([-1.0, 1.0], (f, c, 3, 3)).astype(np.float32)
                d = np.abs(conv2d(Tensor(x), Tensor(wt)).data - oracles.conv3x3(x, wt)).max()
                worst["conv2d"] = max(worst["conv2d"], d)
                d = np.abs(maxpool(Tensor(x)).data - oracles.maxpool3x3s2(x)[0]).max()
                worst["maxpool"] = max(worst["maxpool"], d)
                a = rng.standard_normal((n, rng.integers(1, 16))).astype(np.float32)
                m = rng.choice([-1.0, 1.0], (a.shape[1], rng.integers(1, 6))).astype(np.float32)
                d = np.abs(fully_connected(Tensor(a), Tensor(m)).data - oracles.fully_connected(a, m)).max()
                worst["fully_connected"] = max(worst["fully_connected"], d)
    finally:
        kernels.set_backend(prev)
    ok = all(v < 1e-5 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(3, ok, f"max abs diff over 100 instances x {len(kernels.BACKENDS)} backends: {detail}")


# ----------------------------------------------------------- 4. gradients


def _grad_case(forward, oracle, arrays, params, probe):
    """Relative error between autograd and central differences for each array."""
    out = forward()
    out.backward(probe.astype(np.float32))
    errs = []
    for k, (arr, t) in enumerate(zip(arrays, params)):
        def f(v, k=k):
            args = list(arrays)
            args[k] = v
            return float((oracle(*args) * probe).sum())
        errs.append(oracles.rel_err(t.grad, oracles.numeric_grad(f, arr)))
    return max(errs)


def test_criterion_4_gradient_checks():
    rng = np.random.default_rng(4)
    worst = {}

    def note(name, e):
        worst[name] = max(worst.get(name, 0.0), e)

    for _ in range(20):
        n, d, k = int(rng.integers(1, 4)), int(rng.integers(1, 8)), int(rng.integers(2, 5))
        lin = FloatLinear(d, k, rng)
        lin.bias.data = rng.standard_normal(k).astype(np.float32)
        x = Tensor(rng.standard_normal((n, d)), requires_grad=True)
        arrays = [x.data.astype(np.float64), lin.weight.data.astype(np.float64), lin.bias.data.astype(np.float64)]
        note("float_linear", _grad_case(lambda: lin(x), oracles.fully_connected, arrays,
                                        [x, lin.weight, lin.bias], rng.standard_normal((n, k))))

        c, f = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        proj = ChannelProjection(c, f, rng)
        x = Tensor(rng.standard_normal((2, c, 3, 3)), requires_grad=True)
        note("channel_projection", _grad_case(lambda: proj(x), oracles.channel_mix,
                                              [x.data.astype(np.float64), proj.weight.data.astype(np.float64)],
                                              [x, proj.weight], rng.standard_normal((2, f, 3, 3))))

        c = int(rng.integers(1, 4))
        bn = BatchNormParams(c)
        bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(np.float32)
        bn.beta.data = rng.standard_normal(c).astype(np.float32)
        x = Tensor(rng.standard_normal((4, c, 2, 3)) * 2 + 1, requires_grad=True)
        note("batch_norm", _grad_case(lambda: batch_norm(x, bn, "train"), oracles.batch_norm_train,
                                      [x.data.astype(np.float64), bn.gamma.data.astype(np.float64),
                                       bn.beta.data.astype(np.float64)],
                                      [x, bn.gamma, bn.beta], rng.standard_normal((4, c, 2, 3))))

        cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        x = Tensor(rng.standard_normal((1, cin, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((cout, cin, 3, 3)), requires_grad=True)
        note("conv2d", _grad_case(lambda: conv2d(x, w), oracles.conv3x3,
                                  [x.data.astype(np.float64), w.data.astype(np.float64)], [x, w],
                                  rng.standard_normal((1, cout, 4, 4))))

        x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
        note("maxpool", _grad_case(lambda: maxpool(x), lambda a: oracles.maxpool3x3s2(a)[0],
                                   [x.data.astype(np.float64)], [x], rng.standard_normal((1, 2, 3, 3))))

        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        labels = rng.integers(0, c, n)
        z = Tensor(rng.standard_normal((n, c)) * 3, requires_grad=True)
        softmax_cross_entropy(z, labels).backward()
        y = np.eye(c)[labels]
        num = oracles.numeric_grad(lambda a: oracles.softmax_ce(a, y), z.data)
        note("softmax_ce", oracles.rel_err(z.grad, num))

    ok = all(v < 1e-3 for v in worst.values())
    record(4, ok, "worst rel-err over 20 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# ------------------------------------------------------------- 5. memory


def test_criterion_5_device_memory():
    sizes = {f: device_memory_bytes(DeviceBranch(f, 3, np.random.default_rng(0))) for f in (4, 8, 16)}
    record(5, all(v < 2048 for v in sizes.values()), f"device bytes {sizes} (limit 2048)")


# ------------------------------------------------------------ end to end


def _pipeline(seed=0):
    """Criterion 7's run: data, six individual baselines, one MP-CC DDNN."""
    t0 = time.perf_counter()
    train_set, test = split(synth_generate(SynthParams(seed=seed)), seed=seed)
    cfg = TrainConfig(seed=seed)
    individuals = train_individuals(train_set, cfg)
    accs = [individual_accuracy(m, test, d) for d, m in enumerate(individuals)]
    model, history = train(build_model(cfg), train_set, cfg)
    report = measure(model, test, 0.8, individuals)
    elapsed = time.perf_counter() - t0
    return dict(train=train_set, test=test, cfg=cfg, accs=accs, model=model, history=history,
                report=report, elapsed=elapsed)


def _outputs(run, directory):
    """Checkpoint and CSV files written from one pipeline run."""
    directory.mkdir(parents=True, exist_ok=True)
    checkpoint.save(run["model"], directory / "model.ddnn")
    write_history(run["history"], directory / "history.csv")
    SweepResult("run", [("MP-CC", run["report"], {})]).write_csv(directory / "report.csv")
    run_threshold_sweep(run["model"], run["test"], GRID).write_csv(directory / "threshold.csv")
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    run = _pipeline(0)
    run["files"] = _outputs(run, tmp_path_factory.mktemp("first"))
    return run


def test_criterion_6_communication_reduction(e2e):
    comm = CommModel.from_model(e2e["model"])
    worst = comm_cost(0.0, comm)
    measured = e2e["report"].avg_comm_bytes
    limit = RAW_OFFLOAD_BYTES / 20
    ok = RAW_OFFLOAD_BYTES == 3072 and worst == 140 and worst < limit and measured <= limit
    record(6, ok, f"raw {RAW_OFFLOAD_BYTES} B; worst case {worst:g} B; measured {measured:.2f} B at T=0.8; "
                  f"limit {limit:.1f} B ({RAW_OFFLOAD_BYTES / measured:.1f}x reduction)")


def test_criterion_7_end_to_end(e2e):
    rep, accs = e2e["report"], e2e["accs"]
    spread_ok = all(40 <= a <= 75 for a in accs)
    beats = rep.overall_acc > max(accs)
    cloud_ok = rep.cloud_acc >= rep.local_acc - 2
    fast = e2e["elapsed"] < BUDGET_SECONDS
    record(7, spread_ok and beats and cloud_ok and fast,
           f"individual {[round(a, 1) for a in accs]}; overall {rep.overall_acc:.2f} "
           f"(local {rep.local_acc:.2f}, cloud {rep.cloud_acc:.2f}) at T=0.8 vs best individual "
           f"{max(accs):.2f}; runtime {e2e['elapsed']:.0f}s")


def test_criterion_8_monotonicity(e2e):
    model, test = e2e["model"], e2e["test"]
    res = run_threshold_sweep(model, test, GRID)
    pct, cost = res.column("local_exit_pct"), res.column("avg_comm_bytes")
    mono = all(b >= a for a, b in zip(pct, pct[1:])) and all(b <= a for a, b in zip(cost, cost[1:]))
    partition = True
    for T in GRID:
        traces = infer_dataset(model, test, ExitThresholds(T))
        hit = [t.predicted_class == t.true_class for t in traces]
        loc = sum(h for h, t in zip(hit, traces) if t.exit_taken == "local")
        cld = sum(h for h, t in zip(hit, traces) if t.exit_taken == "cloud")
        partition &= sum(hit) == loc + cld
    record(8, mono and partition,
           f"local exit % {[round(p, 1) for p in pct]}; bytes {[round(c, 1) for c in cost]}; partition exact")


def test_criterion_9_fault_tolerance(e2e):
    train_set, test, cfg, accs = e2e["train"], e2e["test"], e2e["cfg"], e2e["accs"]
    keep = device_order(accs)[:5]
    five, _ = train(build_model(cfg, n_devices=5), train_set.select_devices(keep), cfg)
    overall5 = measure(five, test.select_devices(keep), 0.8).overall_acc
    base = e2e["report"].overall_acc
    gap = base - overall5
    res = run_fault_tolerance(e2e["model"], test)
    drops = [base - r.overall_acc for r in res.reports()[1:]]
    ok = len(res) == 7 and res.reports()[0].overall_acc == base and all(d <= gap + 5 for d in drops)
    record(9, ok, f"7 rows; drops {[round(d, 2) for d in drops]} vs bound {gap + 5:.2f} "
                  f"(6-device {base:.2f}, 5-device without best {overall5:.2f})")


def test_criterion_10_determinism(e2e, tmp_path):
    again = _pipeline(0)
    files = _outputs(again, tmp_path / "second")
    same = files == e2e["files"]
    record(10, same, f"{len(files)} outputs byte-identical on repeat: {sorted(files)}")
