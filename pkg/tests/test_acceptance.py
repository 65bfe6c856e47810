"""One test per headline criterion; each prints a PASS/FAIL line with its evidence."""
import dataclasses
import time

import numpy as np

import oracles
from conftest import ACCEPTANCE_LINES
from attnbof import ops
from attnbof.attention import AttentionBlock, apply_2da, attention_mask
from attnbof.data import Dataset, load_seqb, synth_clusters, write_seqb
from attnbof.gradsuite import run_gradient_suite
from attnbof.metrics import macro_f1, sens_spec_mean
from attnbof.model import ModelConfig, build_model, parse_layers
from attnbof.noise_study import run_noise_study
from attnbof.optim import (FINANCIAL_SCHEDULE, OptimState, adam_step, apply_constraints, class_weights_from_counts,
                           lr_schedule_value)
from attnbof.quantization import Codebook, accumulate_histogram, quantize
from attnbof.tensor import Tensor, zero_grad
from attnbof.train import Checkpoint, TrainConfig, train


def report(name, failures, detail):
    line = f"{'PASS' if not failures else 'FAIL'}  {name}: {detail}"
    if failures:
        line += " | " + "; ".join(failures)
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert not failures, line


def test_gradient_suite():
    result = run_gradient_suite(seeds=range(10), h=1e-4, tol=1e-4)
    failures = [f"{c} max rel. error {result.worst(c):.2e}" for c in result.reports if result.worst(c) >= 1e-4]
    if result.seconds >= 60:
        failures.append(f"took {result.seconds:.1f} s")
    worst = max(result.reports, key=result.worst)
    report("gradient suite", failures,
           f"{len(result.reports)} checks x 10 seeds, worst {worst} {result.worst(worst):.2e}, "
           f"{result.seconds:.1f} s")


def test_2da_invariants():
    rng = np.random.default_rng(2024)
    worst_sum = worst_identity = 0.0
    for _ in range(1000):
        M, N = rng.integers(1, 9, size=2)
        S = Tensor(rng.standard_normal((M, N)) * rng.uniform(0.1, 10))
        W = rng.standard_normal((N, N)) * rng.uniform(0.1, 5)
        block = AttentionBlock.create(N, tau=rng.uniform(-1, 2), W_off=W)
        worst_sum = max(worst_sum, np.abs(attention_mask(S, block).data.sum(axis=1) - 1).max())
        identity = apply_2da(S, AttentionBlock.create(N, tau=0.0, W_off=W)).data
        worst_identity = max(worst_identity, np.abs(identity - S.data).max())

    N = 6
    block = AttentionBlock.create(N)
    params = {"W_off": block.W_off, "tau": block.tau}
    state = OptimState()
    S, R = Tensor(rng.standard_normal((4, N))), Tensor(rng.standard_normal((4, N)))
    for _ in range(100):
        zero_grad(params.values())
        ops.reduce_sum(ops.mul(apply_2da(S, block), R)).backward()
        adam_step(params, state, 1e-2)
    diag = np.diag(block.effective_weight().data)

    failures = []
    if worst_sum > 1e-9:
        failures.append(f"row sum off by {worst_sum:.2e}")
    if worst_identity > 1e-15:
        failures.append(f"tau=0 deviates by {worst_identity:.2e}")
    if not np.all(diag == 1.0 / N):
        failures.append(f"diagonal drifted to {diag}")
    report("2DA invariants", failures,
           f"1000 draws, max |row sum - 1| {worst_sum:.1e}, max tau=0 deviation {worst_identity:.1e}, "
           f"diagonal exactly 1/{N} after 100 steps")


def test_quantization_invariants():
    rng = np.random.default_rng(7)
    worst_col = worst_perm = worst_hist = 0.0
    for i in range(500):
        K, D, N = (int(v) for v in rng.integers(1, 9, size=3))
        V = rng.standard_normal((K, D))
        cb = (Codebook.from_arrays(V, np.exp(rng.standard_normal((K, D)) * 0.5)) if i % 2 == 0
              else Codebook.from_arrays(V, kernel="hyperbolic", bias=rng.standard_normal(K)))
        X = rng.standard_normal((D, N)) * 3
        phi = quantize(Tensor(X), cb).data
        worst_col = max(worst_col, np.abs(phi.sum(axis=0) - 1).max())
        if phi.min() < 0:
            worst_col = np.inf
        y = accumulate_histogram(Tensor(phi)).data
        worst_hist = max(worst_hist, abs(y.sum() - 1))
        y_perm = accumulate_histogram(quantize(Tensor(X[:, rng.permutation(N)]), cb)).data
        worst_perm = max(worst_perm, np.abs(y_perm - y).max())
    failures = []
    if worst_col > 1e-9:
        failures.append(f"column sums off by {worst_col:.2e}")
    if worst_perm > 1e-12:
        failures.append(f"order changed histogram by {worst_perm:.2e}")
    if worst_hist > 1e-9:
        failures.append(f"histogram sum off by {worst_hist:.2e}")
    report("quantization invariants", failures,
           f"500 draws over both kernels, column {worst_col:.1e}, permutation {worst_perm:.1e}, "
           f"histogram {worst_hist:.1e}")


def test_desk_scale_learnability():
    ds = synth_clusters(8, 20, 2, 200, seed=0, separation=4.0)
    cfg = TrainConfig(layers="nbof,dense(32),dropout(0.2),output(2)", codewords=16, kernel="rbf", epochs=100,
                      batch=64, folds=5, seed=0)
    start = time.perf_counter()
    result = train(cfg, ds, write_files=False)
    seconds = time.perf_counter() - start
    val = [row["val_acc"] for row in result.history]
    first = next((row["epoch"] for row in result.history if row["val_acc"] >= 0.95), None)

    X = ds.stacked()
    tr, te = result.train_idx, result.val_idx
    oracle = oracles.nearest_centroid_accuracy(X[tr], ds.labels[tr], X[te], ds.labels[te], K=16)

    failures = []
    if first is None or val[-1] < 0.95:
        failures.append(f"held-out accuracy {val[-1]:.4f}")
    if seconds >= 120:
        failures.append(f"took {seconds:.1f} s")
    if oracle <= 0.95:
        failures.append(f"centroid oracle only {oracle:.4f}")
    report("desk-scale learnability", failures,
           f"held-out {val[-1]:.4f} after 100 epochs (first >= 0.95 at epoch {first}), {seconds:.1f} s, "
           f"nearest-centroid oracle {oracle:.4f}")


def test_noise_trend():
    seeds = list(range(10))
    r = run_noise_study(seeds=seeds)
    plain, _ = r.cell("NBoF", "noisy")
    attn, _ = r.cell("NBoF-IA", "noisy")
    clean, _ = r.cell("NBoF", "clean")
    orig, injected = r.mask_weights("NBoF-IA")
    wins = sum(a > p for a, p in zip(r.accuracy[("NBoF-IA", "noisy")], r.accuracy[("NBoF", "noisy")]))
    failures = []
    if not attn > plain:
        failures.append(f"NBoF-IA noisy {attn:.4f} does not beat NBoF noisy {plain:.4f}")
    if not injected < orig:
        failures.append(f"injected-row weight {injected:.4f} not below original {orig:.4f}")
    if not plain <= clean:
        failures.append(f"NBoF noisy {plain:.4f} above clean {clean:.4f}")
    report("noise trend", failures,
           f"{len(seeds)} seeds, noisy NBoF-IA {r.cell_text('NBoF-IA', 'noisy')} vs NBoF "
           f"{r.cell_text('NBoF', 'noisy')} (IA ahead on {wins}/{len(seeds)} seeds), mask weight "
           f"injected {injected:.4f} vs original {orig:.4f}")


def test_optimizer_contracts():
    rng = np.random.default_rng(11)
    model = build_model(ModelConfig((5, 9), parse_layers("nbof(K=6),dense(12),output(3)"), attention=("IA",)))
    params = model.parameters()
    names = model.constrained_parameters()
    state = OptimState(FINANCIAL_SCHEDULE, max_norm=4.0)
    worst = 0.0
    for step in range(200):
        grads = {k: rng.standard_normal(p.shape) * 50 for k, p in params.items()}
        adam_step(params, state, 0.5, grads)
        apply_constraints(params, names, state)
        worst = max(worst, max(np.linalg.norm(params[n].data.reshape(len(params[n].data), -1), axis=1).max()
                               for n in names))
    rates = [lr_schedule_value(e, FINANCIAL_SCHEDULE) for e in (1, 11, 51)]
    weights = class_weights_from_counts([10, 40])
    failures = []
    if worst > 4.0 + 1e-12:
        failures.append(f"row norm {worst!r}")
    if rates != [0.001, 0.0001, 0.00001]:
        failures.append(f"schedule {rates}")
    if np.abs(weights - [1.6, 0.4]).max() > 1e-12:
        failures.append(f"class weights {weights}")
    report("optimizer contracts", failures,
           f"max constrained row norm {worst:.15f} over 200 steps, schedule {rates}, weights {weights.tolist()}")


def test_metric_oracles():
    f1 = macro_f1([[4, 1], [2, 3]])
    cases = {"sens 0.8 spec 0.6": (sens_spec_mean([[6, 4], [2, 8]]), 0.7),
             "perfect": (sens_spec_mean([[5, 0], [0, 5]]), 1.0),
             "all positive": (sens_spec_mean([[0, 5], [0, 5]]), 0.5)}
    failures = []
    if abs(f1 - 0.6970) > 5e-4 or abs(f1 - oracles.macro_f1([[4, 1], [2, 3]])) > 1e-15:
        failures.append(f"macro F1 {f1}")
    failures += [f"{k}: {got}" for k, (got, want) in cases.items() if abs(got - want) > 1e-12]
    report("metric oracles", failures,
           f"macro F1 {f1:.6f}, sens/spec " + ", ".join(f"{k} -> {g:.4f}" for k, (g, _) in cases.items()))


def test_determinism_and_persistence(tmp_path):
    ds = synth_clusters(4, 10, 3, 20, seed=5)
    cfg = TrainConfig(layers="conv(6,3),bn,relu,nbof,dense(8),dropout(0.2),output(3)", codewords=5, epochs=6,
                      batch=16, milestones=((3, 0.1),), attention=("IA", "CA"), seed=3)
    a = train(cfg, ds, write_files=False)
    b = train(cfg, ds, write_files=False)
    repeat = np.abs(np.subtract(a.step_losses, b.step_losses)).max()

    first = train(dataclasses.replace(cfg, epochs=3), ds, write_files=False)
    saved = Checkpoint.load(first.checkpoint.save(tmp_path / "half.npz"))
    rest = train(cfg, ds, resume=saved, write_files=False)
    tail = a.step_losses[len(first.step_losses):]
    resume = np.abs(np.subtract(rest.step_losses, tail)).max() if len(rest.step_losses) == len(tail) else np.inf

    rng = np.random.default_rng(0)
    variable = Dataset([rng.standard_normal((3, int(n))).astype(np.float32) for n in rng.integers(1, 9, 25)],
                       rng.integers(0, 4, 25), list("abcd"))
    bitwise = True
    for name, d in (("fixed", ds), ("variable", variable)):
        write_seqb(d, tmp_path / f"{name}.seqb")
        back = load_seqb(tmp_path / f"{name}.seqb")
        bitwise &= back.labels.tolist() == d.labels.tolist()
        bitwise &= all(x.tobytes() == y.tobytes() and x.shape == y.shape for x, y in zip(d.samples, back.samples))

    failures = []
    if repeat > 1e-12:
        failures.append(f"repeat run differs by {repeat:.2e}")
    if resume > 1e-12:
        failures.append(f"resumed run differs by {resume:.2e}")
    if not bitwise:
        failures.append("seqb round trip not bitwise")
    report("determinism and persistence", failures,
           f"repeat max step-loss gap {repeat:.1e} over {len(a.step_losses)} steps, resume gap {resume:.1e}, "
           f"seqb round trip bitwise={bitwise}")
