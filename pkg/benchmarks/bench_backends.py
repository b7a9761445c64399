"""Kernel backend benchmark: numba @njit vs pure numpy.

Times each hot kernel on model-shaped inputs and one full optimizer step
end to end, under both backends, and checks the two agree to round-off.
Run from the repo root:

    python benchmarks/bench_backends.py [--repeats 50] [--steps 20]
"""
import argparse
import time

import numpy as np

from triflow import backend
from triflow import tensor as T
from triflow.model import MTXpertStack, ModelConfig, forward
from triflow.objectives import combined_loss
from triflow.rng import Stream
from triflow.sequencing import assemble
from triflow.train import TrainConfig, adamw_init, adamw_step, build_parts, trainable_names
from triflow.toyworld import DatasetConfig, make_dataset


def _kernel_cases(rng: Stream):
    """Name -> (args builder) for every kernel, on model-sized shapes."""
    n, d, h, v = 96, 64, 4, 512
    from triflow import _kernels_numpy as ker
    x_nd = rng.derive("x").normal((n, d))
    g_d = 1.0 + 0.1 * rng.derive("g").normal((d,))
    gy_nd = rng.derive("gy").normal((n, d))
    scores = rng.derive("s").normal((h, n, n))
    bias = np.where(rng.derive("b").u01(n * n).reshape(n, n) < 0.2, -np.inf, 0.0)
    bias[np.arange(n), np.arange(n)] = 0.0  # keep every row attendable
    logits = rng.derive("l").normal((n, v))
    targets = np.array([rng.derive(f"t/{i}").below(v) for i in range(n)])
    p = rng.derive("p").normal((d * d,))
    grad = rng.derive("pg").normal((d * d,))
    _, inv = ker.rmsnorm_fwd(x_nd, g_d, 1e-6)
    probs_sm = ker.masked_softmax_fwd(scores, bias)
    _, probs_ce = ker.cross_entropy_fwd(logits, targets)
    sig = ker.sigmoid_fwd(x_nd)

    cases = {
        "silu_fwd": lambda k: k.silu_fwd(x_nd),
        "silu_bwd": lambda k: k.silu_bwd(x_nd, gy_nd),
        "sigmoid_fwd": lambda k: k.sigmoid_fwd(x_nd),
        "sigmoid_bwd": lambda k: k.sigmoid_bwd(sig, gy_nd),
        "rmsnorm_fwd": lambda k: k.rmsnorm_fwd(x_nd, g_d, 1e-6),
        "rmsnorm_bwd": lambda k: k.rmsnorm_bwd(x_nd, g_d, inv, gy_nd),
        "masked_softmax_fwd": lambda k: k.masked_softmax_fwd(scores, bias),
        "masked_softmax_bwd": lambda k: k.masked_softmax_bwd(probs_sm, scores),
        "softmax_rows_fwd": lambda k: k.softmax_rows_fwd(logits),
        "cross_entropy_fwd": lambda k: k.cross_entropy_fwd(logits, targets),
        "cross_entropy_bwd": lambda k: k.cross_entropy_bwd(probs_ce, targets, 0.5),
        "adamw_update": lambda k: _adamw_case(k, p, grad),
    }
    return cases


def _adamw_case(k, p, grad):
    out = p.copy()
    k.adamw_update(out, grad, 0 * p, 0 * p, 3, 1e-3, 0.9, 0.999, 1e-8, 0.02)
    return out


def _time(fn, repeats: int) -> float:
    fn()  # warm (numba compiles on first call)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _flatten(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in parts])


def bench_kernels(repeats: int):
    from triflow import _kernels_numpy
    from triflow import _kernels_numba
    cases = _kernel_cases(Stream(0, "bench/kernels"))
    rows = []
    for name, call in cases.items():
        worst = float(np.max(np.abs(
            _flatten(call(_kernels_numpy)) - _flatten(call(_kernels_numba)))))
        t_np = _time(lambda: call(_kernels_numpy), repeats)
        t_nb = _time(lambda: call(_kernels_numba), repeats)
        rows.append((name, t_np, t_nb, worst))
    return rows


def _train_step_fn(steps: int):
    """One closure per backend run: fresh stack, same data, `steps` updates."""
    cfg = TrainConfig(stage="stage1_t2i", steps=steps, warmup=1, batch_size=8,
                      d_model=64, n_layers=2, n_heads=4,
                      data=DatasetConfig(n_t2i=8, n_i2t=2, n_plan=1,
                                         n_reflect=1, n_correct=1, n_val=0))
    manifest = make_dataset(cfg.data, cfg.seed)
    records = [r for r in manifest["train"] if r["task"] == "t2i"]

    def run():
        stack = MTXpertStack.init(
            ModelConfig(d_model=cfg.d_model, n_layers=cfg.n_layers,
                        n_heads=cfg.n_heads, patch=cfg.patch), seed=cfg.seed)
        opt = adamw_init(stack.params)
        trainable = trainable_names(cfg.stage, stack.params)
        for step in range(steps):
            T.zero_grads(stack.params)
            total = None
            for i in range(cfg.batch_size):
                rec = records[(step * cfg.batch_size + i) % len(records)]
                rng = Stream(cfg.seed, f"bench/{step}/{i}")
                with T.ComputationTape() as tape:
                    seq = assemble(build_parts("t2i", rec, rng, cfg),
                                   stack.embed_table, stack.grid)
                    out = forward(stack, seq)
                    loss, _ = combined_loss(seq, out)
                    T.backward(tape, loss)
                total = loss if total is None else total
            adamw_step(stack.params, opt, trainable, lr=1e-3,
                       weight_decay=cfg.weight_decay)
        return stack

    return run


def bench_end_to_end(steps: int):
    run = _train_step_fn(steps)
    results = {}
    for name in ("numpy", "numba"):
        backend.use(name)
        run()  # warm
        t0 = time.perf_counter()
        stack = run()
        results[name] = (time.perf_counter() - t0,
                         float(stack.params["final_norm.g"].data.sum()))
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args()

    if "numba" not in backend.available_backends():
        raise SystemExit("numba backend not importable; nothing to compare")

    print(f"{'kernel':<22}{'numpy':>10}{'numba':>10}{'speedup':>9}{'max|diff|':>12}")
    rows = bench_kernels(args.repeats)
    for name, t_np, t_nb, worst in rows:
        print(f"{name:<22}{t_np * 1e6:>8.1f}us{t_nb * 1e6:>8.1f}us"
              f"{t_np / t_nb:>8.2f}x{worst:>12.2e}")
    agg_np = sum(r[1] for r in rows)
    agg_nb = sum(r[2] for r in rows)
    print(f"{'all kernels':<22}{agg_np * 1e6:>8.1f}us{agg_nb * 1e6:>8.1f}us"
          f"{agg_np / agg_nb:>8.2f}x")

    res = bench_end_to_end(args.steps)
    (t_np, s_np), (t_nb, s_nb) = res["numpy"], res["numba"]
    print(f"\ntrain {args.steps} steps (d=64, L=2, batch 8): "
          f"numpy {t_np:.2f}s, numba {t_nb:.2f}s, speedup {t_np / t_nb:.2f}x")
    drift = abs(s_np - s_nb)
    print(f"final-parameter checksum drift across backends: {drift:.2e}")
    if drift > 1e-6:
        raise SystemExit("backends diverged beyond round-off")


if __name__ == "__main__":
    main()
