"""Compare the numpy and compiled kernel backends.

Times the convolution bank and LSTM (forward and forward+backward) at the
shapes the model actually uses, prints a per-kernel speedup table, and
cross-checks that both backends agree numerically.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--dtype f32|f64]
"""

import argparse
import time

import numpy as np

from caqa.kernels import _ref, available, use


def _time(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, f, m, h, dtype, repeats):
    rng = np.random.default_rng(0)
    seq = rng.standard_normal((f, m)).astype(dtype)
    widths = (1, 3, 5)
    ws = [(rng.standard_normal((h, w * f)) * 0.2).astype(dtype) for w in widths]
    bs = [np.zeros((h, 1), dtype=dtype) for _ in widths]
    wx = (rng.standard_normal((4 * h, f)) * 0.2).astype(dtype)
    wh = (rng.standard_normal((4 * h, h)) * 0.2).astype(dtype)
    b = np.zeros((4 * h, 1), dtype=dtype)
    g_conv = rng.standard_normal((3 * h, m)).astype(dtype)
    g_lstm = rng.standard_normal((h, m)).astype(dtype)

    backends = [("numpy", _ref)]
    if "compiled" in available():
        backends.append(("compiled", use("compiled")))

    results = {}
    outs = {}
    for bname, mod in backends:
        def conv_full():
            out, cache = mod.conv_bank_forward(seq, ws, bs, widths)
            mod.conv_bank_backward(g_conv, cache)
            return out

        def lstm_full():
            out, cache = mod.lstm_forward(seq, wx, wh, b)
            mod.lstm_backward(g_lstm, cache)
            return out

        results[bname, "conv fwd"] = _time(
            lambda: mod.conv_bank_forward(seq, ws, bs, widths), repeats
        )
        results[bname, "conv fwd+bwd"] = _time(conv_full, repeats)
        results[bname, "lstm fwd"] = _time(
            lambda: mod.lstm_forward(seq, wx, wh, b), repeats
        )
        results[bname, "lstm fwd+bwd"] = _time(lstm_full, repeats)
        outs[bname] = (conv_full(), lstm_full())

    if len(backends) == 2:
        for i in range(2):
            diff = np.abs(outs["numpy"][i] - outs["compiled"][i]).max()
            kind = ("conv", "lstm")[i]
            tol = 1e-10 if dtype == np.float64 else 1e-4
            status = "OK" if diff < tol else "MISMATCH"
            print(f"  parity {kind}: max |numpy - compiled| = {diff:.2e} [{status}]")

    print(f"\n{name}: seq ({f}, {m}), channels/hidden {h}, {np.dtype(dtype).name}")
    kernels = ["conv fwd", "conv fwd+bwd", "lstm fwd", "lstm fwd+bwd"]
    hdr = f"  {'kernel':<14}" + "".join(f"{b:>12}" for b, _ in backends)
    if len(backends) == 2:
        hdr += f"{'speedup':>10}"
    print(hdr)
    for k in kernels:
        row = f"  {k:<14}"
        for bname, _ in backends:
            row += f"{1e6 * results[bname, k]:>10.0f}us"
        if len(backends) == 2:
            row += f"{results['numpy', k] / results['compiled', k]:>9.1f}x"
        print(row)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    args = ap.parse_args()
    dtype = np.float32 if args.dtype == "f32" else np.float64
    print(f"backends available: {', '.join(available())}")
    bench_case("toy sentence", f=24, m=12, h=24, dtype=dtype, repeats=args.repeats)
    bench_case("full-size sentence", f=150, m=40, h=150, dtype=dtype,
               repeats=max(3, args.repeats // 3))


if __name__ == "__main__":
    main()
