"""Compare the numba kernels against the pure-numpy fallback.

Times each hot kernel in isolation, then a full model forward + backward,
under both backends. Run from the repository root:

    python3 benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from stablerank import autodiff as ad
from stablerank.kernels import get_backend
from stablerank.layout import InvarianceMode, assemble_prompt, assign_positions, build_attention_mask
from stablerank.model import ModelConfig, forward, init_params


def bench(fn, repeats: int) -> float:
    fn()  # warm cache / trigger jit
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    heads, seq, dh, vocab = 4, 192, 16, 1031
    logits = rng.normal(size=(heads, seq, seq))
    mask = np.tril(np.ones((seq, seq), dtype=bool))
    x = rng.normal(size=(heads, seq, dh))
    positions = np.arange(1, seq + 1, dtype=np.int64)
    inv_freq = 10000.0 ** (-np.arange(0, dh, 2, dtype=np.float64) / dh)
    states = rng.normal(size=(seq, 64))
    gain = rng.normal(size=64)
    rows = rng.normal(size=(seq, vocab))
    return {
        "masked_softmax_fwd": lambda be: be.masked_softmax_fwd(logits, mask),
        "rope_fwd": lambda be: be.rope_fwd(x, positions, inv_freq),
        "rms_norm_fwd": lambda be: be.rms_norm_fwd(states, gain, 1e-6),
        "log_softmax_fwd": lambda be: be.log_softmax_fwd(rows),
    }


def model_case(rng):
    config = ModelConfig(vocab_size=1031, d_model=64, n_heads=4, n_layers=2, max_seq_len=256)
    params = init_params(config)
    instruction = [6]
    history = rng.integers(7, 1000, size=60).tolist()
    candidates = [rng.integers(7, 1000, size=3).tolist() for _ in range(25)]
    layout = assemble_prompt(instruction, history, candidates)
    mask = build_attention_mask(layout, InvarianceMode.FULL)
    positions = assign_positions(layout, InvarianceMode.FULL)

    def run():
        with ad.Tape():
            out = forward(params, layout.tokens, positions, mask)
            loss = ad.mean(out)
            ad.backward(loss)
        params.zero_grads()

    return run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'kernel':<24} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}")
    cases = kernel_cases(rng)
    for name, fn in cases.items():
        times = {}
        for backend in ("numpy", "numba"):
            be = get_backend(backend)
            times[backend] = bench(lambda be=be: fn(be), args.repeats) * 1e3
        print(
            f"{name:<24} {times['numpy']:>12.3f} {times['numba']:>12.3f}"
            f" {times['numpy'] / times['numba']:>8.2f}x"
        )

    import stablerank.kernels as kernels

    aliases = [
        "masked_softmax_fwd",
        "masked_softmax_bwd",
        "rope_fwd",
        "rope_bwd",
        "rms_norm_fwd",
        "rms_norm_bwd",
        "log_softmax_fwd",
        "log_softmax_bwd",
    ]
    saved = {name: getattr(kernels, name) for name in aliases}
    print(f"\n{'model fwd+bwd':<24} {'time (ms)':>12}")
    try:
        for backend in ("numpy", "numba"):
            impl = get_backend(backend)
            for name in aliases:
                setattr(kernels, name, getattr(impl, name))
            run = model_case(np.random.default_rng(1))
            print(f"{backend:<24} {bench(run, args.repeats) * 1e3:>12.3f}")
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
