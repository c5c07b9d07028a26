"""Time each numba kernel against its numpy fallback on representative shapes.

    python benchmarks/kernel_backends.py [--repeats 7]

Both implementations are called directly, so the ``SPIRDET_NUMBA`` flag
does not matter here.  Each row also reports the max difference relative to the largest output.
"""
import argparse
import time

import numpy as np

from spirdet import kernels


def _median_ms(fn, repeats):
    fn()                                  # compile / warm caches
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def _cases(rng):
    x = rng.random((2, 32, 128, 128), dtype=np.float32)
    w_dw = rng.standard_normal((32, 1, 3, 3)).astype(np.float32)
    b = np.zeros(32, np.float32)
    yield ("depthwise conv 2x32x128x128",
           lambda: kernels.conv2d_numba(x, w_dw, b, 1, 1, 32),
           lambda: kernels.conv2d_numpy(x, w_dw, b, 1, 1, 32))

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    g = rng.random((2, 32, 128, 128), dtype=np.float32)
    yield ("depthwise weight grad",
           lambda: kernels.depthwise_grad_numba(xp, w_dw, g, 1)[1],
           lambda: kernels.depthwise_grad_numpy(xp, w_dw, g, 1)[1])

    fine = rng.random((1, 16, 64, 64), dtype=np.float32)
    bb = np.zeros(16, np.float32)
    n = 400
    flat = rng.choice(64 * 64, n, replace=False)
    bidx = np.zeros(n, np.int64)
    ii, jj = (flat // 64).astype(np.int64), (flat % 64).astype(np.int64)
    feat = rng.random((n, 16), dtype=np.float32)
    nbr = rng.integers(-1, n, (n, 9)).astype(np.int64)
    # groups=1 goes to BLAS in the library on both backends; the row shows why
    for groups in (1, 16):
        w = rng.standard_normal((16, 16 // groups, 3, 3)).astype(np.float32)
        yield (f"sparse gather conv g={groups} ({n} sites)",
               lambda w=w, g=groups: kernels.sparse_gather_conv_numba(fine, bidx, ii, jj, w, bb, 1, g),
               lambda w=w, g=groups: kernels.sparse_gather_conv_numpy(fine, bidx, ii, jj, w, bb, 1, g))
        yield (f"sparse submanifold conv g={groups}",
               lambda w=w, g=groups: kernels.sparse_submanifold_conv_numba(feat, nbr, w, bb, g),
               lambda w=w, g=groups: kernels.sparse_submanifold_conv_numpy(feat, nbr, w, bb, g))

    gamma, beta = np.ones(32, np.float32), np.zeros(32, np.float32)
    yield ("batch-norm train forward",
           lambda: kernels.bn_train_forward_numba(x, gamma, beta, 1e-5)[0],
           lambda: kernels.bn_train_forward_numpy(x, gamma, beta, 1e-5)[0])

    mask = rng.random((256, 256)) < 0.4
    yield ("8-connected labelling 256x256",
           lambda: kernels.label8_numba(mask),
           lambda: kernels.label8_numpy(mask))


def _diff(a, b):
    if isinstance(a, tuple):              # labelling: compare component counts
        return float(abs(a[1] - b[1]))
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':38s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'rel diff':>10s}")
    for name, nb, npy in _cases(rng):
        t_nb, t_np = _median_ms(nb, args.repeats), _median_ms(npy, args.repeats)
        print(f"{name:38s} {t_nb:10.3f} {t_np:10.3f} {t_np / t_nb:8.2f} {_diff(nb(), npy()):10.2e}")


if __name__ == "__main__":
    main()
