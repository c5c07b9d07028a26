import numpy as np
import pytest

from spirdet import _backend


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    if request.param == "numba" and not _backend.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(_backend, "USE_NUMBA", request.param == "numba")
    return request.param


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(capsys):
    """``report(n, ok, detail)`` prints one PASS/FAIL line and fails the test when ``ok`` is false."""
    def report(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}", flush=True)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv(x, w, b, stride=1, pad=0, groups=1):
    """Seven nested loops, float64; the reference for every convolution test."""
    x = np.asarray(x, np.float64)
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    og = O // groups
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            g = o // og
            for y in range(Ho):
                for xx in range(Wo):
                    s = 0.0 if b is None else float(b[o])
                    for ic in range(Cg):
                        for ky in range(kh):
                            for kx in range(kw):
                                s += w[o, ic, ky, kx] * xp[n, g * Cg + ic, y * stride + ky, xx * stride + kx]
                    out[n, o, y, xx] = s
    return out


def flood_fill_labels(mask):
    """Breadth-first 8-connected labelling in raster order of seeds."""
    from collections import deque

    m = np.asarray(mask, bool)
    H, W = m.shape
    lab = np.zeros((H, W), int)
    n = 0
    for y in range(H):
        for x in range(W):
            if m[y, x] and not lab[y, x]:
                n += 1
                lab[y, x] = n
                q = deque([(y, x)])
                while q:
                    cy, cx = q.popleft()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = cy + dy, cx + dx
                            if 0 <= yy < H and 0 <= xx < W and m[yy, xx] and not lab[yy, xx]:
                                lab[yy, xx] = n
                                q.append((yy, xx))
    return lab, n
