"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here imports the code under test except for plain data types.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

NEIGHBORS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


# --------------------------------------------------------------------------
# images


def brute_edt(mask: np.ndarray) -> np.ndarray:
    """Distance from each True pixel to the nearest False pixel (0 on False)."""
    mask = np.asarray(mask, dtype=bool)
    zeros = np.argwhere(~mask)
    out = np.zeros(mask.shape)
    if len(zeros) == 0:
        out[mask] = np.inf
        return out
    for r, c in np.argwhere(mask):
        out[r, c] = math.sqrt(((zeros - (r, c)) ** 2).sum(axis=1).min())
    return out


def bfs_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labels numbered in row-major discovery order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    n = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not labels[r, c]:
                n += 1
                labels[r, c] = n
                queue = deque([(r, c)])
                while queue:
                    y, x = queue.popleft()
                    for dy, dx in NEIGHBORS8:
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not labels[yy, xx]:
                            labels[yy, xx] = n
                            queue.append((yy, xx))
    return labels, n


def same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    """True if two label maps describe the same regions up to renumbering."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if ((a == 0) != (b == 0)).any():
        return False
    fwd: dict[int, int] = {}
    bwd: dict[int, int] = {}
    for x, y in zip(a.tolist(), b.tolist()):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


# --------------------------------------------------------------------------
# pixel grouping


def naive_recount(instances: np.ndarray, classes: np.ndarray, n_classes: int = 6) -> dict[int, tuple[int, list[int]]]:
    """``{id: (class, histogram)}`` by walking every pixel."""
    hists: dict[int, list[int]] = {}
    for i, c in zip(np.asarray(instances).ravel().tolist(), np.asarray(classes).ravel().tolist()):
        if i:
            hists.setdefault(i, [0] * n_classes)[c] += 1
    out = {}
    for i, hist in hists.items():
        best, best_count = 0, 0
        for c in range(1, n_classes):
            if hist[c] > best_count:
                best, best_count = c, hist[c]
        out[i] = (best, hist)
    return out


# --------------------------------------------------------------------------
# network, scalar float64 loops


def _conv(x, kernel, bias):
    h, w, cin = len(x), len(x[0]), len(x[0][0])
    kh, kw, _, cout = kernel.shape
    ph, pw = kh // 2, kw // 2
    out = [[[0.0] * cout for _ in range(w)] for _ in range(h)]
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = float(bias[o])
                for a in range(kh):
                    for b in range(kw):
                        ii, jj = i + a - ph, j + b - pw
                        if 0 <= ii < h and 0 <= jj < w:
                            for c in range(cin):
                                acc += x[ii][jj][c] * float(kernel[a, b, c, o])
                out[i][j][o] = acc
    return out


def _map(x, fn):
    return [[[fn(v) for v in px] for px in row] for row in x]


def _relu(x):
    return _map(x, lambda v: max(v, 0.0))


def _sigmoid(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _bn(x, wts, p):
    g, b, m, var = (wts[f"{p}/{k}"] for k in ("gamma", "beta", "mean", "var"))
    return [
        [[(v - float(m[c])) / math.sqrt(float(var[c]) + 1e-5) * float(g[c]) + float(b[c]) for c, v in enumerate(px)] for px in row]
        for row in x
    ]


def _cat(a, b):
    return [[pa + pb for pa, pb in zip(ra, rb)] for ra, rb in zip(a, b)]


def _conv_at(x, wts, p):
    return _conv(x, wts[f"{p}/kernel"], wts[f"{p}/bias"])


def _res(x, wts, p):
    t0 = _relu(_conv_at(x, wts, f"{p}/conv1"))
    t1 = _bn(_relu(_conv_at(t0, wts, f"{p}/conv2")), wts, f"{p}/bn1")
    return _bn(_relu(_conv_at(_cat(t0, t1), wts, f"{p}/fuse")), wts, f"{p}/bn2")


def _pool(x):
    h, w = len(x) // 2, len(x[0]) // 2
    return [
        [[max(x[2 * i + a][2 * j + b][c] for a in (0, 1) for b in (0, 1)) for c in range(len(x[0][0]))] for j in range(w)]
        for i in range(h)
    ]


def _gap_gmp(x):
    h, w, c = len(x), len(x[0]), len(x[0][0])
    avg = [sum(x[i][j][k] for i in range(h) for j in range(w)) / (h * w) for k in range(c)]
    mx = [max(x[i][j][k] for i in range(h) for j in range(w)) for k in range(c)]
    return [[avg]], [[mx]]


def _decoder(f_enc, f_dec, wts, p):
    ea, em = _gap_gmp(f_enc)
    da, dm = _gap_gmp(f_dec)
    i_desc = _cat(_relu(_conv_at(ea, wts, f"{p}/att/cha/enc_avg")), _relu(_conv_at(em, wts, f"{p}/att/cha/enc_max")))
    j_desc = _cat(_relu(_conv_at(da, wts, f"{p}/att/cha/dec_avg")), _relu(_conv_at(dm, wts, f"{p}/att/cha/dec_max")))
    hidden = _relu(_conv_at(_cat(i_desc, j_desc), wts, f"{p}/att/cha/fuse"))
    gate_c = [_sigmoid(v) for v in _conv_at(hidden, wts, f"{p}/att/cha/expand")[0][0]]

    def cmean(f):
        return [[[sum(px) / len(px)] for px in row] for row in f]

    k = _relu(_conv_at(cmean(f_enc), wts, f"{p}/att/spa/enc"))
    l = _relu(_conv_at(cmean(f_dec), wts, f"{p}/att/spa/dec"))
    gate_s = _map(_conv_at(_cat(k, l), wts, f"{p}/att/spa/fuse"), _sigmoid)
    refined = [
        [[v * gate_c[c] * gate_s[i][j][0] for c, v in enumerate(px)] for j, px in enumerate(row)]
        for i, row in enumerate(f_enc)
    ]
    x = _cat(refined, f_dec)
    kernel, bias = wts[f"{p}/up/kernel"], wts[f"{p}/up/bias"]
    h, w, cin, cout = len(x), len(x[0]), kernel.shape[2], kernel.shape[3]
    out = [[[0.0] * cout for _ in range(2 * w)] for _ in range(2 * h)]
    for i in range(h):
        for j in range(w):
            for a in (0, 1):
                for b in (0, 1):
                    for o in range(cout):
                        acc = float(bias[o])
                        for c in range(cin):
                            acc += x[i][j][c] * float(kernel[a, b, c, o])
                        out[2 * i + a][2 * j + b][o] = max(acc, 0.0)
    return out


def scalar_forward(image: np.ndarray, wts, stages: int):
    """Float64 pure-Python forward pass; returns (semantic, edges, classes) arrays."""
    x = [[[v / 255.0 for v in px] for px in row] for row in np.asarray(image, dtype=np.float64).tolist()]
    skips = []
    for s in range(stages):
        x = _pool(_res(x, wts, f"enc/{s}/res"))
        skips.append(x)
    bottleneck = _res(x, wts, "bottleneck/res")
    outs = {}
    for head in ("semantic", "edge", "class"):
        d = bottleneck
        for k in range(stages):
            d = _decoder(skips[stages - 1 - k], d, wts, f"dec/{head}/{k}")
        logits = _conv_at(d, wts, f"out/{head}")
        if head == "class":
            probs = []
            for row in logits:
                prow = []
                for px in row:
                    m = max(px)
                    e = [math.exp(v - m) for v in px]
                    prow.append([v / sum(e) for v in e])
                probs.append(prow)
            outs[head] = np.array(probs)
        else:
            outs[head] = np.array(_map(logits, _sigmoid))[:, :, 0]
    return outs["semantic"], outs["edge"], outs["class"]


# --------------------------------------------------------------------------
# numerics


def central_difference(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, tiny)``."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / scale)
