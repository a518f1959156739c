"""Independent slow reference implementations used as test oracles.

Everything here is written the dumbest possible way (explicit loops over
output elements) so a bug in the fast kernels cannot be mirrored here.
"""

import numpy as np


def conv3d_reference(x, w, bias=None, stride=1, pad=1):
    """Direct-summation 3D cross-correlation."""
    n, cin, d, h, wd = x.shape
    cout, cin2, kd, kh, kw = w.shape
    assert cin == cin2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od = (d + 2 * pad - kd) // stride + 1
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, od, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for o in range(cout):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        acc = 0.0
                        for c in range(cin):
                            for a in range(kd):
                                for b in range(kh):
                                    for e in range(kw):
                                        acc += (
                                            w[o, c, a, b, e]
                                            * xp[ni, c, z * stride + a, y * stride + b, xx * stride + e]
                                        )
                        out[ni, o, z, y, xx] = acc
    if bias is not None:
        out += bias[None, :, None, None, None]
    return out


def conv3d_transpose_reference(x, w, stride=1, pad=0):
    """Direct scatter: every input element sprays its kernel into the output."""
    n, cin, d, h, wd = x.shape
    cin2, cout, kd, kh, kw = w.shape
    assert cin == cin2
    od = (d - 1) * stride + kd
    oh = (h - 1) * stride + kh
    ow = (wd - 1) * stride + kw
    buf = np.zeros((n, cout, od, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for c in range(cin):
            for z in range(d):
                for y in range(h):
                    for xx in range(wd):
                        v = x[ni, c, z, y, xx]
                        for o in range(cout):
                            for a in range(kd):
                                for b in range(kh):
                                    for e in range(kw):
                                        buf[ni, o, z * stride + a, y * stride + b, xx * stride + e] += (
                                            v * w[c, o, a, b, e]
                                        )
    if pad:
        buf = buf[:, :, pad:od - pad, pad:oh - pad, pad:ow - pad]
    return buf


def max_pool3d_reference(x, k=2, stride=2):
    n, c, d, h, w = x.shape
    od = (d - k) // stride + 1
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((n, c, od, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        window = x[
                            ni, ci,
                            z * stride : z * stride + k,
                            y * stride : y * stride + k,
                            xx * stride : xx * stride + k,
                        ]
                        out[ni, ci, z, y, xx] = window.max()
    return out


def matmul_reference(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=a.dtype)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def cube_iou_reference(a, b):
    """IoU of two (cx, cy, cz, r) cubes via explicit interval overlap."""
    def interval_overlap(c1, r1, c2, r2):
        lo = max(c1 - r1, c2 - r2)
        hi = min(c1 + r1, c2 + r2)
        return max(0.0, hi - lo)

    ox = interval_overlap(a[0], a[3], b[0], b[3])
    oy = interval_overlap(a[1], a[3], b[1], b[3])
    oz = interval_overlap(a[2], a[3], b[2], b[3])
    inter = ox * oy * oz
    va = (2 * a[3]) ** 3
    vb = (2 * b[3]) ** 3
    return inter / (va + vb - inter)


def nms_reference(boxes, probs, thresh):
    """Exhaustive NMS: repeatedly take the best remaining candidate and
    delete everything it overlaps, recomputing from scratch each round."""
    boxes = np.asarray(boxes, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    remaining = list(range(len(probs)))
    kept = []
    while remaining:
        # best probability, ties to the lowest index
        best = min(remaining, key=lambda i: (-probs[i], i))
        kept.append(best)
        survivors = []
        for i in remaining:
            if cube_iou_reference(boxes[best], boxes[i]) <= thresh:
                survivors.append(i)
        remaining = survivors
    return kept


def froc_reference(scans, target_rates):
    """Brute-force FROC: for every threshold, re-run matching from scratch.

    scans: list of (candidates, nodules) where candidates are
    (x, y, z, prob) tuples and nodules are (x, y, z, radius) tuples.
    Returns (operating_fps, operating_sens, interpolated_at_targets).
    """
    all_probs = sorted(
        {c[3] for cands, _ in scans for c in cands}, reverse=True
    )
    total_nodules = sum(len(nods) for _, nods in scans)
    n_scans = len(scans)
    points = {}
    for t in all_probs:
        tp = 0
        fp = 0
        for cands, nods in scans:
            surviving = [c for c in cands if c[3] >= t]
            surviving.sort(key=lambda c: -c[3])
            detected = [False] * len(nods)
            for c in surviving:
                hits = []
                for j, nd in enumerate(nods):
                    dist = np.sqrt(
                        (c[0] - nd[0]) ** 2 + (c[1] - nd[1]) ** 2 + (c[2] - nd[2]) ** 2
                    )
                    if dist <= nd[3]:
                        hits.append((dist, j))
                if not hits:
                    fp += 1
                    continue
                undetected = [(d, j) for d, j in hits if not detected[j]]
                if undetected:
                    undetected.sort()
                    detected[undetected[0][1]] = True
                    tp += 1
                # hitters of already-detected nodules are ignored
        rate = fp / n_scans
        sens = tp / total_nodules
        points[rate] = max(points.get(rate, 0.0), sens)
    fps = np.array(sorted(points))
    sens = np.array([points[r] for r in fps])
    if len(fps) == 0:
        fps = np.array([0.0])
        sens = np.array([0.0])
    interp = np.interp(np.asarray(target_rates, dtype=float), fps, sens,
                       left=0.0, right=float(sens[-1]))
    return fps, sens, interp
