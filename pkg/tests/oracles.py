"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the package; each routine is written from the textbook
definition so it can catch vectorisation mistakes in the library.
"""
import math

import numpy as np


def zhang_suen_reference(mask):
    """Zhang-Suen thinning, pixel by pixel, with a zero border."""
    H, W = len(mask), len(mask[0])
    img = [[0] * (W + 2) for _ in range(H + 2)]
    for r in range(H):
        for c in range(W):
            img[r + 1][c + 1] = 1 if mask[r][c] else 0

    def nbrs(r, c):
        # P2..P9 clockwise from north
        return [img[r - 1][c], img[r - 1][c + 1], img[r][c + 1], img[r + 1][c + 1],
                img[r + 1][c], img[r + 1][c - 1], img[r][c - 1], img[r - 1][c - 1]]

    changed = True
    while changed:
        changed = False
        for step in (1, 2):
            marked = []
            for r in range(1, H + 1):
                for c in range(1, W + 1):
                    if img[r][c] != 1:
                        continue
                    P = nbrs(r, c)
                    B = sum(P)
                    A = sum(1 for k in range(8) if P[k] == 0 and P[(k + 1) % 8] == 1)
                    p2, p4, p6, p8 = P[0], P[2], P[4], P[6]
                    if not (2 <= B <= 6 and A == 1):
                        continue
                    if step == 1 and p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0:
                        marked.append((r, c))
                    if step == 2 and p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0:
                        marked.append((r, c))
            for r, c in marked:
                img[r][c] = 0
            if marked:
                changed = True
    return np.array([row[1:W + 1] for row in img[1:H + 1]], dtype=bool)


def bilinear_reference(src, H, W):
    """Half-pixel bilinear resize, one output pixel at a time."""
    h, w = len(src), len(src[0])
    out = np.zeros((H, W))
    for i in range(H):
        y = min(max((i + 0.5) * h / H - 0.5, 0.0), h - 1)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(W):
            x = min(max((j + 0.5) * w / W - 0.5, 0.0), w - 1)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * src[y0][x0] + fx * src[y0][x1])
                         + fy * ((1 - fx) * src[y1][x0] + fx * src[y1][x1]))
    return out


def iou_reference(pred, gt):
    inter = union = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        inter += bool(p) and bool(g)
        union += bool(p) or bool(g)
    return 1.0 if union == 0 else inter / union


def miou_reference(cams, gts, sigmas=(0.5, 0.7)):
    """cams already at mask resolution."""
    per_sigma = []
    for s in sigmas:
        scores = [iou_reference(np.asarray(c) >= s, g) for c, g in zip(cams, gts)]
        per_sigma.append(sum(scores) / len(scores))
    return sum(per_sigma) / len(per_sigma)


def attention_reference(Q, K, V):
    n, dk = len(Q), len(Q[0])
    out = []
    for i in range(n):
        s = [sum(Q[i][t] * K[j][t] for t in range(dk)) / math.sqrt(dk) for j in range(len(K))]
        mx = max(s)
        e = [math.exp(x - mx) for x in s]
        z = sum(e)
        out.append([sum(e[j] / z * V[j][c] for j in range(len(V))) for c in range(len(V[0]))])
    return np.array(out)


def bce_reference(logit, label):
    p = 1.0 / (1.0 + math.exp(-logit))
    return -(label * math.log(p) + (1 - label) * math.log(1 - p))


def cosine_reference(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def pos_loss_reference(fg, floor=1e-6):
    m = len(fg)
    if m == 0:
        return 0.0
    tot = 0.0
    for i in range(m):
        for j in range(m):
            tot += math.log(min(max(cosine_reference(fg[i], fg[j]), floor), 1.0))
    return -tot / (m * m)


def neg_loss_reference(fg, bg, floor=1e-6):
    m, n = len(fg), len(bg)
    if m == 0 or n == 0:
        return 0.0
    tot = 0.0
    for i in range(m):
        for j in range(n):
            tot += math.log(min(max(1.0 - cosine_reference(fg[i], bg[j]), floor), 1.0))
    return -tot / (m * n)


def adamw_reference(grad_fn, x0, lr, steps, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    """Scalar AdamW with bias correction and decoupled weight decay."""
    x, m, v = float(x0), 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * wd * x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out


def shape_corpus():
    """Twenty small binary shapes for thinning tests."""
    shapes = {}

    def blank(h, w):
        return np.zeros((h, w), dtype=bool)

    s = blank(5, 12); s[1:4, 1:11] = True; shapes["bar_3x10"] = s
    s = blank(12, 5); s[1:11, 1:4] = True; shapes["vbar"] = s
    s = blank(9, 9); s[1:8, 1:8] = True; shapes["square"] = s
    s = blank(7, 9); s[3, 1:8] = True; shapes["thin_line"] = s
    s = blank(9, 9); np.fill_diagonal(s[1:8, 1:8], True); shapes["diagonal"] = s
    s = blank(11, 11); s[1:10, 4:7] = True; s[4:7, 1:10] = True; shapes["plus"] = s
    s = blank(11, 11); s[1:10, 1:4] = True; s[7:10, 1:10] = True; shapes["ell"] = s
    s = blank(11, 11); s[1:10, 1:10] = True; s[4:7, 4:7] = False; shapes["ring"] = s
    yy, xx = np.mgrid[0:15, 0:15]
    shapes["disk"] = (yy - 7) ** 2 + (xx - 7) ** 2 <= 36
    shapes["annulus"] = ((yy - 7) ** 2 + (xx - 7) ** 2 <= 42) & ((yy - 7) ** 2 + (xx - 7) ** 2 >= 9)
    shapes["ellipse"] = ((yy - 7) / 6.5) ** 2 + ((xx - 7) / 3.5) ** 2 <= 1
    s = blank(11, 13); s[1:10, 1:4] = True; s[1:4, 1:12] = True; s[1:10, 9:12] = True; shapes["arch"] = s
    s = blank(12, 12); s[1:11, 2:5] = True; s[1:11, 7:10] = True; shapes["two_bars"] = s
    s = blank(13, 13); s[6:9, 1:12] = True; s[1:12, 1:4] = True; s[1:12, 9:12] = True; shapes["H"] = s
    s = blank(13, 13)
    for k in range(1, 12):
        s[k, max(k - 2, 0):k + 2] = True
    shapes["thick_diag"] = s
    s = blank(10, 10); s[2:8, 2:8] = True; s[4, 4] = False; shapes["hole_pixel"] = s
    shapes["empty"] = blank(6, 6)
    s = blank(5, 5); s[2, 2] = True; shapes["single"] = s
    s = blank(16, 10)
    for r in range(1, 15):
        c = int(round(4 + 2.5 * math.sin(r / 2.5)))
        s[r, c - 1:c + 2] = True
    shapes["wavy"] = s
    rng = np.random.default_rng(5)
    s = rng.random((14, 14)) < 0.55
    s[0, :] = s[-1, :] = s[:, 0] = s[:, -1] = False
    shapes["random_blob"] = s
    return shapes
