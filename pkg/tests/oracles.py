"""Scalar-loop reference implementations used only by the tests.

Written against plain nested Python loops over numpy scalars so they share no
code path with the vectorized torch / scipy implementations they check.
"""

import math

import numpy as np

EPS = 1e-5


def soft_dice(p, g):
    inter = ps = gs = 0.0
    for idx in np.ndindex(*p.shape):
        inter += float(p[idx]) * float(g[idx])
        ps += float(p[idx])
        gs += float(g[idx])
    return (2 * inter + EPS) / (ps + gs + EPS)


def dice_loss(prob, target, organs):
    prob = np.asarray(prob, dtype=np.float64)
    B, C, H, W = prob.shape
    total = 0.0
    for o in organs:
        p = np.zeros((B, H, W))
        g = np.zeros((B, H, W))
        for b in range(B):
            for y in range(H):
                for x in range(W):
                    p[b, y, x] = prob[b, o, y, x]
                    g[b, y, x] = 1.0 if target[b, y, x] == o else 0.0
        total += 1 - soft_dice(p, g)
    return total / len(organs)


def pd_overlap(prob, gt_j, organ_i, organ_j):
    prob = np.asarray(prob, dtype=np.float64)
    B, C, H, W = prob.shape
    u = np.zeros((B, H, W))
    g = np.zeros((B, H, W))
    for b in range(B):
        for y in range(H):
            for x in range(W):
                s = 0.0
                for o in organ_i:
                    s += prob[b, o, y, x]
                u[b, y, x] = min(s, 1.0)
                g[b, y, x] = 1.0 if int(gt_j[b, y, x]) in organ_j else 0.0
    return soft_dice(u, g)


def cosine_distance(u, v):
    dot = nu = nv = 0.0
    for a, b in zip(u, v):
        dot += float(a) * float(b)
        nu += float(a) ** 2
        nv += float(b) ** 2
    return 1 - dot / ((math.sqrt(nu) + 1e-8) * (math.sqrt(nv) + 1e-8))


def batch_cosine(fu, fv):
    return sum(cosine_distance(fu[b], fv[b]) for b in range(len(fu))) / len(fu)


def feature_difference(f_own, f_peers):
    return sum(batch_cosine(f_own, p) for p in f_peers) / len(f_peers)


def masked_ce(prob, labels, organs):
    prob = np.asarray(prob, dtype=np.float64)
    B, C, H, W = prob.shape
    total, n = 0.0, 0
    for b in range(B):
        for y in range(H):
            for x in range(W):
                lab = int(labels[b, y, x])
                if lab in organs:
                    p = prob[b, lab, y, x]
                else:
                    p = 0.0
                    for c in range(C):
                        if c not in organs:
                            p += prob[b, c, y, x]
                total += -math.log(max(p, 1e-8))
                n += 1
    return total / n


def mask(ce_own, ce_peer):
    return 0 if ce_own > ce_peer else 1


def dfs(f_own, f_peer, m):
    return (1 - m) * batch_cosine(f_own, f_peer)


def stage1_total(dice, pd, fd, lam_l, lam_f):
    total = 0.0
    for d, p, f in zip(dice, pd, fd):
        total += d + lam_l * p - lam_f * f
    return total


def stage2_total(dice, ps, dfs_, beta_l, beta_f):
    total = 0.0
    for d, p, f in zip(dice, ps, dfs_):
        total += d + beta_l * p + beta_f * f
    return total


def dsc(a, b):
    na = nb = inter = 0
    for idx in np.ndindex(*a.shape):
        na += bool(a[idx])
        nb += bool(b[idx])
        inter += bool(a[idx]) and bool(b[idx])
    if na == 0 and nb == 0:
        return 1.0
    return 2 * inter / (na + nb)


def boundary_points(m):
    H, W = m.shape
    pts = []
    for y in range(H):
        for x in range(W):
            if not m[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < H and 0 <= xx < W) or not m[yy, xx]:
                    pts.append((y, x))
                    break
    return pts


def assd(a, b):
    pa, pb = boundary_points(a), boundary_points(b)
    if not pa or not pb:
        return math.nan

    def nearest(p, pts):
        return min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in pts)

    total = sum(nearest(p, pb) for p in pa) + sum(nearest(p, pa) for p in pb)
    return total / (len(pa) + len(pb))
