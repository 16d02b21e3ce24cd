"""Independent reference implementations used by the tests.

Plain loops over scalars, sharing no code with the package.
"""

import math


def alpha_bar_loop(T, beta_min, beta_max):
    out = []
    prod = 1.0
    for t in range(1, T + 1):
        beta = beta_min if T == 1 else beta_min + (t - 1) / (T - 1) * (beta_max - beta_min)
        prod *= 1.0 - beta
        out.append(prod)
    return out


def patch_loop(img, r, c, P):
    """Zero-padded P x P window with top-left at (r, c) - floor((P - 1) / 2)."""
    C, L = len(img), len(img[0])
    o = (P - 1) // 2
    return [[[img[ch][r - o + i][c - o + j] if 0 <= r - o + i < L and 0 <= c - o + j < L else 0.0
              for j in range(P)] for i in range(P)] for ch in range(C)]


def pool_loop(patch, w):
    C, P = len(patch), len(patch[0])
    m = P // w
    return [[[sum(patch[ch][i * w + a][j * w + b] for a in range(w) for b in range(w)) / (w * w)
              for j in range(m)] for i in range(m)] for ch in range(C)]


def distance_loop(qpatch, train_img, abar, P, w=1):
    """Squared distance from a (pooled) query patch to every training patch, as an L x L list."""
    L = len(train_img[0])
    sa = math.sqrt(abar)
    out = []
    for r in range(L):
        row = []
        for c in range(L):
            u = patch_loop(train_img, r, c, P)
            if w > 1:
                u = pool_loop(u, w)
            total = 0.0
            for ch in range(len(u)):
                for i in range(len(u[0])):
                    for j in range(len(u[0])):
                        total += (qpatch[ch][i][j] - sa * u[ch][i][j]) ** 2
            row.append(total)
        out.append(row)
    return out


def softmax_loop(logits):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def rank_avg(a):
    order = sorted(range(len(a)), key=lambda i: a[i])
    ranks = [0.0] * len(a)
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        for q in range(i, j + 1):
            ranks[order[q]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_loop(a, b):
    ra, rb = rank_avg(a), rank_avg(b)
    ma, mb = sum(ra) / len(ra), sum(rb) / len(rb)
    num = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    den = math.sqrt(sum((x - ma) ** 2 for x in ra) * sum((y - mb) ** 2 for y in rb))
    return num / den


def topk_sum_loop(values, k):
    return sum(sorted(values, reverse=True)[:k])
