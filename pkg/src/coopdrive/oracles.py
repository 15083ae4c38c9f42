"""Independent reference implementations used to cross-check the fast paths.

Everything here is written with explicit Python loops and shares no code with
the production implementations it validates.
"""

from __future__ import annotations

import math

import numpy as np


def brute_force_self_attention(z, u_qkv):
    """Scalar-loop qkv self-attention for one head."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u_qkv, dtype=float)
    n, d = z.shape
    d_head = u.shape[1] // 3
    q = [[0.0] * d_head for _ in range(n)]
    k = [[0.0] * d_head for _ in range(n)]
    v = [[0.0] * d_head for _ in range(n)]
    for i in range(n):
        for j in range(d_head):
            sq = sk = sv = 0.0
            for c in range(d):
                sq += z[i][c] * u[c][j]
                sk += z[i][c] * u[c][d_head + j]
                sv += z[i][c] * u[c][2 * d_head + j]
            q[i][j], k[i][j], v[i][j] = sq, sk, sv
    scale = 1.0 / math.sqrt(d_head)
    out = [[0.0] * d_head for _ in range(n)]
    for i in range(n):
        logits = []
        for j in range(n):
            s = 0.0
            for c in range(d_head):
                s += q[i][c] * k[j][c]
            logits.append(s * scale)
        m = max(logits)
        exps = [math.exp(x - m) for x in logits]
        total = sum(exps)
        weights = [e / total for e in exps]
        for c in range(d_head):
            s = 0.0
            for j in range(n):
                s += weights[j] * v[j][c]
            out[i][c] = s
    return np.array(out)


def brute_force_multi_head_attention(z, u_heads, w_o):
    """Per-head brute-force attention, concatenated and projected by loops."""
    z = np.asarray(z, dtype=float)
    w_o = np.asarray(w_o, dtype=float)
    n = z.shape[0]
    heads = [brute_force_self_attention(z, u) for u in u_heads]
    d_head = heads[0].shape[1]
    concat = [[0.0] * (len(heads) * d_head) for _ in range(n)]
    for i in range(n):
        for h, head in enumerate(heads):
            for c in range(d_head):
                concat[i][h * d_head + c] = head[i][c]
    d_out = w_o.shape[1]
    out = [[0.0] * d_out for _ in range(n)]
    for i in range(n):
        for j in range(d_out):
            s = 0.0
            for c in range(len(heads) * d_head):
                s += concat[i][c] * w_o[c][j]
            out[i][j] = s
    return np.array(out)
