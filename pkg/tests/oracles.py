"""Independent loop-based re-implementations used as test oracles.

Nothing here touches the autodiff engine: every routine works on plain
numpy arrays with explicit Python loops over nodes, candidates and
features, so agreement with the vectorised code is meaningful.
"""
from __future__ import annotations

import math

import numpy as np


def relu(x):
    return x if x > 0 else 0.0


def leaky(x, slope=0.01):
    return x if x > 0 else slope * x


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def softmax_list(values, allowed=None):
    allowed = [True] * len(values) if allowed is None else list(allowed)
    live = [v for v, a in zip(values, allowed) if a]
    if not live:
        return [0.0] * len(values)
    top = max(live)
    exps = [math.exp(v - top) if a else 0.0 for v, a in zip(values, allowed)]
    total = sum(exps)
    return [e / total for e in exps]


def gcn_channel(adj, h, w, b):
    """relu((A^T H W)[i, f] + b[i]) with explicit sums."""
    n, din = h.shape
    dout = w.shape[1]
    out = np.zeros((n, dout))
    for i in range(n):
        for f in range(dout):
            acc = 0.0
            for j in range(n):
                for c in range(din):
                    acc += adj[j, i] * h[j, c] * w[c, f]
            out[i, f] = relu(acc + b[i])
    return out


def od_gcn(h_o, h_d, a_t, a_s, p):
    z_o = gcn_channel(a_t, h_o, p["W_flow_O"], p["b_flow_O"]) + gcn_channel(a_s, h_o, p["W_adapt_O"], p["b_adapt_O"])
    z_d = gcn_channel(a_t, h_d, p["W_flow_D"], p["b_flow_D"]) + gcn_channel(a_s, h_d, p["W_adapt_D"], p["b_adapt_D"])
    return np.concatenate([z_o, z_d], axis=1)


def adaptive(e_o, e_d):
    n = e_o.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        logits = [relu(float(np.dot(e_o[i], e_d[j]))) for j in range(n)]
        out[i] = softmax_list(logits)
    return out


def temporal(z, p):
    """Single-sample temporal attention on z of shape (L, N, d_e); returns (P, scores)."""
    length, n, d_e = z.shape
    left = np.zeros((length, n))
    right = np.zeros((length, n))
    for l in range(length):
        mix = [sum(z[l, v, d] * p["W_e1"][v] for v in range(n)) for d in range(d_e)]
        for v in range(n):
            left[l, v] = sum(mix[d] * p["W_e2"][d, v] for d in range(d_e))
            right[l, v] = sum(z[l, v, d] * p["W_e3"][d] for d in range(d_e))
    gated = np.zeros((length, length))
    for l in range(length):
        for k in range(length):
            gated[l, k] = sigmoid(sum(left[l, v] * right[k, v] for v in range(n)) + p["b_e"][k])
    dep = np.zeros((length, length))
    for l in range(length):
        for k in range(length):
            dep[l, k] = sum(p["W_e0"][l, q] * gated[q, k] for q in range(length))
    scores = np.array([softmax_list(list(dep[l])) for l in range(length)])
    weighted = np.zeros_like(z)
    for l in range(length):
        for k in range(length):
            weighted[l] += scores[l, k] * z[k]
    half = d_e // 2
    flat = np.zeros((n, length * d_e))
    for v in range(n):
        col = 0
        for lo, hi in ((0, half), (half, d_e)):
            for l in range(length):
                for d in range(lo, hi):
                    flat[v, col] = weighted[l, v, d]
                    col += 1
    return flat, scores


def global_scores(p_all, grids, w_g, a_o, a_d, slope, restricted=True):
    """Score rows per mode and role; column order follows the other modes in index order."""
    modes = len(p_all)
    out = []
    for m in range(modes):
        half = p_all[m].shape[1] // 2
        roles = []
        for role, a in ((0, a_o), (1, a_d)):
            sl = slice(0, half) if role == 0 else slice(half, 2 * half)
            rows = []
            for i in range(p_all[m].shape[0]):
                here = {n for n in range(modes) if tuple(grids[m][i]) in {tuple(g) for g in grids[n]}}
                own = p_all[m][i, sl] @ w_g
                logits, allowed = [], []
                for n in range(modes):
                    if n == m:
                        continue
                    for j in range(p_all[n].shape[0]):
                        cand = p_all[n][j, sl] @ w_g
                        h = own.size
                        logits.append(leaky(float(np.dot(a[:h], own) + np.dot(a[h:], cand)), slope))
                        allowed.append((n in here) if restricted else True)
                rows.append(softmax_list(logits, allowed))
            roles.append(np.array(rows))
        out.append(roles)
    return out


def mode_distinct(scores, p_all, w_o, w_d):
    modes = len(p_all)
    out = []
    for m in range(modes):
        half = p_all[m].shape[1] // 2
        parts = []
        for role, w in ((0, w_o), (1, w_d)):
            sl = slice(0, half) if role == 0 else slice(half, 2 * half)
            res = np.zeros((p_all[m].shape[0], w.shape[1]))
            for i in range(p_all[m].shape[0]):
                own = p_all[m][i, sl] @ w
                col = 0
                for n in range(modes):
                    if n == m:
                        continue
                    for j in range(p_all[n].shape[0]):
                        cand = p_all[n][j, sl] @ w
                        for f in range(w.shape[1]):
                            res[i, f] += scores[m][role][i, col] * abs(own[f] - cand[f])
                        col += 1
            parts.append(res)
        out.append(np.concatenate(parts, axis=1))
    return out


def local(p_all, grids, w_o, w_d, a_o, a_d, slope):
    """(S per mode, attention rows per (grid, mode, role))."""
    modes = len(p_all)
    cells = sorted({tuple(g) for gs in grids for g in gs})
    s_out = [np.zeros((p.shape[0], p.shape[1])) for p in p_all]
    attn = {}
    for cell in cells:
        present = {n: [tuple(g) for g in grids[n]].index(cell) for n in range(modes) if cell in {tuple(g) for g in grids[n]}}
        if len(present) < 2:
            continue
        for m, i in present.items():
            half = p_all[m].shape[1] // 2
            for role, w, a in ((0, w_o, a_o), (1, w_d, a_d)):
                same = slice(0, half) if role == 0 else slice(half, 2 * half)
                cross = slice(half, 2 * half) if role == 0 else slice(0, half)
                x = p_all[m][i, same] @ w
                logits, members = [], []
                for n in range(modes):
                    if n not in present:
                        continue
                    y = p_all[n][present[n], same] @ w
                    logits.append(leaky(float(np.dot(a[:x.size], x) + np.dot(a[x.size:], y)), slope))
                    members.append(n)
                weights = softmax_list(logits)
                attn[(cell, m, role)] = dict(zip(members, weights))
                for n, wt in zip(members, weights):
                    y = p_all[n][present[n], cross] @ w
                    for f in range(w.shape[1]):
                        s_out[m][i, role * w.shape[1] + f] += wt * abs(x[f] - y[f])
    return s_out, attn


def interaction(p, c, s, w):
    """U = W_f1*P + W_f2*(c E_g^T) + W_f3*(S E_l^T) with explicit loops."""
    n, d = p.shape

    def gate(a, b, wa, wb):
        pa, cb = a @ wa, b @ wb
        e = np.zeros((d, d))
        for x in range(d):
            for y in range(d):
                e[x, y] = sigmoid(sum(pa[v, x] * cb[v, y] for v in range(n)))
        return e

    e_g = gate(p, c, w["W_p1"], w["W_p2"])
    e_l = gate(p, s, w["W_p3"], w["W_p4"])
    u = np.zeros((n, d))
    for v in range(n):
        for x in range(d):
            u[v, x] = (
                w["W_f1"][v, x] * p[v, x]
                + w["W_f2"][v, x] * sum(c[v, y] * e_g[x, y] for y in range(d))
                + w["W_f3"][v, x] * sum(s[v, y] * e_l[x, y] for y in range(d))
            )
    return u


def bilinear(u, w):
    n, d = u.shape
    h = d // 2
    out = np.zeros((n, n))
    for i in range(n):
        left = [sum(w[i, k] * u[k, f] for k in range(n)) for f in range(h)]
        for j in range(n):
            out[i, j] = sum(left[f] * u[j, h + f] for f in range(h))
    return out


def metrics(preds, truths):
    errs = []
    for p, t in zip(preds, truths):
        errs.extend((np.ravel(p) - np.ravel(t)).tolist())
    mae = sum(abs(e) for e in errs) / len(errs)
    rmse = math.sqrt(sum(e * e for e in errs) / len(errs))
    return mae, rmse
