"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``.

Same signatures and return conventions. Used when the extension is not built
or when ``PMFOREST_PURE_PYTHON=1`` is set.
"""

import heapq
import math

import numpy as np


def code_scores(codes, query, nbits):
    x = np.bitwise_xor(np.asarray(codes, dtype=np.uint64), np.asarray(query, dtype=np.uint64))
    return nbits - 2 * np.bitwise_count(x).sum(axis=1, dtype=np.int64)


def code_scores_batch(codes, queries, nbits):
    codes = np.asarray(codes, dtype=np.uint64)
    return np.stack([code_scores(codes, q, nbits) for q in np.asarray(queries, dtype=np.uint64)]) \
        if len(queries) else np.zeros((0, codes.shape[0]), dtype=np.int64)


def _leaf_dists(block, q, p):
    diff = np.abs(block - q)
    if p == 2.0:
        return (diff * diff).sum(axis=1)
    if p == 1.0:
        return diff.sum(axis=1)
    if p == 0.5:
        return np.sqrt(diff).sum(axis=1)
    return (diff ** p).sum(axis=1)


def tree_knn(data, order, axis, normal, offset, scale, left, right, start, end, root,
             queries, k, p):
    nq = queries.shape[0]
    ids = np.full((nq, k), -1, dtype=np.int64)
    dists = np.full((nq, k), np.inf)
    l2 = p == 2.0
    for qi in range(nq):
        q = queries[qi]
        # max-heap of (-dist, -id) keeps the current worst on top
        best = []
        stack = [(int(root), 0.0)]
        while stack:
            node, b = stack.pop()
            if len(best) == k and b > -best[0][0]:
                continue
            if left[node] < 0:
                members = order[start[node]:end[node]]
                if members.size == 0:
                    continue
                d = _leaf_dists(data[members], q, p)
                for dist, pid in zip(d.tolist(), members.tolist()):
                    item = (-dist, -pid)
                    if len(best) < k:
                        heapq.heappush(best, item)
                    elif item > best[0]:
                        heapq.heapreplace(best, item)
                continue
            if axis[node] >= 0:
                proj = q[axis[node]]
            else:
                proj = float(normal[node] @ q)
            diff = proj - offset[node]
            near, far = (left[node], right[node]) if diff <= 0.0 else (right[node], left[node])
            pb = abs(diff) * scale[node]
            if l2:
                pb = pb * pb
            elif p == 0.5:
                pb = math.sqrt(pb)
            elif p != 1.0:
                pb = math.pow(pb, p)
            stack.append((int(far), max(pb, b)))
            stack.append((int(near), b))
        ranked = sorted((-nd, -ni) for nd, ni in best)
        for j, (dist, pid) in enumerate(ranked):
            ids[qi, j] = pid
            dists[qi, j] = dist
    return ids, dists


def _prox_linf(v, tau):
    a = np.abs(v)
    if a.sum() <= tau:
        return np.zeros_like(v)
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    rho = np.nonzero(u - (css - tau) / j > 0)[0][-1]
    theta = (css[rho] - tau) / (rho + 1.0)
    return np.where(a > theta, np.where(v > 0, theta, -theta), v)


def ista_l1_batch(D, Y, lam, lip, max_iters, tol, history=None):
    N, m = Y.shape[0], D.shape[1]
    A = np.zeros((N, m))
    iters = np.zeros(N, dtype=np.int64)
    objs = np.zeros(N)
    tau = lam / lip
    for row in range(N):
        y = Y[row]
        a = A[row].copy()
        r = D @ a - y
        J = 0.5 * float(r @ r)
        if history is not None:
            history[row, 0] = J
        it = 0
        while it < max_iters:
            v = a - (D.T @ r) / lip
            z = np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)
            rz = D @ z - y
            Jz = 0.5 * float(rz @ rz) + lam * float(np.abs(z).sum())
            if Jz > J:
                break
            it += 1
            dec = J - Jz
            a, r, J = z, rz, Jz
            if history is not None:
                history[row, it] = J
            if dec <= tol * max(J, 1e-300):
                break
        A[row] = a
        iters[row] = it
        objs[row] = J
    return A, iters, objs


def mfista_linf_batch(D, Y, lam, lip, max_iters, tol, history=None):
    N, m = Y.shape[0], D.shape[1]
    X = np.zeros((N, m))
    iters = np.zeros(N, dtype=np.int64)
    objs = np.zeros(N)
    tau = lam / lip
    for row in range(N):
        y = Y[row]
        x = np.zeros(m)
        w = np.zeros(m)
        J = 0.5 * float(y @ y)
        if history is not None:
            history[row, 0] = J
        t = 1.0
        it = 0
        while it < max_iters:
            z = _prox_linf(w - (D.T @ (D @ w - y)) / lip, tau)
            rz = D @ z - y
            Jz = 0.5 * float(rz @ rz) + lam * float(np.abs(z).max())
            tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            it += 1
            accepted = Jz <= J
            dec = 0.0
            if accepted:
                dec = J - Jz
                w = z + ((t - 1.0) / tn) * (z - x)
                x = z
                J = Jz
            else:
                w = x + (t / tn) * (z - x)
            t = tn
            if history is not None:
                history[row, it] = J
            if accepted and dec <= tol * max(J, 1e-300):
                break
        X[row] = x
        iters[row] = it
        objs[row] = J
    return X, iters, objs
