"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names at the bottom of the module bind to whichever path
``SFCORR_NUMBA`` selects. Both implementations are importable under their
``_nb``/``_np`` suffixes so tests and the benchmark can compare them.
"""

import numpy as np

from ._accel import dispatch, njit


# --------------------------------------------------------------------------
# conv2d adjoint: scatter window gradients back onto the padded input
# --------------------------------------------------------------------------

def col2im_np(dcols, padded_shape, stride):
    """dcols [N,Ho,Wo,C,kh,kw] -> gradient on the padded input [N,C,Hp,Wp]."""
    n, ho, wo, c, kh, kw = dcols.shape
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += \
                dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return out


@njit
def _col2im_loop(dcols, out, stride):
    n, ho, wo, c, kh, kw = dcols.shape
    for i in range(n):
        for y in range(ho):
            for x in range(wo):
                for ch in range(c):
                    for a in range(kh):
                        row = y * stride + a
                        for b in range(kw):
                            out[i, ch, row, x * stride + b] += dcols[i, y, x, ch, a, b]


def col2im_nb(dcols, padded_shape, stride):
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    _col2im_loop(np.ascontiguousarray(dcols), out, stride)
    return out


col2im = dispatch(col2im_nb, col2im_np)


# --------------------------------------------------------------------------
# positive mask: pairwise squared distances against a squared threshold
# --------------------------------------------------------------------------

def radius_mask_np(centers_a, centers_b, thresh_sq):
    dx = centers_a[:, 0][:, None] - centers_b[:, 0][None, :]
    dy = centers_a[:, 1][:, None] - centers_b[:, 1][None, :]
    return (dx * dx + dy * dy <= thresh_sq).astype(np.uint8)


@njit
def radius_mask_nb(centers_a, centers_b, thresh_sq):
    p = centers_a.shape[0]
    q = centers_b.shape[0]
    out = np.zeros((p, q), dtype=np.uint8)
    for i in range(p):
        xa = centers_a[i, 0]
        ya = centers_a[i, 1]
        for j in range(q):
            dx = xa - centers_b[j, 0]
            dy = ya - centers_b[j, 1]
            if dx * dx + dy * dy <= thresh_sq:
                out[i, j] = 1
    return out


radius_mask = dispatch(radius_mask_nb, radius_mask_np)


# --------------------------------------------------------------------------
# label propagation: restricted affinities and top-k label transfer
# --------------------------------------------------------------------------

def neighbor_table(gh, gw, radius):
    """[gh*gw, (2r+1)^2] flat indices of cells within Chebyshev ``radius``; -1 off-grid.

    Columns run over row offsets then column offsets, so valid entries of a
    row are in increasing (row, col) order.
    """
    r = int(min(radius, max(gh, gw) - 1))
    offs = np.arange(-r, r + 1)
    rows = np.arange(gh)[:, None, None, None] + offs[None, None, :, None]
    cols = np.arange(gw)[None, :, None, None] + offs[None, None, None, :]
    valid = (rows >= 0) & (rows < gh) & (cols >= 0) & (cols < gw)
    flat = np.where(valid, rows * gw + cols, -1)
    return flat.reshape(gh * gw, -1).astype(np.int64)


def restricted_affinity_np(query, context, gh, gw, radius, inv_tau):
    """query [Q, C] and context [F, Q, C], both unit-norm.

    Returns (values [Q, F*Nn], index [Q, F*Nn]) with index -1 / value 0 for
    off-grid slots; valid entries are ordered by (frame, row, col).
    """
    nf, q, c = context.shape
    nbr = neighbor_table(gh, gw, radius)
    nn = nbr.shape[1]
    sims = query @ context.reshape(nf * q, c).T                      # [Q, F*Q]
    index = np.full((q, nf, nn), -1, dtype=np.int64)
    values = np.zeros((q, nf, nn), dtype=np.float64)
    valid = nbr >= 0
    rows = np.broadcast_to(np.arange(q)[:, None], nbr.shape)
    for f in range(nf):
        idx = np.where(valid, nbr + f * q, -1)
        index[:, f] = idx
        vals = sims[rows[valid], idx[valid]]
        v = np.zeros(nbr.shape)
        v[valid] = np.exp(vals * inv_tau)
        values[:, f] = v
    return values.reshape(q, nf * nn), index.reshape(q, nf * nn)


@njit
def restricted_affinity_nb(query, context, gh, gw, radius, inv_tau):
    nf, q, c = context.shape
    r = min(radius, max(gh, gw) - 1)
    side = 2 * r + 1
    nn = side * side
    values = np.zeros((q, nf * nn), dtype=np.float64)
    index = np.full((q, nf * nn), -1, dtype=np.int64)
    for i in range(gh):
        for j in range(gw):
            qi = i * gw + j
            for f in range(nf):
                for a in range(side):
                    row = i + a - r
                    if row < 0 or row >= gh:
                        continue
                    for b in range(side):
                        col = j + b - r
                        if col < 0 or col >= gw:
                            continue
                        ci = row * gw + col
                        s = 0.0
                        for ch in range(c):
                            s += query[qi, ch] * context[f, ci, ch]
                        slot = f * nn + a * side + b
                        values[qi, slot] = np.exp(s * inv_tau)
                        index[qi, slot] = f * q + ci
    return values, index


def topk_transfer_np(values, index, labels, top_k):
    """Weighted label transfer from the ``top_k`` largest valid affinities per row.

    Ties go to the earliest slot. ``labels`` is [F*Q, L]. The result is
    accumulated as offsets from the top match's labels, so a row whose
    selected candidates all carry the same labels reproduces them exactly.
    """
    q = values.shape[0]
    keyed = np.where(index >= 0, values, -np.inf)
    order = np.argsort(-keyed, axis=1, kind="stable")
    counts = (index >= 0).sum(axis=1)
    out = np.zeros((q, labels.shape[1]), dtype=np.float64)
    for i in range(q):
        k = min(top_k, counts[i])
        sel = order[i, :k]
        w = values[i, sel]
        w = w / w.sum()
        # offsets from the best match keep identical candidate labels bit-exact
        base = labels[index[i, sel[0]]]
        out[i] = base + w @ (labels[index[i, sel]] - base)
    return out


@njit
def topk_transfer_nb(values, index, labels, top_k):
    q, n = values.shape
    nl = labels.shape[1]
    out = np.zeros((q, nl), dtype=np.float64)
    chosen = np.empty(top_k, dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    for i in range(q):
        taken[:] = False
        k = 0
        while k < top_k:
            best = -1
            best_v = -1.0
            for s in range(n):
                if index[i, s] >= 0 and not taken[s] and values[i, s] > best_v:
                    best = s
                    best_v = values[i, s]
            if best < 0:
                break
            taken[best] = True
            chosen[k] = best
            k += 1
        total = 0.0
        for t in range(k):
            total += values[i, chosen[t]]
        base = index[i, chosen[0]]
        for l in range(nl):
            acc = 0.0
            for t in range(k):
                w = values[i, chosen[t]] / total
                acc += w * (labels[index[i, chosen[t]], l] - labels[base, l])
            out[i, l] = labels[base, l] + acc
    return out


restricted_affinity = dispatch(restricted_affinity_nb, restricted_affinity_np)
topk_transfer = dispatch(topk_transfer_nb, topk_transfer_np)
