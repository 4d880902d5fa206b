"""Pure numpy implementations of the routines in ``_core``.

Used when the compiled extension is unavailable or when
``HODLRGP_BACKEND=python`` is set.  Semantics match ``_core`` exactly
(same pivot order, same probe rule); only rounding may differ.
"""
import numpy as np


def aca_generic(entries, m, n, tol, maxrank, prow, pcol):
    """Partially pivoted ACA on an accessor ``entries(rows, cols)``.

    ``entries`` receives two integer arrays and returns the matching
    submatrix.  Returns (U, V, converged, probe_err).
    """
    Ut = np.zeros((maxrank, m))
    Vt = np.zeros((maxrank, n))
    used_r = np.zeros(m, dtype=bool)
    used_c = np.zeros(n, dtype=bool)
    allc = np.arange(n)
    allr = np.arange(m)
    k = 0
    i = 0
    wmax = 0.0
    small = 0
    converged = False
    while k < maxrank:
        row = entries(np.array([i]), allc)[0] - Ut[:k, i] @ Vt[:k]
        used_r[i] = True
        cand = np.where(used_c, -1.0, np.abs(row))
        jp = int(np.argmax(cand)) if n else -1
        piv = row[jp] if jp >= 0 and cand[jp] >= 0 else 0.0
        upd = 0.0
        if piv != 0.0:
            Vt[k] = row / piv
            used_c[jp] = True
            Ut[k] = entries(allr, np.array([jp]))[:, 0] - Vt[:k, jp] @ Ut[:k]
            upd = np.abs(Ut[k]).max() * np.abs(Vt[k]).max()
            k += 1
        # max-norm of the rank-one update, small twice in a row
        small = small + 1 if 10.0 * upd <= tol else 0
        if small >= 2 or piv == 0.0:
            exact = np.diagonal(entries(prow, pcol)) if len(prow) else np.zeros(0)
            res = np.abs(exact - np.einsum("lp,lp->p", Ut[:k][:, prow], Vt[:k][:, pcol]))
            wmax = float(res.max()) if len(res) else 0.0
            if wmax <= tol:
                converged = True
                break
            worst = int(np.argmax(res))
            if not used_r[prow[worst]]:
                i = int(prow[worst])
                continue
        if used_r.all():
            converged = True
            break
        score = np.abs(Ut[k - 1]) if k > 0 else np.zeros(m)
        score = np.where(used_r, -1.0, score)
        i = int(np.argmax(score))
    return Ut[:k].T.copy(), Vt[:k].T.copy(), converged, wmax


def se_block(X, r0, r1, c0, c1, rho):
    d = X[r0:r1, None, :] - X[None, c0:c1, :]
    return np.exp(-rho * np.einsum("ijk,ijk->ij", d, d))


def aca_se(X, r0, r1, c0, c1, rho, tol, maxrank, prow, pcol):
    def entries(rows, cols):
        d = X[r0 + rows][:, None, :] - X[c0 + cols][None, :, :]
        return np.exp(-rho * np.einsum("ijk,ijk->ij", d, d))
    return aca_generic(entries, r1 - r0, c1 - c0, tol, maxrank, prow, pcol)


def _view(buf, off, m, n):
    return buf[off:off + m * n].reshape(m, n)


def hodlr_matvec(v, levels, start, stop, dbuf, doff, rank, lbuf, uoff, voff, scale):
    v = np.asarray(v, dtype=float)
    y = np.zeros_like(v)
    nint = (1 << levels) - 1
    for q in range(nint, 2 * nint + 1):
        s, e = start[q], stop[q]
        y[s:e] = _view(dbuf, doff[q], e - s, e - s) @ v[s:e]
    for p in range(nint):
        r = rank[p]
        if r == 0:
            continue
        a, b = start[2 * p + 1], stop[2 * p + 1]
        c, d = start[2 * p + 2], stop[2 * p + 2]
        U = _view(lbuf, uoff[p], b - a, r)
        V = _view(lbuf, voff[p], d - c, r)
        y[a:b] += U @ (scale * (V.T @ v[c:d]))
        y[c:d] += V @ (scale * (U.T @ v[a:b]))
    return y


def factor_apply(v, levels, start, stop, fbuf, foff, ioff, rank, nbuf,
                 q1off, q2off, zfoff, zioff, inverse, transpose):
    """In-place application of W, W^T, W^-1 or W^-T to v (1-D or 2-D)."""
    nint = (1 << levels) - 1
    zoff = zioff if inverse else zfoff
    loff = ioff if inverse else foff

    def node(p):
        r = rank[p]
        if r == 0:
            return
        a, b = start[2 * p + 1], stop[2 * p + 1]
        c, d = start[2 * p + 2], stop[2 * p + 2]
        Q1 = _view(nbuf, q1off[p], b - a, r)
        Q2 = _view(nbuf, q2off[p], d - c, r)
        Z = _view(nbuf, zoff[p], 2 * r, 2 * r)
        if transpose:
            Z = Z.T
        u = Z @ np.concatenate([Q1.T @ v[a:b], Q2.T @ v[c:d]])
        v[a:b] += Q1 @ u[:r]
        v[c:d] += Q2 @ u[r:]

    top_down = inverse == transpose
    if top_down:
        for p in range(nint):
            node(p)
    for q in range(nint, 2 * nint + 1):
        s, e = start[q], stop[q]
        L = _view(fbuf, loff[q], e - s, e - s)
        v[s:e] = (L.T if transpose else L) @ v[s:e]
    if not top_down:
        for lev in range(levels - 1, -1, -1):
            for p in range((1 << lev) - 1, (1 << (lev + 1)) - 1):
                node(p)
    return v
