# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled masked-query MAE batch kernel.

Same contract and summation order as ``_kernels_py.mae_masked_terms``:
rows of the batch are visited in order, masked queries in ascending patch
order, keys in ascending patch order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, NAN

from ._kernels_common import KernelResult

cnp.import_array()


def mae_masked_terms(
    const double[:, ::1] W,
    const cnp.int64_t[:, ::1] area_index,
    int num_areas,
    const cnp.int64_t[::1] cluster,
    const double[:, ::1] z,
    const cnp.uint8_t[:, ::1] unmasked,
    const double[::1] weight,
    bint with_cluster_pp=False,
):
    cdef Py_ssize_t P = W.shape[0]
    cdef Py_ssize_t d = W.shape[1]
    cdef Py_ssize_t KN = d - P
    cdef Py_ssize_t B = cluster.shape[0]
    cdef Py_ssize_t K = area_index.shape[0]
    cdef Py_ssize_t N = num_areas

    loss_arr = np.zeros(P)
    grad_arr = np.zeros((P, d))
    own_arr = np.empty((B, P))
    if with_cluster_pp:
        pp_arr = np.zeros((K, P, P))
    else:
        pp_arr = np.zeros((1, 1, 1))
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double[:, ::1] own = own_arr
    cdef double[:, :, ::1] pp = pp_arr

    c_arr = np.empty(P)
    s_arr = np.empty(P)
    attn_arr = np.empty(N)
    rho_arr = np.empty(N)
    area_arr = np.empty(P, dtype=np.int64)
    fcol_arr = np.empty(P, dtype=np.int64)
    cdef double[::1] c = c_arr
    cdef double[::1] s = s_arr
    cdef double[::1] attn = attn_arr
    cdef double[::1] rho = rho_arr
    cdef cnp.int64_t[::1] area = area_arr
    cdef cnp.int64_t[::1] fcol = fcol_arr

    cdef Py_ssize_t b, p, q, a, n, k
    cdef double w, mx, l, tot, r, wsc, lsum, g, zn

    for b in range(B):
        k = cluster[b]
        w = weight[b]
        for q in range(P):
            a = area_index[k, q]
            area[q] = a
            fcol[q] = k * N + a
            c[q] = z[b, a] if unmasked[b, q] else 0.0
        for p in range(P):
            if unmasked[b, p]:
                own[b, p] = NAN
                continue
            mx = -1e308
            for q in range(P):
                l = W[p, KN + q] + c[q] * W[p, fcol[q]]
                s[q] = l
                if l > mx:
                    mx = l
            tot = 0.0
            for q in range(P):
                s[q] = exp(s[q] - mx)
                tot += s[q]
            for a in range(N):
                attn[a] = 0.0
            for q in range(P):
                s[q] = s[q] / tot
                if unmasked[b, q]:
                    attn[area[q]] += s[q]
            n = area[p]
            zn = z[b, n]
            wsc = 0.0
            lsum = 0.0
            for a in range(N):
                r = -z[b, a] * attn[a]
                if a == n:
                    r = r + zn
                rho[a] = r
                wsc += attn[a] * z[b, a] * r
                lsum += r * r
            loss[p] += 0.5 * lsum * w
            own[b, p] = attn[n]
            for q in range(P):
                g = s[q] * (c[q] * rho[area[q]] - wsc) * w
                grad[p, KN + q] += g
                grad[p, fcol[q]] += g * c[q]
                if with_cluster_pp:
                    pp[k, p, q] += g
    return KernelResult(
        loss=loss_arr,
        grad=grad_arr,
        pp_by_cluster=pp_arr if with_cluster_pp else None,
        own_attn=own_arr,
    )
