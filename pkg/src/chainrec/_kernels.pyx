# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled identity-matching kernels; see ``_fallback`` for the contract."""

import numpy as np
from cython.parallel cimport prange, threadid


cdef void _forward_user(const double[:, :, ::1] phat, const double[:, ::1] qhat,
                        const double[:, ::1] H, const unsigned char[:, :, ::1] keep,
                        bint masked, double scale, Py_ssize_t b, double* a,
                        double[:, :, ::1] R1, Py_ssize_t[:, :, ::1] arg) noexcept nogil:
    # a is an (M, d) scratch buffer holding H_l * phat_mb
    cdef Py_ssize_t M = phat.shape[0], d = phat.shape[2]
    cdef Py_ssize_t V = qhat.shape[0], L = H.shape[0]
    cdef Py_ssize_t l, v, m, j, bi
    cdef double z, best
    cdef const double* q
    cdef const unsigned char* k
    cdef double* am
    for l in range(L):
        for m in range(M):
            for j in range(d):
                a[m * d + j] = H[l, j] * phat[m, b, j]
        for v in range(V):
            q = &qhat[v, 0]
            best = 0.0
            bi = 0
            for m in range(M):
                am = a + m * d
                z = 0.0
                if masked:
                    k = &keep[b, v, 0]
                    for j in range(d):
                        z = z + am[j] * q[j] * k[j]
                    z = z * scale
                else:
                    for j in range(d):
                        z = z + am[j] * q[j]
                if z > best:
                    best = z
                    bi = m
            R1[l, b, v] = best
            arg[l, b, v] = bi


def match_forward(const double[:, :, ::1] phat, const double[:, ::1] qhat,
                  const double[:, ::1] H, const unsigned char[:, :, ::1] keep=None,
                  double scale=1.0, int num_threads=1):
    cdef Py_ssize_t B = phat.shape[1], V = qhat.shape[0], L = H.shape[0]
    cdef bint masked = keep is not None
    R1_arr = np.zeros((L, B, V))
    arg_arr = np.zeros((L, B, V), dtype=np.intp)
    cdef double[:, :, ::1] R1 = R1_arr
    cdef Py_ssize_t[:, :, ::1] arg = arg_arr
    cdef Py_ssize_t b
    if num_threads < 1:
        num_threads = 1
    cdef Py_ssize_t M = phat.shape[0], d = phat.shape[2]
    scratch_arr = np.empty((num_threads, max(M * d, 1)))
    cdef double[:, ::1] scratch = scratch_arr
    # users write disjoint output slices, so thread count does not change results
    for b in prange(B, nogil=True, num_threads=num_threads, schedule="static"):
        _forward_user(phat, qhat, H, keep, masked, scale, b, &scratch[threadid(), 0], R1, arg)
    return R1_arr, arg_arr


def match_backward(const double[:, :, ::1] phat, const double[:, ::1] qhat,
                   const double[:, ::1] H, const unsigned char[:, :, ::1] keep,
                   double scale, const Py_ssize_t[:, :, ::1] arg, const double[:, :, ::1] dR1):
    cdef Py_ssize_t M = phat.shape[0], B = phat.shape[1], d = phat.shape[2]
    cdef Py_ssize_t V = qhat.shape[0], L = H.shape[0]
    cdef bint masked = keep is not None
    Gp_arr = np.zeros((M, B, d))
    Gq_arr = np.zeros((V, d))
    GH_arr = np.zeros((L, d))
    cdef double[:, :, ::1] Gp = Gp_arr
    cdef double[:, ::1] Gq = Gq_arr
    cdef double[:, ::1] GH = GH_arr
    cdef Py_ssize_t b, l, v, m, j
    cdef double g, f
    cdef double fh
    with nogil:
        for b in range(B):
            for l in range(L):
                for v in range(V):
                    g = dR1[l, b, v]
                    if g == 0.0:
                        continue
                    m = arg[l, b, v]
                    f = g * scale if masked else g
                    for j in range(d):
                        if masked and not keep[b, v, j]:
                            continue
                        fh = f * H[l, j]
                        Gp[m, b, j] += fh * qhat[v, j]
                        Gq[v, j] += fh * phat[m, b, j]
                        GH[l, j] += f * phat[m, b, j] * qhat[v, j]
    return Gp_arr, Gq_arr, GH_arr
