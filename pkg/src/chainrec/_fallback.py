"""Pure numpy identity-matching kernels.

Same contract as the compiled ``_kernels`` module:

``match_forward(phat, qhat, H, keep, scale, num_threads)``
    phat (M, B, d), qhat (V, d), H (L, d), keep (B, V, d) uint8 or None.
    Returns ``R1`` (L, B, V) = max_m ReLU(H_l . (phat_mb * qhat_v * mask_bv))
    and ``arg`` (L, B, V), the first identity attaining the max (0 when all
    identity scores are zero).

``match_backward(phat, qhat, H, keep, scale, arg, dR1)``
    Accumulates gradients for ``dR1`` routed to the argmax identity only;
    callers zero ``dR1`` where ReLU is inactive. Returns (G_phat, G_qhat, G_H).
"""

import numpy as np


def match_forward(phat, qhat, H, keep=None, scale=1.0, num_threads=1):
    M, B, d = phat.shape
    L, V = H.shape[0], qhat.shape[0]
    R1 = np.empty((L, B, V))
    arg = np.empty((L, B, V), dtype=np.intp)
    for l in range(L):
        a = phat * H[l]
        if keep is None:
            z = a @ qhat.T
        else:
            z = np.einsum("mbd,vd,bvd->mbv", a, qhat, keep, optimize=True) * scale
        s = np.maximum(z, 0.0)
        R1[l] = s.max(axis=0)
        arg[l] = s.argmax(axis=0)
    return R1, arg


def match_backward(phat, qhat, H, keep, scale, arg, dR1):
    M, B, d = phat.shape
    L = H.shape[0]
    Gp = np.zeros_like(phat)
    Gq = np.zeros_like(qhat)
    GH = np.zeros_like(H)
    for l in range(L):
        for m in range(M):
            delta = np.where(arg[l] == m, dR1[l], 0.0)
            if not delta.any():
                continue
            if keep is None:
                dq = delta @ qhat  # (B, d)
                Gp[m] += dq * H[l]
                Gq += (delta.T @ phat[m]) * H[l]
                GH[l] += (phat[m] * dq).sum(axis=0)
            else:
                dk = delta[:, :, None] * keep * scale  # (B, V, d)
                dq = np.einsum("bvd,vd->bd", dk, qhat)
                Gp[m] += dq * H[l]
                Gq += np.einsum("bvd,bd->vd", dk, phat[m]) * H[l]
                GH[l] += (phat[m] * dq).sum(axis=0)
    return Gp, Gq, GH
