"""Pure numpy fallbacks for the compiled kernels.

Same call signatures and semantics as ``fira._kernels``; used when the
extension was not built or when FIRA_PURE_PYTHON is set.
"""

import numpy as np

COMPILED = False


def jacobi_sweeps(a, v, tol, max_sweeps):
    """Orthogonalize the columns of ``a`` in place with Jacobi rotations.

    Cyclic one-sided Jacobi: each sweep visits every column pair (i, j),
    i < j, and rotates the pair whenever the cosine of the angle between
    the columns exceeds ``tol``.  Rotations are accumulated into ``v``,
    which the caller must pass in as an identity matrix.

    Returns (sweeps_used, max_correlation_of_last_sweep).
    """
    q = a.shape[1]
    max_off = 0.0
    for sweep in range(1, max_sweeps + 1):
        max_off = 0.0
        for i in range(q - 1):
            for j in range(i + 1, q):
                x = a[:, i]
                y = a[:, j]
                aii = float(x @ x)
                ajj = float(y @ y)
                aij = float(x @ y)
                if aii == 0.0 or ajj == 0.0:
                    continue
                off = abs(aij) / np.sqrt(aii * ajj)
                if off > max_off:
                    max_off = off
                if off <= tol:
                    continue
                zeta = (ajj - aii) / (2.0 * aij)
                # sign(0) taken as +1 so equal-norm columns still rotate
                t = (1.0 if zeta >= 0.0 else -1.0) / (
                    abs(zeta) + np.sqrt(1.0 + zeta * zeta)
                )
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                ai = cs * x - sn * y
                aj = sn * x + cs * y
                a[:, i] = ai
                a[:, j] = aj
                vi = cs * v[:, i] - sn * v[:, j]
                vj = sn * v[:, i] + cs * v[:, j]
                v[:, i] = vi
                v[:, j] = vj
        if max_off <= tol:
            return sweep, max_off
    return max_sweeps, max_off


def adam_update(m, v, g, beta1, beta2, eps, step):
    """Fused Adam moment update, in place on ``m`` and ``v``.

    ``step`` is the 1-based count after this update.  Returns the
    bias-corrected update direction sqrt(1-beta2^step)/(1-beta1^step) *
    m / (sqrt(v) + eps).
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    correction = np.sqrt(1.0 - beta2**step) / (1.0 - beta1**step)
    return correction * (m / (np.sqrt(v) + eps))
