"""Hot inner loops, each with a numba and a numpy implementation.

Both variants perform the same float32 operations in the same order, so they
agree bit-for-bit; ``tests/test_kernels.py`` holds them to that. The public
names at the bottom of the module are bound to whichever path
:data:`hybridsnn._accel.USE_NUMBA` selects.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

F32 = np.float32


# ---------------------------------------------------------------------------
# integrate-and-fire step (soft reset)

def _if_step_numpy(v, x, theta, spikes):
    np.add(v, x, out=v)
    np.greater_equal(v, theta, out=spikes, casting="unsafe")
    v -= spikes * theta
    return spikes


@njit(cache=True)
def _if_step_numba(v, x, theta, spikes):
    fv = v.ravel()
    fx = x.ravel()
    fs = spikes.ravel()
    for i in range(fv.size):
        u = fv[i] + fx[i]
        if u >= theta:
            fs[i] = 1.0
            u = u - theta
        else:
            fs[i] = 0.0
        fv[i] = u
    return spikes


# ---------------------------------------------------------------------------
# quantization clip-floor-shift

def _qcfs_numpy(x, lam, levels, phi):
    step = F32(lam / F32(levels))
    k = np.floor(x * F32(levels / lam) + F32(phi))
    np.clip(k, 0, levels, out=k)
    return (k * step).astype(F32, copy=False)


@njit(cache=True)
def _qcfs_numba_flat(x, scale, phi, levels, step, out):
    for i in range(x.size):
        k = np.floor(x[i] * scale + phi)
        if k < 0:
            k = 0
        elif k > levels:
            k = levels
        out[i] = k * step


def _qcfs_numba(x, lam, levels, phi):
    x = np.ascontiguousarray(x, dtype=F32)
    out = np.empty_like(x)
    _qcfs_numba_flat(x.ravel(), F32(levels / lam), F32(phi), F32(levels),
                     F32(lam / F32(levels)), out.ravel())
    return out


# ---------------------------------------------------------------------------
# one presentation of the STDP classifier
#
# Arguments (shared by both paths):
#   spikes_in   uint8 [T, n_in]  input spike train
#   w           f32 [n_in, n_out] feed-forward weights (read only)
#   theta_adapt f32 [n_out]      adaptive threshold component, updated in place if adapt
#   dw          f32 [n_in, n_out] STDP delta accumulator, updated in place if learn
#   counts      i64 [n_out]      excitatory spike counts, incremented in place
#   p           f32 [12]         packed scalars, see P_* below
# Returns the number of inhibitory spikes.

P_THETA_BASE, P_THETA_INH, P_EXC, P_INH, P_D_PRE, P_D_POST, P_D_THETA, \
    P_THETA_PLUS, P_ETA_PRE, P_ETA_POST, P_LEAK, P_ONE_SPIKE = range(12)


def _present_numpy(spikes_in, w, theta_adapt, dw, counts, p, learn, adapt):
    n_in, n_out = w.shape
    v_exc = np.zeros(n_out, F32)
    v_inh = np.zeros(n_out, F32)
    x_pre = np.zeros(n_in, F32)
    x_post = np.zeros(n_out, F32)
    leak = p[P_LEAK]
    n_inh_total = 0
    for t in range(spikes_in.shape[0]):
        s_in = spikes_in[t]
        active = np.flatnonzero(s_in)
        if leak < 1:
            v_exc *= leak
        if active.size:
            v_exc += w[active].sum(axis=0)
        thr = p[P_THETA_BASE] + theta_adapt
        s_exc = v_exc >= thr
        if p[P_ONE_SPIKE] and s_exc.sum() > 1:
            # keep only the largest overshoot; argmax breaks ties to the lowest index
            winner = np.where(s_exc, v_exc - thr, -np.inf).argmax()
            s_exc[:] = False
            s_exc[winner] = True
        v_inh += s_exc.astype(F32) * p[P_EXC]
        s_inh = v_inh >= p[P_THETA_INH]
        n_inh = int(s_inh.sum())
        if n_inh:
            v_exc -= p[P_INH] * (n_inh - s_inh).astype(F32)
        v_exc[s_exc] = 0
        v_inh[s_inh] = 0
        np.maximum(v_exc, 0, out=v_exc)
        counts += s_exc
        n_inh_total += n_inh
        if learn:
            x_pre *= p[P_D_PRE]
            x_pre += s_in
            x_post *= p[P_D_POST]
            x_post += s_exc
            post = np.flatnonzero(s_exc)
            if post.size:
                dw[:, post] += (p[P_ETA_POST] * x_pre)[:, None]
            if active.size:
                dw[active, :] -= (p[P_ETA_PRE] * x_post)[None, :]
        if adapt:
            theta_adapt *= p[P_D_THETA]
            theta_adapt += s_exc.astype(F32) * p[P_THETA_PLUS]
    return n_inh_total


@njit(cache=True)
def _present_numba(spikes_in, w, theta_adapt, dw, counts, p, learn, adapt):
    n_in, n_out = w.shape
    v_exc = np.zeros(n_out, np.float32)
    v_inh = np.zeros(n_out, np.float32)
    x_pre = np.zeros(n_in, np.float32)
    x_post = np.zeros(n_out, np.float32)
    drive = np.zeros(n_out, np.float32)
    s_exc = np.zeros(n_out, np.bool_)
    s_inh = np.zeros(n_out, np.bool_)
    active = np.empty(n_in, np.int64)
    theta_base = p[P_THETA_BASE]
    theta_inh = p[P_THETA_INH]
    exc = p[P_EXC]
    inh = p[P_INH]
    leak = p[P_LEAK]
    one_spike = p[P_ONE_SPIKE] != 0
    zero = np.float32(0.0)
    one = np.float32(1.0)
    n_inh_total = 0
    for t in range(spikes_in.shape[0]):
        n_act = 0
        for i in range(n_in):
            if spikes_in[t, i]:
                active[n_act] = i
                n_act += 1
        if leak < one:
            for j in range(n_out):
                v_exc[j] *= leak
        if n_act:
            for j in range(n_out):
                drive[j] = zero
            for a in range(n_act):
                i = active[a]
                for j in range(n_out):
                    drive[j] += w[i, j]
            for j in range(n_out):
                v_exc[j] += drive[j]
        n_exc = 0
        winner = -1
        best = zero
        for j in range(n_out):
            thr = theta_base + theta_adapt[j]
            s_exc[j] = v_exc[j] >= thr
            if s_exc[j]:
                n_exc += 1
                if winner < 0 or v_exc[j] - thr > best:
                    winner = j
                    best = v_exc[j] - thr
        if one_spike and n_exc > 1:
            for j in range(n_out):
                s_exc[j] = j == winner
        n_inh = 0
        for j in range(n_out):
            if s_exc[j]:
                v_inh[j] += one * exc
            s_inh[j] = v_inh[j] >= theta_inh
            if s_inh[j]:
                n_inh += 1
        if n_inh:
            for j in range(n_out):
                k = n_inh - 1 if s_inh[j] else n_inh
                v_exc[j] -= inh * np.float32(k)
        n_post = 0
        for j in range(n_out):
            if s_exc[j]:
                v_exc[j] = zero
                counts[j] += 1
                n_post += 1
            if s_inh[j]:
                v_inh[j] = zero
            if v_exc[j] < zero:
                v_exc[j] = zero
        n_inh_total += n_inh
        if learn:
            for i in range(n_in):
                x_pre[i] = x_pre[i] * p[P_D_PRE] + (one if spikes_in[t, i] else zero)
            for j in range(n_out):
                x_post[j] = x_post[j] * p[P_D_POST] + (one if s_exc[j] else zero)
            if n_post:
                for i in range(n_in):
                    pot = p[P_ETA_POST] * x_pre[i]
                    for j in range(n_out):
                        if s_exc[j]:
                            dw[i, j] += pot
            for a in range(n_act):
                i = active[a]
                for j in range(n_out):
                    dw[i, j] -= p[P_ETA_PRE] * x_post[j]
        if adapt:
            for j in range(n_out):
                theta_adapt[j] = theta_adapt[j] * p[P_D_THETA] + \
                    (p[P_THETA_PLUS] if s_exc[j] else zero)
    return n_inh_total


if USE_NUMBA:
    if_step = _if_step_numba
    qcfs = _qcfs_numba
    present = _present_numba
else:
    if_step = _if_step_numpy
    qcfs = _qcfs_numpy
    present = _present_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
