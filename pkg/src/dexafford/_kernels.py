"""Compiled inner loops for chain kinematics.

Small 3x3 products are written out by hand; numba's generic matmul goes
through BLAS and dominates the cost at this size.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def rot(axis, angle):
    x, y, z = axis[0], axis[1], axis[2]
    c = np.cos(angle)
    s = np.sin(angle)
    C = 1.0 - c
    out = np.empty((3, 3))
    out[0, 0] = c + x * x * C
    out[0, 1] = x * y * C - z * s
    out[0, 2] = x * z * C + y * s
    out[1, 0] = y * x * C + z * s
    out[1, 1] = c + y * y * C
    out[1, 2] = y * z * C - x * s
    out[2, 0] = z * x * C - y * s
    out[2, 1] = z * y * C + x * s
    out[2, 2] = c + z * z * C
    return out


@njit(cache=True, inline="always")
def _mm(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True, inline="always")
def _mv_add(A, v, p, out):
    for i in range(3):
        out[i] = p[i] + A[i, 0] * v[0] + A[i, 1] * v[1] + A[i, 2] * v[2]


@njit(cache=True)
def chain_frames(R0, p0, axes, offsets, q):
    """Frames of a serial revolute chain; returns rotations (J,3,3), origins (J,3)."""
    n = q.shape[0]
    Rs = np.empty((n, 3, 3))
    ps = np.empty((n, 3))
    R = R0.copy()
    p = p0.copy()
    for j in range(n):
        _mv_add(R, offsets[j], p, ps[j])
        _mm(R, rot(axes[j], q[j]), Rs[j])
        R = Rs[j]
        p = ps[j]
    return Rs, ps


@njit(cache=True)
def arm_wrist_jac(R0, p0, axes, offsets, tool_R, tool_p, q):
    """Wrist rotation, wrist position and 6xJ geometric Jacobian."""
    Rs, ps = chain_frames(R0, p0, axes, offsets, q)
    n = q.shape[0]
    Rw = np.empty((3, 3))
    _mm(Rs[n - 1], tool_R, Rw)
    pw = np.empty(3)
    _mv_add(Rs[n - 1], tool_p, ps[n - 1], pw)
    J = np.empty((6, n))
    for j in range(n):
        R = Rs[j]
        ax = axes[j]
        a0 = R[0, 0] * ax[0] + R[0, 1] * ax[1] + R[0, 2] * ax[2]
        a1 = R[1, 0] * ax[0] + R[1, 1] * ax[1] + R[1, 2] * ax[2]
        a2 = R[2, 0] * ax[0] + R[2, 1] * ax[1] + R[2, 2] * ax[2]
        r0 = pw[0] - ps[j, 0]
        r1 = pw[1] - ps[j, 1]
        r2 = pw[2] - ps[j, 2]
        J[0, j] = a1 * r2 - a2 * r1
        J[1, j] = a2 * r0 - a0 * r2
        J[2, j] = a0 * r1 - a1 * r0
        J[3, j] = a0
        J[4, j] = a1
        J[5, j] = a2
    return Rw, pw, J


@njit(cache=True)
def _hand_chain(Rw, pw, axes, offsets, q, Rs, ps):
    nf = axes.shape[0]
    nj = axes.shape[1]
    for f in range(nf):
        R = Rw
        p = pw
        for j in range(nj):
            _mv_add(R, offsets[f, j], p, ps[f, j])
            _mm(R, rot(axes[f, j], q[f * nj + j]), Rs[f, j])
            R = Rs[f, j]
            p = ps[f, j]


@njit(cache=True)
def _hand_centers(Rw, pw, Rs, ps, nj, sphere_frame, sphere_off, out):
    for s in range(sphere_frame.shape[0]):
        k = sphere_frame[s]
        if k < 0:
            _mv_add(Rw, sphere_off[s], pw, out[s])
        else:
            _mv_add(Rs[k // nj, k % nj], sphere_off[s], ps[k // nj, k % nj], out[s])


@njit(cache=True)
def hand_fk(Rw, pw, axes, offsets, tips, q, sphere_frame, sphere_off):
    """Finger frames, fingertips and collision-sphere centres for a whole hand.

    ``axes``/``offsets`` are (F,J,3), ``q`` is (F*J,), sphere frame -1 is the palm.
    """
    nf = axes.shape[0]
    nj = axes.shape[1]
    Rs = np.empty((nf, nj, 3, 3))
    ps = np.empty((nf, nj, 3))
    _hand_chain(Rw, pw, axes, offsets, q, Rs, ps)
    tip = np.empty((nf, 3))
    for f in range(nf):
        _mv_add(Rs[f, nj - 1], tips[f], ps[f, nj - 1], tip[f])
    centers = np.empty((sphere_frame.shape[0], 3))
    _hand_centers(Rw, pw, Rs, ps, nj, sphere_frame, sphere_off, centers)
    return Rs, ps, tip, centers


@njit(cache=True)
def hand_spheres_batch(Rw, pw, axes, offsets, q, sphere_frame, sphere_off):
    """Sphere centres (B,S,3) for B wrist poses and hand configurations."""
    B = q.shape[0]
    nf = axes.shape[0]
    nj = axes.shape[1]
    out = np.empty((B, sphere_frame.shape[0], 3))
    Rs = np.empty((nf, nj, 3, 3))
    ps = np.empty((nf, nj, 3))
    for b in range(B):
        _hand_chain(Rw[b], pw[b], axes, offsets, q[b], Rs, ps)
        _hand_centers(Rw[b], pw[b], Rs, ps, nj, sphere_frame, sphere_off, out[b])
    return out


@njit(cache=True)
def chain_frames_batch(R0, p0, axes, offsets, Q):
    """``chain_frames`` over a stack of configurations: (B,J,3,3), (B,J,3)."""
    B = Q.shape[0]
    n = Q.shape[1]
    Rs = np.empty((B, n, 3, 3))
    ps = np.empty((B, n, 3))
    for b in range(B):
        R = R0
        p = p0
        for j in range(n):
            _mv_add(R, offsets[j], p, ps[b, j])
            _mm(R, rot(axes[j], Q[b, j]), Rs[b, j])
            R = Rs[b, j]
            p = ps[b, j]
    return Rs, ps


@njit(cache=True)
def _rotvec_error(R, Rt):
    """Rotation vector of ``Rt @ R.T``."""
    dR = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            dR[i, j] = Rt[i, 0] * R[j, 0] + Rt[i, 1] * R[j, 1] + Rt[i, 2] * R[j, 2]
    c = (dR[0, 0] + dR[1, 1] + dR[2, 2] - 1.0) / 2.0
    c = min(1.0, max(-1.0, c))
    theta = np.arccos(c)
    v = np.array([dR[2, 1] - dR[1, 2], dR[0, 2] - dR[2, 0], dR[1, 0] - dR[0, 1]])
    s = np.sin(theta)
    if s > 1e-9:
        return v / (2.0 * s) * theta
    if theta < 1e-6:
        return 0.5 * v
    k = 0
    for i in range(1, 3):
        if dR[i, i] > dR[k, k]:
            k = i
    axis = np.empty(3)
    for i in range(3):
        axis[i] = (dR[i, k] + (1.0 if i == k else 0.0)) / 2.0
    axis /= np.sqrt(axis[0] ** 2 + axis[1] ** 2 + axis[2] ** 2)
    return axis * theta


@njit(cache=True)
def dls_ik(R0, p0, axes, offsets, tool_R, tool_p, lo, hi, q0, Rt, pt,
           max_iter, pos_tol, rot_tol, damping, max_t, max_r):
    """Iterated capped damped-least-squares IK; returns (q, converged)."""
    n = q0.shape[0]
    q = np.minimum(np.maximum(q0.copy(), lo), hi)
    err = np.empty(6)
    for it in range(max_iter + 1):
        Rw, pw, J = arm_wrist_jac(R0, p0, axes, offsets, tool_R, tool_p, q)
        rv = _rotvec_error(Rw, Rt)
        for i in range(3):
            err[i] = pt[i] - pw[i]
            err[3 + i] = rv[i]
        et = np.sqrt(err[0] ** 2 + err[1] ** 2 + err[2] ** 2)
        er = np.sqrt(err[3] ** 2 + err[4] ** 2 + err[5] ** 2)
        if et < pos_tol and er < rot_tol:
            return q, True
        if it == max_iter:
            break
        if et > max_t:
            err[:3] *= max_t / et
        if er > max_r:
            err[3:] *= max_r / er
        A = J @ J.T
        for i in range(6):
            A[i, i] += damping * damping
        dq = J.T @ np.linalg.solve(A, err)
        q = np.minimum(np.maximum(q + dq, lo), hi)
    return q, False
