"""Compiled inner loops of the traffic simulator.

Vehicle arrays follow the layout of :class:`critgen.traffic.WorldState`:
index 0 is the ego, background vehicles live on a ring of length ``L``.
Neighbor searches are quadratic, which is cheaper than sorting at the
vehicle counts a configuration allows (at most 61).
"""

import math

import numpy as np
from numba import njit

IDM_MIN_GAP = 2.0
IDM_DELTA = 4.0
MAX_BRAKING = 9.0
MOBIL_SAFE_BRAKING = 3.0
EGO_MAX_ACCEL = 5.0
EGO_MAX_BRAKE = 8.0
EGO_SPEED_GAIN = 1.0 / 0.6

# columns of the per-substep partner record
P_HAS_LEAD, P_GAP, P_V_EGO, P_V_LEAD, P_HAS_NLN, P_D_LAT, P_VLAT_EGO, P_VLAT_NLN = range(8)
PARTNER_FIELDS = 8


@njit(cache=True)
def ring_ahead(x_from, x_to, L):
    """Distance travelled forward along the ring from ``x_from`` to ``x_to``, in [0, L)."""
    d = (x_to - x_from) % L
    if d < 0.0:
        d += L
    return d


@njit(cache=True)
def ring_dx(x_other, x_ref, L):
    """Signed ring offset of ``x_other`` from ``x_ref``, in [-L/2, L/2)."""
    return (x_other - x_ref + 0.5 * L) % L - 0.5 * L


@njit(cache=True)
def idm(v, v0, headway, accel, decel, has_lead, gap, v_lead):
    acc = accel * (1.0 - (v / v0) ** IDM_DELTA)
    if has_lead:
        s_star = IDM_MIN_GAP + max(0.0, v * headway + v * (v - v_lead) / (2.0 * math.sqrt(accel * decel)))
        acc -= accel * (s_star / max(gap, 0.1)) ** 2
    return acc


@njit(cache=True)
def neighbors_at(xq, lane_q, exclude, xm, lane, ids, L):
    """Leader and follower of position ``xq`` in lane ``lane_q`` (-1 when absent).

    A vehicle at exactly ``xq`` counts as leader when its id is larger than
    ``exclude`` (the querying vehicle), so ordering is total.
    """
    lead = -1
    follow = -1
    best_ahead = np.inf
    best_behind = np.inf
    ref_id = ids[exclude] if exclude >= 0 else -1
    for j in range(len(xm)):
        if j == exclude or lane[j] != lane_q:
            continue
        ahead = ring_ahead(xq, xm[j], L)
        if ahead == 0.0 and ids[j] < ref_id:
            ahead = L
        behind = L - ahead if ahead > 0.0 else L
        if ahead < best_ahead or (ahead == best_ahead and ids[j] < ids[lead]):
            best_ahead = ahead
            lead = j
        if behind < best_behind or (behind == best_behind and ids[j] < ids[follow]):
            best_behind = behind
            follow = j
    return lead, follow


@njit(cache=True)
def leaders(xm, lane, ids, L):
    n = len(xm)
    lead = np.full(n, -1, dtype=np.int64)
    follow = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        lead[i], follow[i] = neighbors_at(xm[i], lane[i], i, xm, lane, ids, L)
    return lead, follow


@njit(cache=True)
def gap_between(rear, front, xm, length, L):
    return ring_ahead(xm[rear], xm[front], L) - 0.5 * (length[rear] + length[front])


@njit(cache=True)
def acc_toward(i, j, xm, vx, length, v0, headway, accel, decel, L):
    """IDM acceleration of vehicle ``i`` were ``j`` its leader (``j = -1``: free road)."""
    if j >= 0 and j != i:
        acc = idm(vx[i], v0[i], headway[i], accel[i], decel[i], True,
                  gap_between(i, j, xm, length, L), vx[j])
    else:
        acc = idm(vx[i], v0[i], headway[i], accel[i], decel[i], False, 0.0, 0.0)
    return max(acc, -MAX_BRAKING)


@njit(cache=True)
def mobil(x, y, vx, lane, target_lane, length, v0, headway, accel, decel,
          politeness, lc_threshold, ids, lane_count, lane_width, L):
    """Set lane-change targets of settled background vehicles in place."""
    n = len(x)
    xm = x % L
    lead, follow = leaders(xm, lane, ids, L)
    for i in range(1, n):
        if target_lane[i] != lane[i] or abs(y[i] - lane[i] * lane_width) > 1e-6:
            continue
        self_a = acc_toward(i, lead[i], xm, vx, length, v0, headway, accel, decel, L)
        of = follow[i]
        of_a = 0.0
        of_pred = 0.0
        if of >= 0:
            of_a = acc_toward(of, i, xm, vx, length, v0, headway, accel, decel, L)
            after = lead[i] if lead[i] != of else -1
            of_pred = acc_toward(of, after, xm, vx, length, v0, headway, accel, decel, L)
        best_gain = -np.inf
        best_lane = lane[i]
        for d in (-1, 1):
            cand = lane[i] + d
            if cand < 0 or cand >= lane_count:
                continue
            nl, nf = neighbors_at(xm[i], cand, i, xm, lane, ids, L)
            if nl >= 0 and gap_between(i, nl, xm, length, L) <= 1.0:
                continue
            if nf >= 0 and gap_between(nf, i, xm, length, L) <= 1.0:
                continue
            # vehicles already committed to ``cand`` (decided earlier, possibly this call)
            ml, mf = neighbors_at(xm[i], cand, i, xm, target_lane, ids, L)
            if ml >= 0 and (gap_between(i, ml, xm, length, L) <= 1.0 or
                            acc_toward(i, ml, xm, vx, length, v0, headway, accel, decel, L) < -MOBIL_SAFE_BRAKING):
                continue
            if mf >= 0 and (gap_between(mf, i, xm, length, L) <= 1.0 or
                            acc_toward(mf, i, xm, vx, length, v0, headway, accel, decel, L) < -MOBIL_SAFE_BRAKING):
                continue
            nf_a = 0.0
            nf_pred = 0.0
            if nf >= 0:
                nf_pred = acc_toward(nf, i, xm, vx, length, v0, headway, accel, decel, L)
                if nf_pred < -MOBIL_SAFE_BRAKING:
                    continue
                nf_a = acc_toward(nf, nl if nl != nf else -1, xm, vx, length, v0, headway, accel, decel, L)
            self_pred = acc_toward(i, nl, xm, vx, length, v0, headway, accel, decel, L)
            gain = self_pred - self_a + politeness[i] * (nf_pred - nf_a + of_pred - of_a)
            if gain > lc_threshold[i] and gain > best_gain:
                best_gain = gain
                best_lane = cand
        target_lane[i] = best_lane


@njit(cache=True)
def partners(x, y, vx, vy, lane, width, length, ids, L, out):
    """Fill ``out`` with the ego's leader and nearest-lane-neighbor record."""
    n = len(x)
    xm = x % L
    out[:] = 0.0
    lead, _ = neighbors_at(xm[0], lane[0], 0, xm, lane, ids, L)
    if lead >= 0:
        out[P_HAS_LEAD] = 1.0
        out[P_GAP] = max(gap_between(0, lead, xm, length, L), 0.0)
        out[P_V_EGO] = vx[0]
        out[P_V_LEAD] = vx[lead]
    best = -1
    best_dx = np.inf
    for j in range(1, n):
        if abs(lane[j] - lane[0]) != 1:
            continue
        dx = abs(ring_dx(xm[j], xm[0], L))
        if dx < best_dx or (dx == best_dx and ids[j] < ids[best]):
            best_dx = dx
            best = j
    if best >= 0:
        dy = y[best] - y[0]
        sign = 1.0 if dy >= 0.0 else -1.0
        out[P_HAS_NLN] = 1.0
        out[P_D_LAT] = max(abs(dy) - 0.5 * (width[0] + width[best]), 0.0)
        out[P_VLAT_EGO] = vy[0] * sign
        out[P_VLAT_NLN] = vy[best] * sign


@njit(cache=True)
def ego_collides(x, y, length, width, L):
    for j in range(1, len(x)):
        dx = abs(ring_dx(x[j] % L, x[0] % L, L))
        dy = abs(y[j] - y[0])
        if dx < 0.5 * (length[0] + length[j]) and dy < 0.5 * (width[0] + width[j]):
            return True
    return False


@njit(cache=True)
def advance(x, y, vx, vy, ax, lane, target_lane, target_speed, length, width,
            v0, headway, accel, decel, ids, lane_count, lane_width, L,
            n_sub, dt, lane_change_duration, partner_log):
    """Run up to ``n_sub`` substeps in place, stopping at an ego collision.

    Returns (crashed, substeps run); ``partner_log[k]`` receives the ego's
    partner record after substep ``k``.
    """
    n = len(x)
    lat_speed = lane_width / lane_change_duration
    acc = np.empty(n)
    for k in range(n_sub):
        xm = x % L
        lead, _ = leaders(xm, lane, ids, L)
        for i in range(1, n):
            a = acc_toward(i, lead[i], xm, vx, length, v0, headway, accel, decel, L)
            if target_lane[i] != lane[i]:
                tl, _ = neighbors_at(xm[i], target_lane[i], i, xm, lane, ids, L)
                a = min(a, acc_toward(i, tl, xm, vx, length, v0, headway, accel, decel, L))
            acc[i] = min(a, accel[i])
        acc[0] = min(max(EGO_SPEED_GAIN * (target_speed[0] - vx[0]), -EGO_MAX_BRAKE), EGO_MAX_ACCEL)
        for i in range(n):
            dy = target_lane[i] * lane_width - y[i]
            step_y = min(lat_speed, abs(dy) / dt)
            vy[i] = step_y if dy > 0 else (-step_y if dy < 0 else 0.0)
            vx[i] = max(vx[i] + acc[i] * dt, 0.0)
            ax[i] = acc[i]
            x[i] += vx[i] * dt
            y[i] += vy[i] * dt
            if i > 0:
                x[i] = x[i] % L
            ln = int(round(y[i] / lane_width))
            lane[i] = min(max(ln, 0), lane_count - 1)
        partners(x, y, vx, vy, lane, width, length, ids, L, partner_log[k])
        if ego_collides(x, y, length, width, L):
            return True, k + 1
    return False, n_sub
