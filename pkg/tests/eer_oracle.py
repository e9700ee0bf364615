"""Brute-force EER in exact rational arithmetic.

Every candidate threshold is tried directly by counting; the FAR and FRR
polylines are then intersected segment by segment.
"""

from fractions import Fraction


def rates(scores, is_spoof):
    thresholds = sorted(set(scores)) + [float("inf")]
    n_spoof = sum(is_spoof)
    n_bona = len(scores) - n_spoof
    pts = []
    for t in thresholds:
        fa = sum(1 for s, sp in zip(scores, is_spoof) if sp and s < t)
        fr = sum(1 for s, sp in zip(scores, is_spoof) if not sp and s >= t)
        pts.append((t, Fraction(fa, n_spoof), Fraction(fr, n_bona)))
    return pts


def oracle_eer(scores, is_spoof):
    pts = rates(scores, is_spoof)
    for (t0, a0, r0), (t1, a1, r1) in zip(pts, pts[1:]):
        if a0 == r0:
            return a0, t0
        if a1 >= r1:
            lam = (r0 - a0) / ((a1 - a0) - (r1 - r0))
            return a0 + lam * (a1 - a0), (t0, t1, lam)
    raise AssertionError("curves never cross")
