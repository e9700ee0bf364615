"""EER, DET curves and per-technology reports.

Scores follow the convention "higher means more likely synthetic". At a
threshold ``t`` a clip is called bonafide when its score is below ``t``:

* FAR(t): fraction of spoofed clips with score < t (accepted as bonafide)
* FRR(t): fraction of bonafide clips with score >= t (rejected)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .features import FeatureConfig
from .pipeline import featurize, load_clip, score_patches, to_patches

log = logging.getLogger(__name__)


class EERUndefinedError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    source_id: str
    label: str
    technology: str
    score: float


def _as_arrays(scores, labels=None):
    if labels is None:
        samples = list(scores)
        s = np.array([x.score for x in samples], dtype=np.float64)
        spoof = np.array([x.label == "spoof" for x in samples], dtype=bool)
    else:
        s = np.asarray(scores, dtype=np.float64)
        spoof = np.array([l == "spoof" if isinstance(l, str) else bool(l) for l in labels],
                         dtype=bool)
    if s.size == 0 or spoof.all() or not spoof.any():
        raise EERUndefinedError("EER needs at least one bonafide and one spoof score")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, spoof


def error_counts(scores, labels=None):
    """Sweep thresholds over the unique scores plus +inf.

    Returns ascending ``thresholds`` and integer arrays ``fa`` (spoof below
    threshold) and ``fr`` (bonafide at or above threshold), plus the class
    totals.
    """
    s, spoof = _as_arrays(scores, labels)
    order = np.argsort(s, kind="mergesort")
    s, spoof = s[order], spoof[order]
    uniq, first = np.unique(s, return_index=True)
    spoof_cum = np.concatenate([[0], np.cumsum(spoof)])
    bona_cum = np.concatenate([[0], np.cumsum(~spoof)])
    n_spoof, n_bona = int(spoof_cum[-1]), int(bona_cum[-1])
    fa = np.append(spoof_cum[first], n_spoof)
    fr = np.append(n_bona - bona_cum[first], 0)
    thresholds = np.append(uniq, np.inf)
    return thresholds, fa.astype(np.int64), fr.astype(np.int64), n_spoof, n_bona


def compute_eer(scores, labels=None):
    """Equal error rate and the threshold where FAR meets FRR.

    Between two sweep points the crossing is linearly interpolated. The
    crossing is found with integer arithmetic, so the EER is the correctly
    rounded value of the exact rational answer.
    """
    thr, fa, fr, ns, nb = error_counts(scores, labels)
    gap = [int(a) * nb - int(b) * ns for a, b in zip(fa, fr)]
    i = next(k for k, d in enumerate(gap) if d >= 0)
    if gap[i] == 0:
        return int(fa[i]) / ns, float(thr[i])
    d0, d1 = gap[i - 1], gap[i]
    a0, a1 = int(fa[i - 1]), int(fa[i])
    eer = (a0 * (d0 - d1) + d0 * (a1 - a0)) / (ns * (d0 - d1))
    lam = d0 / (d0 - d1)
    t0, t1 = float(thr[i - 1]), float(thr[i])
    threshold = t0 + lam * (t1 - t0) if math.isfinite(t1) else t0
    return eer, threshold


def det_curve(scores, labels=None):
    """(FAR, FRR) per threshold, from the highest threshold to the lowest.

    Along the list FAR never increases and FRR never decreases; the first
    point is (1, 0) and the last is (0, 1).
    """
    _, fa, fr, ns, nb = error_counts(scores, labels)
    return [(int(a) / ns, int(b) / nb) for a, b in zip(fa[::-1], fr[::-1])]


@dataclass
class EvalReport:
    overall_eer: float
    threshold_at_eer: float
    per_subset: dict
    unseen_average: float | None
    unseen: list
    counts: dict
    det_points: list = field(repr=False)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def det_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["far", "frr"])
        w.writerows(self.det_points)
        return buf.getvalue()

    def table(self) -> str:
        rows = [("Overall", self.overall_eer)]
        rows += [(t, e) for t, e in self.per_subset.items()]
        if self.unseen_average is not None:
            rows.append(("Average on unseen", self.unseen_average))
        return "\n".join(f"{name:<24s} {100 * e:6.2f}%" for name, e in rows)


def report_from_scores(samples, unseen=None) -> EvalReport:
    samples = list(samples)
    eer, thr = compute_eer(samples)
    bona = [s for s in samples if s.label == "bonafide"]
    techs = list(dict.fromkeys(s.technology for s in samples if s.label == "spoof"))
    per_subset, counts = {}, {"bonafide": len(bona)}
    for tech in techs:
        spoof = [s for s in samples if s.label == "spoof" and s.technology == tech]
        per_subset[tech] = compute_eer(bona + spoof)[0]
        counts[tech] = len(spoof)
    unseen = list(unseen) if unseen is not None else []
    avail = []
    for tech in unseen:
        if tech in per_subset:
            avail.append(tech)
        else:
            log.warning("unseen technology %r has no spoof samples; skipped", tech)
    avg = float(np.mean([per_subset[t] for t in avail])) if avail else None
    return EvalReport(eer, thr, per_subset, avg, avail, counts, det_curve(samples))


def score_records(records, root, params, mcfg, stats, fcfg=FeatureConfig(), batch=32):
    patches = [to_patches(featurize(load_clip(r, root), stats, fcfg), mcfg) for r in records]
    scores = score_patches(patches, params, mcfg, batch)
    return [ScoredSample(r.path, r.label, r.technology, float(s))
            for r, s in zip(records, scores)]


def evaluate(records, checkpoint, root=".", unseen=None, batch=32,
             fcfg=FeatureConfig()) -> EvalReport:
    """Score every record (no augmentation) and build the report.

    ``checkpoint`` is a path or a ``load_checkpoint`` tuple. Without an
    explicit ``unseen`` list, any spoof technology absent from the
    checkpoint's recorded training technologies counts as unseen.
    """
    records = list(records)
    if not records:
        raise ValueError("empty test manifest")
    if isinstance(checkpoint, tuple):
        params, mcfg, stats, meta = checkpoint
    else:
        params, mcfg, stats, meta = M.load_checkpoint(checkpoint)
    samples = score_records(records, root, params, mcfg, stats, fcfg, batch)
    if unseen is None and "seen_technologies" in meta.extra:
        seen = set(meta.extra["seen_technologies"])
        unseen = [t for t in dict.fromkeys(r.technology for r in records if r.is_spoof)
                  if t not in seen]
    return report_from_scores(samples, unseen)
