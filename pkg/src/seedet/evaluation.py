"""Candidate scoring: hit matching, FROC curves, bootstrap bands.

A candidate hits a nodule when the Euclidean distance between the
candidate position and the nodule center is at most the nodule radius.
For each nodule, its highest-probability hitter is the true positive;
any further hitters of the same nodule are ignored (neither TP nor FP);
candidates hitting nothing are false positives.

These tags are computed once from the full candidate list. Because
matching visits candidates in descending probability, restricting to any
probability threshold leaves every tag unchanged (the prefix sees the same
competition), so sweeping thresholds over the tagged probabilities is
exactly equivalent to re-matching per threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import NoduleAnnotation

TARGET_FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

CANDIDATE_FIELDS = ("scan_id", "x", "y", "z", "probability")


@dataclass(frozen=True)
class Candidate:
    scan_id: str
    x: float
    y: float
    z: float
    probability: float


@dataclass
class ScanMatch:
    """Matching outcome for one scan: enough to rebuild any threshold cut."""

    scan_id: str
    n_nodules: int
    tp_probs: np.ndarray  # probability of the winning hitter per detected nodule
    fp_probs: np.ndarray  # probabilities of non-hitting candidates
    # per-candidate tags in the order given, for reporting: ("TP", gt_index),
    # ("FP", None) or ("IGNORED", gt_index)
    tags: list[tuple[str, Optional[int]]] = field(default_factory=list)


def match_candidates(
    candidates: Sequence[Candidate], nodules: Sequence[NoduleAnnotation], scan_id: str = ""
) -> ScanMatch:
    """Tag every candidate for one scan (see module docstring for rules).

    Candidates are processed in descending probability, ties by list
    order. A candidate hitting several undetected nodules takes the one
    with the nearest center (further ties: lower nodule index).
    """
    n = len(candidates)
    order = sorted(range(n), key=lambda i: (-candidates[i].probability, i))
    detected = [False] * len(nodules)
    tags: list[Optional[tuple[str, Optional[int]]]] = [None] * n
    tp_probs = []
    fp_probs = []
    for i in order:
        c = candidates[i]
        best_j = -1
        best_d = np.inf
        hit_any = False
        for j, nodule in enumerate(nodules):
            d = float(
                np.sqrt(
                    (c.x - nodule.x) ** 2 + (c.y - nodule.y) ** 2 + (c.z - nodule.z) ** 2
                )
            )
            if d <= nodule.radius:
                hit_any = True
                if not detected[j] and d < best_d:
                    best_d = d
                    best_j = j
        if best_j >= 0:
            detected[best_j] = True
            tags[i] = ("TP", best_j)
            tp_probs.append(c.probability)
        elif hit_any:
            tags[i] = ("IGNORED", None)
        else:
            tags[i] = ("FP", None)
            fp_probs.append(c.probability)
    return ScanMatch(
        scan_id=scan_id,
        n_nodules=len(nodules),
        tp_probs=np.asarray(tp_probs, dtype=np.float64),
        fp_probs=np.asarray(fp_probs, dtype=np.float64),
        tags=[t for t in tags if t is not None] if n else [],
    )


@dataclass
class FrocCurve:
    fp_rates: np.ndarray  # operating points, ascending FP/scan
    sensitivities: np.ndarray  # matching sensitivities
    target_fp_rates: tuple[float, ...]
    target_sensitivities: np.ndarray  # interpolated at the targets
    mean_sensitivity: float  # plain average over the targets


def _operating_points(matches: Sequence[ScanMatch]) -> tuple[np.ndarray, np.ndarray, int, int]:
    tp = np.concatenate([m.tp_probs for m in matches]) if matches else np.zeros(0)
    fp = np.concatenate([m.fp_probs for m in matches]) if matches else np.zeros(0)
    total_nodules = sum(m.n_nodules for m in matches)
    return tp, fp, total_nodules, len(matches)


def froc(
    matches: Sequence[ScanMatch],
    target_fp_rates: Sequence[float] = TARGET_FP_RATES,
) -> FrocCurve:
    """Sweep a probability threshold over all tagged candidates.

    Every distinct candidate probability is a threshold (candidates with
    probability >= t survive). Sensitivity = detected nodules / all
    nodules; FP rate = surviving false positives / number of scans.
    Interpolation at the target rates is linear between operating points,
    constant beyond the highest point, and zero below the lowest.
    """
    if not matches:
        raise ValueError("froc needs at least one scan")
    tp, fp, total_nodules, n_scans = _operating_points(matches)
    if total_nodules == 0:
        raise ValueError("froc needs at least one annotated nodule")
    thresholds = np.unique(np.concatenate([tp, fp]))[::-1]  # descending
    if thresholds.size == 0:
        # no candidates at all: a single all-miss operating point
        fps = np.array([0.0])
        sens = np.array([0.0])
    else:
        tp_sorted = np.sort(tp)
        fp_sorted = np.sort(fp)
        n_tp = tp.size - np.searchsorted(tp_sorted, thresholds, side="left")
        n_fp = fp.size - np.searchsorted(fp_sorted, thresholds, side="left")
        sens = n_tp / total_nodules
        fps = n_fp / n_scans
    # thresholds descend, so fps ascends; collapse duplicate fp values to
    # their best sensitivity (the lowest threshold sharing that fp count)
    best_sens: dict[float, float] = {}
    for f, s in zip(fps, sens):
        best_sens[f] = max(s, best_sens.get(f, 0.0))
    op_fp = np.array(sorted(best_sens))
    op_sens = np.array([best_sens[f] for f in op_fp])

    targets = np.asarray(target_fp_rates, dtype=np.float64)
    interp = np.interp(targets, op_fp, op_sens, left=0.0, right=float(op_sens[-1]))
    return FrocCurve(
        fp_rates=op_fp,
        sensitivities=op_sens,
        target_fp_rates=tuple(float(t) for t in target_fp_rates),
        target_sensitivities=interp,
        mean_sensitivity=float(interp.mean()),
    )


def bootstrap_band(
    matches: Sequence[ScanMatch],
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    target_fp_rates: Sequence[float] = TARGET_FP_RATES,
) -> tuple[np.ndarray, np.ndarray]:
    """Percentile confidence band for the target-rate sensitivities.

    Resamples whole scans with replacement; resamples with zero annotated
    nodules are redrawn (sensitivity undefined there).
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xB007)))
    matches = list(matches)
    n = len(matches)
    rows = np.empty((n_resamples, len(tuple(target_fp_rates))))
    for b in range(n_resamples):
        for _ in range(1000):
            idx = rng.integers(0, n, size=n)
            sample = [matches[i] for i in idx]
            if sum(m.n_nodules for m in sample) > 0:
                break
        else:
            raise RuntimeError("bootstrap could not draw a resample containing nodules")
        rows[b] = froc(sample, target_fp_rates).target_sensitivities
    lo_q = 100.0 * (1.0 - level) / 2.0
    lower = np.percentile(rows, lo_q, axis=0)
    upper = np.percentile(rows, 100.0 - lo_q, axis=0)
    return lower, upper


def evaluate_candidates(
    candidates: Sequence[Candidate],
    annotations: Sequence[NoduleAnnotation],
    target_fp_rates: Sequence[float] = TARGET_FP_RATES,
) -> tuple[FrocCurve, list[ScanMatch]]:
    """Group by scan, match, and build the FROC curve.

    The scan universe is the union of scan ids appearing in either list;
    a scan with candidates but no annotations still contributes false
    positives to the FP-per-scan denominator.
    """
    by_scan_c: dict[str, list[Candidate]] = {}
    by_scan_a: dict[str, list[NoduleAnnotation]] = {}
    for c in candidates:
        by_scan_c.setdefault(c.scan_id, []).append(c)
    for a in annotations:
        by_scan_a.setdefault(a.scan_id, []).append(a)
    scan_ids = sorted(set(by_scan_c) | set(by_scan_a))
    matches = [
        match_candidates(by_scan_c.get(s, []), by_scan_a.get(s, []), scan_id=s)
        for s in scan_ids
    ]
    return froc(matches, target_fp_rates), matches


# -- candidate CSV I/O --------------------------------------------------------


def write_candidates(path, candidates: Sequence[Candidate]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CANDIDATE_FIELDS)
        for c in candidates:
            writer.writerow([c.scan_id, repr(c.x), repr(c.y), repr(c.z), repr(c.probability)])


def read_candidates(path) -> list[Candidate]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != list(
            CANDIDATE_FIELDS
        ):
            raise OSError(f"{path}: expected header {','.join(CANDIDATE_FIELDS)}")
        for row in reader:
            out.append(
                Candidate(
                    scan_id=row["scan_id"],
                    x=float(row["x"]),
                    y=float(row["y"]),
                    z=float(row["z"]),
                    probability=float(row["probability"]),
                )
            )
    return out


def write_froc_csv(
    path,
    curve: FrocCurve,
    band: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> None:
    """Rows fp_per_scan,sensitivity,lower,upper (blank bounds without a
    band), then a trailing mean,<value> row."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fp_per_scan", "sensitivity", "lower", "upper"])
        for i, rate in enumerate(curve.target_fp_rates):
            row = [repr(rate), repr(float(curve.target_sensitivities[i]))]
            if band is not None:
                row += [repr(float(band[0][i])), repr(float(band[1][i]))]
            else:
                row += ["", ""]
            writer.writerow(row)
        writer.writerow(["mean", repr(curve.mean_sensitivity), "", ""])


# -- published reference rows -------------------------------------------------

# sensitivities at (0.125, 0.25, 0.5, 1, 2, 4, 8) FP/scan for the systems the
# report compares against, keyed by (system, dataset)
PUBLISHED_SENSITIVITIES: dict[tuple[str, str], tuple[float, ...]] = {
    ("3d-rpn", "luna16"): (0.662, 0.746, 0.815, 0.864, 0.902, 0.918, 0.932),
    ("deeplung", "luna16"): (0.692, 0.769, 0.824, 0.865, 0.893, 0.917, 0.933),
    ("seeded-rpn", "luna16"): (0.739, 0.803, 0.858, 0.888, 0.907, 0.916, 0.920),
    ("3d-rpn", "lidc"): (0.552, 0.630, 0.700, 0.751, 0.788, 0.823, 0.852),
    ("seeded-rpn", "lidc"): (0.600, 0.674, 0.751, 0.824, 0.850, 0.853, 0.859),
}


def published_scores() -> dict[tuple[str, str], float]:
    """Mean sensitivity over the seven FP rates for each published row."""
    return {
        key: float(np.mean(vals)) for key, vals in PUBLISHED_SENSITIVITIES.items()
    }
