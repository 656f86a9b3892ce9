"""Verification metrics: cosine scores, FMR thresholds, FNMR, and
error-versus-discard curves with trapezoidal AUC / pAUC summaries.

The protocol is fixed-threshold: tau is chosen once on the full comparison
set and held constant while low-quality pairs are progressively discarded.
Discarding is rank-based with deterministic (quality, input index) tie
breaking, so any strictly increasing transform of the quality scores leaves
the curve unchanged.
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, DegenerateVectorError


@dataclass
class ComparisonSet:
    genuine: list    # (similarity, pair_quality)
    impostor: list   # (similarity, pair_quality)


@dataclass
class ThresholdResult:
    tau: float
    achieved_fmr: float
    unsaturated: bool = False


@dataclass
class EDCCurve:
    grid: np.ndarray
    fnmr: np.ndarray
    retained_genuine: np.ndarray
    retained_impostor: np.ndarray
    flagged: np.ndarray
    tau: float


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateVectorError("cosine_similarity: zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pair_quality(q_a, q_b, mode="min"):
    """Aggregate two image qualities into a pair quality (min by default)."""
    if mode == "min":
        return min(q_a, q_b)
    if mode == "mean":
        return 0.5 * (q_a + q_b)
    raise ValueError(f"unknown pair-quality mode {mode!r}")


def fmr_threshold(impostor_similarities, target_fmr):
    """Smallest observed threshold with FMR(tau) <= target.

    The decision rule is "match iff similarity >= tau". When even the
    strictest observed threshold exceeds the target, tau is placed just
    above the maximum impostor similarity and the result is flagged
    unsaturated (achieved FMR 0).
    """
    sims = np.asarray(impostor_similarities, dtype=np.float64)
    if sims.size == 0:
        raise ContractError("fmr_threshold: empty impostor list")
    if not 0.0 < target_fmr < 1.0:
        raise ContractError(f"fmr_threshold: target {target_fmr} outside (0, 1)")
    n = sims.size
    # candidate taus are the distinct observed similarities, lowest first;
    # the first one meeting the target is the smallest admissible tau
    best = None
    for tau in np.unique(sims):
        fmr = float((sims >= tau).sum()) / n
        if fmr <= target_fmr:
            best = (float(tau), fmr)
            break
    if best is None:
        tau = float(np.nextafter(sims.max(), np.inf))
        return ThresholdResult(tau=tau, achieved_fmr=0.0, unsaturated=True)
    return ThresholdResult(tau=best[0], achieved_fmr=best[1])


def fnmr_at(genuine_similarities, tau):
    sims = np.asarray(genuine_similarities, dtype=np.float64)
    if sims.size == 0:
        raise ContractError("fnmr_at: empty genuine list")
    return float((sims < tau).sum()) / sims.size


def edc_compute(cset, tau, grid=None):
    """FNMR at fixed tau as the lowest-quality pairs are discarded.

    For each discard fraction d, exactly floor(d * total) pairs are removed
    in ascending (quality, stable pool index) order, genuine and impostor
    pooled. Points where no genuine pairs survive carry the last defined
    FNMR forward and are flagged.
    """
    if not cset.genuine or not cset.impostor:
        raise ContractError("edc_compute: both genuine and impostor pairs required")
    if grid is None:
        grid = default_grid()
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) <= 0) or grid[0] < 0 or grid[-1] >= 1:
        raise ContractError("edc_compute: grid must be strictly ascending within [0, 1)")
    pool = [(q, i, s, True) for i, (s, q) in enumerate(cset.genuine)]
    pool += [(q, len(cset.genuine) + i, s, False) for i, (s, q) in enumerate(cset.impostor)]
    pool.sort(key=lambda t: (t[0], t[1]))
    total = len(pool)
    fnmr = np.zeros_like(grid)
    ret_g = np.zeros(len(grid), dtype=np.int64)
    ret_i = np.zeros(len(grid), dtype=np.int64)
    flagged = np.zeros(len(grid), dtype=bool)
    last = None
    for k, d in enumerate(grid):
        drop = int(math.floor(d * total))
        kept = pool[drop:]
        gen = [s for (_, _, s, is_gen) in kept if is_gen]
        ret_g[k] = len(gen)
        ret_i[k] = len(kept) - len(gen)
        if gen:
            last = fnmr_at(gen, tau)
            fnmr[k] = last
        else:
            flagged[k] = True
            fnmr[k] = last if last is not None else 0.0
    return EDCCurve(grid=grid, fnmr=fnmr, retained_genuine=ret_g,
                    retained_impostor=ret_i, flagged=flagged, tau=tau)


def default_grid(d_max=0.98, step=0.01):
    n = int(round(d_max / step))
    return np.round(np.arange(n + 1) * step, 10)


def auc(curve, d_max):
    """Trapezoidal area of FNMR over [0, d_max], unnormalized."""
    grid, fnmr = np.asarray(curve.grid), np.asarray(curve.fnmr)
    if grid[0] > 0 or grid[-1] < d_max - 1e-12:
        raise ContractError(f"auc: grid [{grid[0]}, {grid[-1]}] does not cover [0, {d_max}]")
    mask = grid <= d_max + 1e-12
    g, f = grid[mask], fnmr[mask]
    if g[-1] < d_max - 1e-12:
        f = np.append(f, np.interp(d_max, grid, fnmr))
        g = np.append(g, d_max)
    return float(np.trapezoid(f, g))


def pauc(curve, d_max=0.3):
    return auc(curve, d_max)


# ---------------------------------------------------------------------------
# file-based assembly and output


def _read_csv_rows(path):
    if not os.path.exists(path):
        raise IOError(f"file not found: {path}")
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def read_embeddings(path):
    rows = _read_csv_rows(path)
    out = {}
    for row in rows:
        vid = row["id"]
        vals = [float(row[k]) for k in row if k != "id"]
        out[vid] = np.array(vals)
    return out


def read_scores(path):
    return {row["id"]: float(row["quality"]) for row in _read_csv_rows(path)}


def build_comparison_set(embeddings_path, scores_path, pairs_path, quality_mode="min"):
    """Join embeddings, quality scores, and labeled pairs into a ComparisonSet."""
    embeddings = read_embeddings(embeddings_path)
    scores = read_scores(scores_path)
    genuine, impostor = [], []
    for row in _read_csv_rows(pairs_path):
        for vid in (row["id_a"], row["id_b"]):
            if vid not in embeddings:
                raise KeyError(f"id {vid!r} from {pairs_path} missing in {embeddings_path}")
            if vid not in scores:
                raise KeyError(f"id {vid!r} from {pairs_path} missing in {scores_path}")
        sim = cosine_similarity(embeddings[row["id_a"]], embeddings[row["id_b"]])
        qual = pair_quality(scores[row["id_a"]], scores[row["id_b"]], mode=quality_mode)
        (genuine if row["genuine"].strip() == "1" else impostor).append((sim, qual))
    return ComparisonSet(genuine=genuine, impostor=impostor)


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["discard", "fnmr", "retained_genuine", "retained_impostor", "flagged"])
        for k in range(len(curve.grid)):
            w.writerow([repr(float(curve.grid[k])), repr(float(curve.fnmr[k])),
                        int(curve.retained_genuine[k]), int(curve.retained_impostor[k]),
                        int(curve.flagged[k])])


def write_summary_csv(path, tau_result, auc_value, pauc_value):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["tau", repr(float(tau_result.tau))])
        w.writerow(["achieved_fmr", repr(float(tau_result.achieved_fmr))])
        w.writerow(["auc", repr(float(auc_value))])
        w.writerow(["pauc30", repr(float(pauc_value))])
