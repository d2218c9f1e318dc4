"""Trend checks over trial results, reported by the CLI and asserted by the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

AXIS_BOUND_DEG = 3.5
SPEARMAN_MIN = 0.8
DOMINANCE_MIN = 0.9


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    value: float = float("nan")

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"

    def to_json_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail,
                "value": None if np.isnan(self.value) else float(self.value)}


def _valid(results, kind):
    return [t for t in results if t.kind == kind and not t.skipped]


def _median(results, attr="rmse_mm"):
    return float(np.median([getattr(t, attr) for t in results])) if results else float("nan")


def count_trend(results):
    """Median RMSE at 55 landmarks no worse than at 5, and the 55->205 gain no larger than 5->55."""
    trials = _valid(results, "landmark_count")
    med = {n: _median([t for t in trials if t.setting == n]) for n in (5, 55, 205)}
    if any(np.isnan(v) for v in med.values()):
        return [CheckResult("count trend", False, f"missing settings in {sorted({t.setting for t in trials})}")]
    first, second = med[5] - med[55], med[55] - med[205]
    return [
        CheckResult("count: median(55) <= median(5)", med[55] <= med[5],
                    f"median RMSE 5: {med[5]:.3f} mm, 55: {med[55]:.3f} mm", med[55] - med[5]),
        CheckResult("count: gain 55->205 <= gain 5->55", second <= first,
                    f"gain 5->55: {first:.3f} mm, 55->205: {second:.3f} mm", second - first),
    ]


def displacement_spearman(results):
    """Per-shape Spearman correlation of iteration-mean RMSE against |d|; returns {shape: rho}."""
    trials = _valid(results, "displacement")
    out = {}
    for sid in dict.fromkeys(t.shape_id for t in trials):
        mine = [t for t in trials if t.shape_id == sid]
        mags = sorted({abs(t.setting) for t in mine})
        means = [np.mean([t.rmse_mm for t in mine if abs(t.setting) == m]) for m in mags]
        out[sid] = float(spearmanr(mags, means).statistic) if len(mags) > 1 else float("nan")
    return out


def displacement_trend(results, magnitudes=(0.0, 1.0, 3.0, 5.0), axis_bound=AXIS_BOUND_DEG):
    trials = _valid(results, "displacement")
    meds = [_median([t for t in trials if abs(t.setting) == m]) for m in magnitudes]
    mono = all(b >= a for a, b in zip(meds, meds[1:])) and not any(np.isnan(meds))
    rhos = displacement_spearman(results)
    rho = float(np.median(list(rhos.values()))) if rhos else float("nan")
    settings = sorted({t.setting for t in trials})
    axis_meds = {s: _median([t for t in trials if t.setting == s], "axis_deviation_deg") for s in settings}
    worst = max(axis_meds.values()) if axis_meds else float("nan")
    return [
        CheckResult("displacement: median RMSE non-decreasing in |d|", mono,
                    "medians " + ", ".join(f"|d|={m:g}: {v:.3f}" for m, v in zip(magnitudes, meds)),
                    float(np.min(np.diff(meds))) if len(meds) > 1 else float("nan")),
        CheckResult(f"displacement: Spearman rho >= {SPEARMAN_MIN}", rho >= SPEARMAN_MIN,
                    f"median per-shape rho {rho:.3f} over {len(rhos)} shapes", rho),
        CheckResult(f"displacement: median axis deviation <= {axis_bound} deg", worst <= axis_bound,
                    f"worst setting median {worst:.3f} deg", worst),
    ]


def ring_trend(results, diaphysis=3, epiphyses=(1, 8)):
    """Landmarks on the diaphysis ring predict worse than landmarks on either end ring."""
    trials = _valid(results, "ring_distance")
    med = {k: _median([t for t in trials if t.setting == k]) for k in (diaphysis, *epiphyses)}
    if any(np.isnan(v) for v in med.values()):
        return [CheckResult("ring trend", False, f"missing rings in {sorted({t.setting for t in trials})}")]
    ends = max(med[k] for k in epiphyses)
    return [CheckResult(f"ring: diaphysis ring {diaphysis} worse than end rings {epiphyses}", med[diaphysis] > ends,
                        ", ".join(f"ring {k}: {v:.3f} mm" for k, v in med.items()), med[diaphysis] - ends)]


def skin_trend(results, axis_bound=AXIS_BOUND_DEG, kind="skin_simulated"):
    bony = [t for t in results if t.kind == "skin_bony"]
    skin = [t for t in results if t.kind == kind and t.setting == 1.0 and not t.skipped]
    zero = [t for t in results if t.kind == kind and t.setting == 0.0]
    out = []
    mb, ms = _median(bony), _median(skin)
    out.append(CheckResult("skin: median skin RMSE > median bony RMSE", ms > mb,
                           f"bony {mb:.3f} mm, skin {ms:.3f} mm", ms - mb))
    if zero:
        key = lambda t: (t.shape_id, t.iteration)  # noqa: E731
        b = {key(t): (t.rmse_mm, t.axis_deviation_deg) for t in bony}
        same = all(b.get(key(t)) == (t.rmse_mm, t.axis_deviation_deg) for t in zero)
        out.append(CheckResult("skin: zero offsets identical to bony run", same,
                               f"{len(zero)} paired trials compared bit for bit"))
    ax = _median(skin, "axis_deviation_deg")
    out.append(CheckResult(f"skin: median axis deviation <= {axis_bound} deg", ax <= axis_bound,
                           f"median {ax:.3f} deg", ax))
    return out


def baseline_dominance(results, min_landmarks=5, threshold=DOMINANCE_MIN):
    """Share of undisplaced trials with >= ``min_landmarks`` landmarks that beat the prior-mean RMSE."""
    eligible = [t for t in results if not t.skipped and t.n_landmarks >= min_landmarks
                and t.kind in ("landmark_count", "ring_distance", "displacement")
                and not (t.kind == "displacement" and t.setting != 0)]
    if not eligible:
        return [CheckResult("baseline dominance", False, "no eligible trials")]
    wins = sum(t.rmse_mm < t.baseline_rmse_mm for t in eligible)
    frac = wins / len(eligible)
    return [CheckResult(f"baseline dominance >= {threshold:.0%}", frac >= threshold,
                        f"{wins}/{len(eligible)} trials beat the prior mean ({frac:.1%})", frac)]


def run_checks(kind, results):
    checks = []
    if kind == "landmark_count":
        checks += count_trend(results)
    elif kind == "displacement":
        checks += displacement_trend(results)
    elif kind == "ring_distance":
        checks += ring_trend(results)
    elif kind in ("skin_simulated", "skin_real"):
        checks += skin_trend(results, kind=kind)
    if kind in ("landmark_count", "displacement") or any(t.n_landmarks >= 5 for t in results):
        checks += baseline_dominance(results)
    return checks
