"""Trial-log persistence, report assembly, and CSV/SVG emission.

The append-only JSON-Lines trial log is the source of truth: every metric
in the final report comes from a logged record, and re-rendering a stored
log reproduces the report exactly (timestamp aside).
"""

from __future__ import annotations

import json
import math
import re
import threading
import time
from pathlib import Path

_CURVE_KEY = re.compile(r"^(?P<name>.+)/curve/p(?P<point>\d+)/r(?P<rep>\d+)$")


class Recorder:
    """Keyed record store backed by an optional JSONL file.

    Re-opening an existing file replays its records, which is how an
    interrupted pipeline resumes: completed work is looked up instead of
    recomputed.
    """

    def __init__(self, path=None, prefix: str = ""):
        self._path = Path(path) if path is not None else None
        self._prefix = prefix
        self._lock = threading.Lock()
        self._records: dict[str, dict] = {}
        if self._path is not None and self._path.exists():
            with open(self._path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._records[rec["key"]] = {k: v for k, v in rec.items() if k != "key"}

    def lookup(self, key: str):
        return self._records.get(self._prefix + key)

    def record(self, key: str, payload: dict) -> None:
        full = self._prefix + key
        with self._lock:
            if full in self._records:
                return
            self._records[full] = payload
            if self._path is not None:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": full, **payload}, sort_keys=True) + "\n")

    def with_prefix(self, prefix: str) -> "Recorder":
        view = Recorder.__new__(Recorder)
        view._path = self._path
        view._prefix = self._prefix + prefix + "/"
        view._lock = self._lock
        view._records = self._records
        return view

    def records(self) -> dict[str, dict]:
        return dict(self._records)


def load_records(path) -> dict[str, dict]:
    return Recorder(path).records()


# ---------------------------------------------------------------------------
# report assembly

def _fmt_pct(p: float) -> str:
    return f"{p * 100:.4g}%"


def _fmt_acc_summary(base: float, res: float) -> str:
    return f"{base * 100:.1f} -> {res * 100:.1f} ({(res - base) * 100:+.1f})"


def _fmt_resistance_summary(base: float, res: float, lower_bound: bool) -> str:
    ratio = res / base if base > 0 else math.inf
    mark = ">=" if lower_bound else "x"
    return f"{_fmt_pct(base)} -> {_fmt_pct(res)} ({mark}{ratio:.1f})"


def _stage_trials_from_records(records: dict, stage: str):
    from .search import trial_from_record

    best = {}
    for key, rec in records.items():
        if rec.get("kind") == "trial" and key.startswith(f"{stage}/"):
            tid = rec["trial_id"]
            if tid not in best or rec["resource"] > best[tid]["resource"]:
                best[tid] = rec
    return [trial_from_record(best[tid]) for tid in sorted(best)]


def curves_from_records(records: dict) -> dict[str, "object"]:
    """Rebuild every logged poisoning curve, keyed by its audit name."""
    import numpy as np

    from .resistance import CurvePoint, PoisonCurve

    grouped: dict[str, dict[int, list]] = {}
    for key, rec in records.items():
        m = _CURVE_KEY.match(key)
        if m is None:
            continue
        grouped.setdefault(m["name"], {}).setdefault(int(m["point"]), []).append(rec)
    curves = {}
    for name, by_point in grouped.items():
        points = []
        for i in sorted(by_point):
            rows = by_point[i]
            ok = [r for r in rows if r["status"] != "failed"]
            seeds = tuple(r["seed"] for r in sorted(rows, key=lambda r: r["repeat"]))
            if ok:
                points.append(CurvePoint(rows[0]["p"],
                                         float(np.median([r["a_backdoor"] for r in ok])),
                                         float(np.median([r["a_main"] for r in ok])),
                                         seeds))
            else:
                points.append(CurvePoint(rows[0]["p"], float("nan"), float("nan"),
                                         seeds, failed=True))
        curves[name] = PoisonCurve(tuple(points))
    return curves


def build_report(records: dict, select: int | None = None) -> dict:
    """Assemble the pipeline report from trial-log records.

    ``select`` re-points the resistant config at an explicit stage-2 trial;
    if that trial was not the one audited, the audit-2 resistance point is
    reported as unaudited rather than recomputed.
    """
    from .search import joint_score, pareto_frontier

    sel = records.get("meta/selection")
    if sel is None:
        raise ValueError("trial log has no selection record; was the pipeline run?")
    alpha = sel["alpha"]

    stage1 = _stage_trials_from_records(records, "stage1")
    stage2 = _stage_trials_from_records(records, "stage2")
    complete2 = [r for r in stage2 if r.complete and r.a_backdoor is not None]
    frontier = pareto_frontier(complete2) if complete2 else []

    base_id = sel["base_trial"]
    audited_id = sel["resistant_trial"]
    resistant_id = audited_id if select is None else select
    selected_by = sel["selected_by"] if select is None else "explicit"
    res_trials = [r for r in complete2 if r.trial_id == resistant_id]
    if not res_trials:
        raise ValueError(f"selected trial {resistant_id} not found among complete "
                         f"stage-2 trials")
    res_trial = res_trials[0]
    base_trial = next(r for r in stage1 if r.trial_id == base_id)

    rp1 = records.get("audit1/resistance")
    rp2_base = records.get("audit2-base/resistance")
    rp2_res = records.get("audit2-resistant/resistance") if resistant_id == audited_id else None

    audit2 = {"base": rp2_base, "resistant": rp2_res, "boost_ratio": None,
              "ratio_is_lower_bound": False}
    status = "ok"
    if rp2_res is None:
        status = "not_audited_for_selection"
    elif rp2_base is not None:
        lower_bound = rp2_res["status"] != "ok"
        ratio = rp2_res["p"] / rp2_base["p"] if rp2_base["p"] > 0 else math.inf
        audit2["boost_ratio"] = ratio
        audit2["ratio_is_lower_bound"] = lower_bound
        if rp2_res["p"] < rp2_base["p"]:
            status = "no_resistant_configuration_found"

    final_base = records.get("final/base")
    final_res = records.get("final/resistant")
    accuracy = None
    if final_base and final_res and resistant_id == audited_id:
        accuracy = {
            "base_test": final_base["a_main"],
            "resistant_test": final_res["a_main"],
            "delta": final_res["a_main"] - final_base["a_main"],
            "per_class_base": final_base["per_class"],
            "per_class_resistant": final_res["per_class"],
            "summary": _fmt_acc_summary(final_base["a_main"], final_res["a_main"]),
        }

    variants = {}
    for key, rec in records.items():
        if rec.get("kind") == "resistance_point" and key.startswith("variant-"):
            variants.setdefault(rec["variant"], {})[rec["config"]] = {
                k: v for k, v in rec.items() if k not in ("kind", "variant", "config")}
    for entry in variants.values():
        if "base" in entry and "resistant" in entry and entry["base"]["p"] > 0:
            entry["boost_ratio"] = entry["resistant"]["p"] / entry["base"]["p"]

    resistance_summary = None
    if rp2_base and rp2_res:
        resistance_summary = _fmt_resistance_summary(
            rp2_base["p"], rp2_res["p"], audit2["ratio_is_lower_bound"])

    importance_rec = records.get("meta/importance", {})
    config_rec = records.get("meta/config", {})
    p_star_rec = records.get("meta/p_star", {})

    return {
        "version": sel.get("version"),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "status": status,
        "alpha": alpha,
        "k": sel["k"],
        "p_star": p_star_rec.get("value"),
        "master_seed": sel["master_seed"],
        "base": {
            "trial_id": base_id,
            "lambda": base_trial.lam,
            "stage1_a_main": base_trial.a_main,
        },
        "resistant": {
            "trial_id": resistant_id,
            "lambda": res_trial.lam,
            "selected_by": selected_by,
            "stage2_a_main": res_trial.a_main,
            "stage2_a_backdoor": res_trial.a_backdoor,
            "joint_score": joint_score(res_trial, alpha),
        },
        "audit1": rp1,
        "audit2": audit2,
        "accuracy": accuracy,
        "resistance_summary": resistance_summary,
        "frontier": [{"trial_id": r.trial_id, "lambda": r.lam, "a_main": r.a_main,
                      "a_backdoor": r.a_backdoor} for r in frontier],
        "variants": variants,
        "importance": importance_rec.get("tables", {}),
        "poison_spec": {k: v for k, v in records.get("meta/poison", {}).items()
                        if k != "kind"},
        "trial_counts": {"stage1": len(stage1), "stage2": len(stage2)},
        "provenance": {
            "config_hash": config_rec.get("hash"),
            "profile": config_rec.get("profile"),
        },
    }


# ---------------------------------------------------------------------------
# file emission

def write_report_files(report: dict, records: dict, out_dir) -> Path:
    """Write report.json, frontier CSV/SVG, and per-curve CSVs."""
    from .resistance import curve_to_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                           encoding="utf-8")

    frontier = report.get("frontier") or []
    if frontier:
        lines = ["trial_id,a_main,a_backdoor"]
        lines += [f"{r['trial_id']},{r['a_main']!r},{r['a_backdoor']!r}" for r in frontier]
        (out / "frontier.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

        stage2 = _stage_trials_from_records(records, "stage2")
        pts = [(r.a_main, r.a_backdoor, False) for r in stage2
               if r.complete and r.a_backdoor is not None]
        front_ids = {r["trial_id"] for r in frontier}
        pts += [(r["a_main"], r["a_backdoor"], True) for r in frontier]
        svg = svg_scatter(
            [(x, y) for x, y, f in pts if not f],
            [(x, y) for x, y, f in pts if f],
            xlabel="main accuracy", ylabel="backdoor accuracy")
        (out / "frontier.svg").write_text(svg, encoding="utf-8")
        del front_ids

    curves = curves_from_records(records)
    if curves:
        curve_dir = out / "curves"
        curve_dir.mkdir(exist_ok=True)
        for name, curve in curves.items():
            curve_to_csv(curve, curve_dir / f"{name}.csv")
    return report_path


def _scale(values, lo, hi, out_lo, out_hi):
    span = (hi - lo) or 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def svg_scatter(points, highlight, xlabel: str = "", ylabel: str = "",
                width: int = 640, height: int = 480) -> str:
    """Minimal dependency-free scatter plot; highlighted points get a
    connecting polyline (the frontier)."""
    all_pts = list(points) + list(highlight)
    if not all_pts:
        return "<svg xmlns='http://www.w3.org/2000/svg'/>"
    xs = [p[0] for p in all_pts]
    ys = [p[1] for p in all_pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    m = 50
    sx = lambda v: _scale([v], x_lo, x_hi, m, width - m)[0]
    sy = lambda v: _scale([v], y_lo, y_hi, height - m, m)[0]
    parts = [f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}'>",
             f"<rect width='{width}' height='{height}' fill='white'/>",
             f"<line x1='{m}' y1='{height-m}' x2='{width-m}' y2='{height-m}' stroke='black'/>",
             f"<line x1='{m}' y1='{m}' x2='{m}' y2='{height-m}' stroke='black'/>"]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f"<text x='{sx(xv):.1f}' y='{height-m+18}' font-size='10' "
                     f"text-anchor='middle'>{xv:.3g}</text>")
        parts.append(f"<text x='{m-6}' y='{sy(yv):.1f}' font-size='10' "
                     f"text-anchor='end'>{yv:.3g}</text>")
    parts.append(f"<text x='{width/2}' y='{height-10}' font-size='12' "
                 f"text-anchor='middle'>{xlabel}</text>")
    parts.append(f"<text x='14' y='{height/2}' font-size='12' text-anchor='middle' "
                 f"transform='rotate(-90 14 {height/2})'>{ylabel}</text>")
    for x, y in points:
        parts.append(f"<circle cx='{sx(x):.1f}' cy='{sy(y):.1f}' r='3' "
                     f"fill='steelblue' fill-opacity='0.6'/>")
    ordered = sorted(highlight)
    if len(ordered) > 1:
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in ordered)
        parts.append(f"<polyline points='{path}' fill='none' stroke='crimson'/>")
    for x, y in ordered:
        parts.append(f"<circle cx='{sx(x):.1f}' cy='{sy(y):.1f}' r='4' fill='crimson'/>")
    parts.append("</svg>")
    return "\n".join(parts)


def svg_line(xs, ys, xlabel: str = "", ylabel: str = "", log_x: bool = False,
             width: int = 640, height: int = 480) -> str:
    """Single-series line plot for poisoning curves."""
    pts = [(math.log10(x) if log_x and x > 0 else x, y)
           for x, y in zip(xs, ys) if not (log_x and x <= 0)]
    return svg_scatter(pts, pts, xlabel=xlabel, ylabel=ylabel,
                       width=width, height=height)
