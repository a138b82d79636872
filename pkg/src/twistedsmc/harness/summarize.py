"""Summary tables from a records file.

Per method: MSE of ``log Z^N`` against the reference, MSE relative to a
baseline method, mean and 10%/90% quantiles of ``Z^N / Z`` and the median and
central 95% interval of the absolute log error.  A long-format table of
per-repetition errors is produced for plotting.
"""

from __future__ import annotations

import csv
import io
import math

import numpy as np

SUMMARY_COLUMNS = ("method", "reps", "failed", "mean_N", "mse", "rel_mse", "ratio_mean",
                   "ratio_q10", "ratio_q90", "abs_err_median", "abs_err_q025",
                   "abs_err_q975", "mean_trials", "mean_kernel_sims")
PLOT_COLUMNS = ("method", "rep", "error", "abs_error", "sign")


def quantile(values, q):
    """Linear-interpolation quantile on the sorted sample (positions ``q (n-1)``)."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample")
    pos = q * (v.size - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))


def reference_from_records(records, expected=None):
    refs = [r for r in records if r["method"] == "reference"]
    if not refs:
        raise ValueError("records carry no reference row")
    ref = refs[0]
    if expected is not None and ref["status"] != expected:
        raise ValueError(f"reference row is {ref['status']!r}, not {expected!r}")
    return float(ref["log_z"])


def summarize(records, reference_log_z, baseline="tpf-opt"):
    """Summary rows (list of dicts) in method order of first appearance."""
    rows = [r for r in records if r["method"] != "reference"]
    if not rows:
        raise ValueError("no records to summarise")
    methods = list(dict.fromkeys(r["method"] for r in rows))
    out = {}
    for m in methods:
        mine = [r for r in rows if r["method"] == m]
        ok = [r for r in mine if r["status"] == "ok" and math.isfinite(r["log_z"])]
        err = np.array([r["log_z"] - reference_log_z for r in ok])
        rec = dict(method=m, reps=len(ok), failed=len(mine) - len(ok))
        if ok:
            ratio = np.exp(err)
            rec.update(mean_N=float(np.mean([r["N"] for r in ok])),
                       mse=float(np.mean(err**2)), ratio_mean=float(ratio.mean()),
                       ratio_q10=quantile(ratio, 0.1), ratio_q90=quantile(ratio, 0.9),
                       abs_err_median=quantile(np.abs(err), 0.5),
                       abs_err_q025=quantile(np.abs(err), 0.025),
                       abs_err_q975=quantile(np.abs(err), 0.975),
                       mean_trials=float(np.mean([r["mean_trials"] for r in ok])),
                       mean_kernel_sims=float(np.mean([r["kernel_sims"] + r["learn_sims"]
                                                       for r in ok])))
        else:
            rec.update({k: float("nan") for k in SUMMARY_COLUMNS[3:]})
        out[m] = rec
    base = out.get(baseline, {}).get("mse", float("nan"))
    for rec in out.values():
        rec["rel_mse"] = rec["mse"] / base if base and math.isfinite(base) else float("nan")
    return list(out.values())


def plot_rows(records, reference_log_z):
    out = []
    for r in records:
        if r["method"] == "reference" or r["status"] != "ok":
            continue
        e = r["log_z"] - reference_log_z
        out.append(dict(method=r["method"], rep=r["rep"], error=e, abs_error=abs(e),
                        sign=int(np.sign(e))))
    return out


def to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()
