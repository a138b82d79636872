"""Experiment protocols: data, learned and optimal twisted filters, baselines."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy.special import logsumexp

from ..core import ResamplingPolicy, run_filter
from ..learning import LearnConfig, learn_twists, temper_schedule
from ..models.lgssm import (
    LgssmModel,
    LgssmParams,
    kalman_log_evidence,
    lgssm_optimal_twists,
    lgssm_simulate,
)
from ..models.sv import SvModel, SvParams, sv_partial_family, sv_simulate
from ..twisting import TwistSchedule, build_twisted_model

RECORD_COLUMNS = ("method", "rep", "seed", "N", "log_z", "kernel_sims", "learn_sims",
                  "mean_trials", "min_acceptance", "frac_steps_ok", "resample_count",
                  "status", "wall_ms")
WORKERS_ENV = "TWISTEDSMC_WORKERS"
_METHOD_IDS = {"bpf": 1, "tpf-learn": 2, "tpf-opt": 3, "bpf-s": 4, "bpf-c": 5}
_REFERENCE_STREAM = 10**6


def size_baselines(N, mean_trials, n_tilde, rejection_factor=3):
    """Memory- and compute-equivalent bootstrap filter sizes.

    ``N_compute = ceil(N (rejection_factor * R + 4 n_tilde))`` and
    ``N_memory = N + n_tilde``.
    """
    if mean_trials is None or not math.isfinite(mean_trials):
        raise ValueError("mean rejection trials R is required")
    return math.ceil(N * (rejection_factor * mean_trials + 4 * n_tilde)), N + n_tilde


# -- data --------------------------------------------------------------------

def lgssm_params(cfg):
    pr = dict(cfg.lgssm)
    if cfg.n is not None:
        pr["n"] = int(cfg.n)
    return LgssmParams.from_a(a=pr["a"], d=int(pr["d"]), n=int(pr["n"]), mu0=pr["mu0"],
                              sigma0_sq=pr["sigma0_sq"], sigmaM_sq=pr["sigmaM_sq"],
                              sigmaG_sq=pr["sigmaG_sq"])


def write_series(path, y, column="y"):
    """Observations as CSV: ``t`` then one column per coordinate."""
    y = np.asarray(y, dtype=float)
    y2 = y.reshape(len(y), -1)
    t0 = 0 if column == "y" else 1
    names = [column] if y2.shape[1] == 1 else [f"{column}{j + 1}" for j in range(y2.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names])
        for t, row in enumerate(y2):
            w.writerow([t + t0, *(repr(float(v)) for v in row)])


def read_series(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def simulate_data(model, params, seed, n=None, x0=None):
    """Simulated series for ``model`` from a parameter dict; returns the observations."""
    rng = np.random.default_rng(seed)
    if model == "lgssm":
        pr = dict(params)
        if n is not None:
            pr["n"] = n
        P = LgssmParams.from_a(a=pr["a"], d=int(pr["d"]), n=int(pr["n"]), mu0=pr["mu0"],
                               sigma0_sq=pr["sigma0_sq"], sigmaM_sq=pr["sigmaM_sq"],
                               sigmaG_sq=pr["sigmaG_sq"])
        return lgssm_simulate(P, rng)[1]
    pr = {k: params[k] for k in ("phi1", "phi2", "phi3", "sigma")}
    steps = int(n if n is not None else params.get("n", 2000))
    return sv_simulate(SvParams(**pr), steps, x0 if x0 is not None else params.get("x0"), rng)[1]


def build_model(cfg):
    """Base model for ``cfg`` with simulated or loaded observations."""
    n = cfg.horizon()
    if cfg.model == "lgssm":
        P = lgssm_params(cfg)
        if cfg.data:
            y = read_series(cfg.data)[: n + 1]
        else:
            y = simulate_data("lgssm", cfg.lgssm, cfg.data_seed, n=n)
        return LgssmModel(P.with_observations(y))
    if cfg.data:
        r = read_series(cfg.data).ravel()[:n]
    else:
        r = simulate_data("sv", cfg.sv_generate, cfg.data_seed, n=n, x0=cfg.x0)
    return SvModel(SvParams(**cfg.sv_filter, r=r))


def reference_log_z(cfg, model):
    """``(log Z, source)``: Kalman for the LGSSM, else the log-mean of high-N runs."""
    if cfg.model == "lgssm":
        return kalman_log_evidence(model.params), "kalman"
    policy = ResamplingPolicy("adaptive", cfg.kappa)
    vals = []
    for k in range(cfg.reference_reps):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _REFERENCE_STREAM, k]))
        vals.append(run_filter(model, cfg.reference_N, policy, rng, store_paths=False).log_z_hat)
    return float(logsumexp(vals) - math.log(len(vals))), f"bpf-{cfg.reference_N}"


# -- methods -----------------------------------------------------------------

def _twisted(cfg, model, schedule):
    if cfg.model == "sv":
        return build_twisted_model(model, schedule, m_estimator="proposal")
    return build_twisted_model(model, schedule)


def _learn_config(cfg, model):
    return LearnConfig(iterations=cfg.iterations, n_tilde=cfg.learn_n_tilde,
                       alpha_min=cfg.alpha_min, function_class=cfg.function_class,
                       ridge=cfg.ridge, floor=cfg.floor,
                       partial_family=sv_partial_family(model.params) if cfg.partial_twist else None)


def learn_schedule(cfg, model, rng):
    """Iterated learning from an untwisted run; returns ``(schedule, sims, reports)``."""
    policy = ResamplingPolicy("adaptive", cfg.kappa)
    lcfg = _learn_config(cfg, model)
    N0 = cfg.learn_particles
    schedule = TwistSchedule.unit(model.n, cfg.n_tilde)
    run = run_filter(model, N0, policy, rng)
    sims = run.kernel_sim_count
    reports = []
    for it in range(cfg.iterations):
        schedule = learn_twists(run, model, schedule, lcfg, rng, alpha_min=lcfg.alpha_for(it))
        schedule.n_tilde = cfg.n_tilde
        sims += 2 * N0 * model.n * lcfg.n_tilde + N0 * lcfg.n_tilde
        reports.append(schedule.report)
        if it < cfg.iterations - 1:
            run = run_filter(_twisted(cfg, model, schedule), N0, policy, rng)
            sims += run.kernel_sim_count
    return schedule, sims, reports


def optimal_schedule(cfg, model, rng):
    """Analytic optimal twists tempered to the final acceptance target (two sweeps)."""
    policy = ResamplingPolicy("adaptive", cfg.kappa)
    target = lgssm_optimal_twists(model.params)
    floor_log = math.log(cfg.floor) if cfg.floor > 0 else -np.inf
    schedule = TwistSchedule.unit(model.n, cfg.n_tilde)
    run = run_filter(model, cfg.N, policy, rng)
    sims = run.kernel_sim_count
    for sweep in range(2):
        schedule = temper_schedule(run, model, target, schedule, cfg.final_alpha,
                                   cfg.learn_n_tilde, floor_log, rng)
        schedule.n_tilde = cfg.n_tilde
        sims += (model.n + 1) * cfg.N * cfg.learn_n_tilde
        if sweep == 0:
            run = run_filter(_twisted(cfg, model, schedule), cfg.N, policy, rng)
            sims += run.kernel_sim_count
    return schedule, sims


def _record(method, rep, seed, N, run=None, learn_sims=0, alpha=None, status="ok", wall=0.0):
    rec = dict(method=method, rep=rep, seed=seed, N=N, log_z=float("nan"), kernel_sims=0,
               learn_sims=learn_sims, mean_trials=float("nan"), min_acceptance=float("nan"),
               frac_steps_ok=float("nan"), resample_count=0, status=status,
               wall_ms=round(1000.0 * wall, 3))
    if run is not None:
        rates = 1.0 / np.asarray(run.rejection_trials, dtype=float)
        rec.update(log_z=run.log_z_hat, kernel_sims=run.kernel_sim_count,
                   mean_trials=float(np.mean(run.rejection_trials)),
                   min_acceptance=float(rates.min()),
                   resample_count=run.resample_count)
        if alpha is not None:
            rec["frac_steps_ok"] = float(np.mean(rates >= 0.5 * alpha))
    return rec


def method_seed(master, rep, method):
    return int(np.random.SeedSequence([master, rep, _METHOD_IDS[method]]).generate_state(1)[0])


def run_repetition(cfg, model, rep):
    """All configured methods for one repetition; one record per method."""
    policy = ResamplingPolicy("adaptive", cfg.kappa)
    rejection_factor = cfg.iterations
    out = []
    learned_R = None
    order = [m for m in ("tpf-learn", "tpf-opt", "bpf", "bpf-s", "bpf-c") if m in cfg.methods]
    for method in order:
        seed = method_seed(cfg.seed, rep, method)
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        N = cfg.N
        try:
            if method == "tpf-learn":
                sched, lsims, _ = learn_schedule(cfg, model, rng)
                run = run_filter(_twisted(cfg, model, sched), N, policy, rng, store_paths=False)
                learned_R = float(np.mean(run.rejection_trials))
                rec = _record(method, rep, seed, N, run, lsims, cfg.final_alpha,
                              wall=time.perf_counter() - t0)
            elif method == "tpf-opt":
                sched, lsims = optimal_schedule(cfg, model, rng)
                run = run_filter(_twisted(cfg, model, sched), N, policy, rng, store_paths=False)
                rec = _record(method, rep, seed, N, run, lsims, cfg.final_alpha,
                              wall=time.perf_counter() - t0)
            else:
                if method == "bpf-s":
                    N = size_baselines(cfg.N, 1.0, cfg.n_tilde)[1]
                elif method == "bpf-c":
                    if learned_R is None:
                        raise ValueError("bpf-c needs a successful tpf-learn run in the same repetition")
                    N = size_baselines(cfg.N, learned_R, cfg.n_tilde, rejection_factor)[0]
                run = run_filter(model, N, policy, rng, store_paths=False)
                rec = _record(method, rep, seed, N, run, wall=time.perf_counter() - t0)
        except Exception as exc:  # recorded, the experiment carries on
            rec = _record(method, rep, seed, N, status=f"error: {type(exc).__name__}: {exc}",
                          wall=time.perf_counter() - t0)
        out.append(rec)
    return out


def _format(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records, include_wall=True):
    cols = RECORD_COLUMNS if include_wall else RECORD_COLUMNS[:-1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow([_format(r[c]) for c in cols])
    return buf.getvalue()


def read_records(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        r = dict(r)
        for k in ("rep", "seed", "N", "kernel_sims", "learn_sims", "resample_count"):
            r[k] = int(r[k])
        for k in ("log_z", "mean_trials", "min_acceptance", "frac_steps_ok", "wall_ms"):
            if k in r:
                r[k] = float(r[k])
        out.append(r)
    return out


def _worker(args):
    cfg, model, rep = args
    return run_repetition(cfg, model, rep)


def run_experiment(cfg, output=None, workers=None, progress=None):
    """Run every repetition and write the records CSV.

    Rows are appended per repetition in repetition order, so the file is a
    pure function of the configuration apart from ``wall_ms``.  ``workers``
    (or the ``TWISTEDSMC_WORKERS`` environment variable) sets a process pool.
    """
    output = output or cfg.output
    model = build_model(cfg)
    log_ref, source = reference_log_z(cfg, model)
    ref = dict(method="reference", rep=-1, seed=cfg.seed, N=0, log_z=log_ref, kernel_sims=0,
               learn_sims=0, mean_trials=float("nan"), min_acceptance=float("nan"),
               frac_steps_ok=float("nan"), resample_count=0, status=source, wall_ms=0.0)
    workers = workers if workers is not None else int(os.environ.get(WORKERS_ENV, "1") or 1)
    records = [ref]
    tmp = f"{output}.partial"
    with open(tmp, "w", newline="") as fh:
        fh.write(records_to_csv([ref]))
        jobs = [(cfg, model, rep) for rep in range(cfg.repetitions)]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                results = pool.map(_worker, jobs)
                for rep, recs in enumerate(results):
                    fh.write(records_to_csv(recs).split("\n", 1)[1])
                    fh.flush()
                    records.extend(recs)
                    if progress:
                        progress(rep, recs)
        else:
            for rep, job in enumerate(jobs):
                recs = _worker(job)
                fh.write(records_to_csv(recs).split("\n", 1)[1])
                fh.flush()
                records.extend(recs)
                if progress:
                    progress(rep, recs)
    os.replace(tmp, output)
    return records
