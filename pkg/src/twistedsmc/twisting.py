"""Twisting functions and twisted Feynman-Kac models.

A twisted model changes the kernels to ``M_p^psi`` and the potentials to
``G_p^psi`` while preserving the terminal updated measure.  Here the twisted
kernels are sampled by rejection (optionally from an analytically twisted
proposal ``M_p^rho``) and every integral ``M_p(psi_p)`` in the potentials is
replaced by an independent Monte Carlo average, which keeps the
normalising-constant estimate unbiased.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import FeynmanKacModel

DEFAULT_FLOOR = 5e-4
FALLBACK_MAX_TRIALS = 10**6


class RunawayRejectionError(RuntimeError):
    """A rejection sampler exceeded its trial cap (mis-normalised twist)."""

    def __init__(self, p, cap):
        self.p = p
        super().__init__(f"rejection sampler at time p={p} exceeded {cap} trials")


def _as_matrix(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(len(x), -1)


class TwistFunction:
    """A twisting function with temperature, shift and floor.

    The effective log value is ``clip(beta * log_raw(x) + shift, floor_log, 0)``
    so effective values always lie in ``[exp(floor_log), 1]``.
    """

    kind = "abstract"

    def __init__(self, beta=1.0, shift=0.0, floor_log=-np.inf):
        self.beta = float(beta)
        self.shift = float(shift)
        self.floor_log = float(floor_log)

    def log_raw(self, x):
        raise NotImplementedError

    def log_eval(self, x):
        v = self.beta * self.log_raw(x) + self.shift
        return np.clip(v, self.floor_log, 0.0)

    def __call__(self, x):
        return np.exp(self.log_eval(x))

    @property
    def floor(self):
        return math.exp(self.floor_log)

    def default_max_trials(self):
        if self.floor_log == -np.inf:
            return FALLBACK_MAX_TRIALS
        return 10 * math.ceil(1.0 / self.floor)

    def _copy_with(self, **kw):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.__dict__.update(kw)
        return new

    def tempered(self, beta, shift, floor_log=None):
        """Copy with new temperature and shift (and optionally floor)."""
        kw = {"beta": float(beta), "shift": float(shift)}
        if floor_log is not None:
            kw["floor_log"] = float(floor_log)
        return self._copy_with(**kw)

    def to_record(self):
        return {"kind": self.kind, "beta": self.beta, "shift": self.shift,
                "floor_log": self.floor_log}


class UnitTwist(TwistFunction):
    """``psi == 1``: the untwisted model."""

    kind = "unit"

    def log_raw(self, x):
        return np.zeros(len(x))


class ConstantTwist(TwistFunction):
    kind = "constant"

    def __init__(self, value, **kw):
        super().__init__(**kw)
        self.log_value = math.log(value)

    def log_raw(self, x):
        return np.full(len(x), self.log_value)

    def to_record(self):
        return {**super().to_record(), "c": self.log_value}


class ExpQuadraticTwist(TwistFunction):
    """``log psi(x) = x'Ax + b'x + c``.

    ``a`` may be a scalar (isotropic ``a * |x|^2``), a vector (diagonal) or a
    full symmetric matrix.
    """

    kind = "expquad"

    def __init__(self, a, b, c, **kw):
        super().__init__(**kw)
        a = np.asarray(a, dtype=float)
        if a.ndim == 2:
            a = 0.5 * (a + a.T)
        self.a = a
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        self.c = float(c)
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))
                and math.isfinite(self.c)):
            raise ValueError("exp-quadratic coefficients must be finite")

    @property
    def dim(self):
        return self.b.size

    def quadratic_matrix(self):
        d = self.dim
        if self.a.ndim == 0:
            return float(self.a) * np.eye(d)
        if self.a.ndim == 1:
            return np.diag(self.a)
        return self.a

    def log_raw(self, x):
        X = _as_matrix(x)
        if self.a.ndim == 0:
            quad = float(self.a) * np.einsum("ij,ij->i", X, X)
        elif self.a.ndim == 1:
            quad = (X * X) @ self.a
        else:
            quad = np.einsum("ij,jk,ik->i", X, self.a, X)
        return quad + X @ self.b + self.c

    def sup_log_raw(self):
        """Supremum of ``log_raw`` over R^d, or ``inf`` if unbounded."""
        Q = self.quadratic_matrix()
        eig = np.linalg.eigvalsh(Q)
        if np.all(eig < 0):
            return self.c - 0.25 * self.b @ np.linalg.solve(Q, self.b)
        if np.all(eig <= 0) and not np.any(self.b):
            return self.c
        return np.inf

    def normalized(self, beta=1.0, floor_log=-np.inf):
        """Tempered copy shifted so that its supremum over R^d is exactly 1."""
        s = self.sup_log_raw()
        if not np.isfinite(s):
            raise ValueError("exp-quadratic twist is unbounded; cannot normalise")
        return self.tempered(beta, -beta * s, floor_log)

    def to_record(self):
        return {**super().to_record(), "a": self.a.tolist(), "b": self.b.tolist(),
                "c": self.c}


class TabularTwist(TwistFunction):
    """Twist on a finite state space ``{0, ..., K-1}`` given by its log values."""

    kind = "tabular"

    def __init__(self, log_values, **kw):
        super().__init__(**kw)
        self.log_values = np.asarray(log_values, dtype=float)

    @classmethod
    def from_values(cls, values, **kw):
        return cls(np.log(np.asarray(values, dtype=float)), **kw)

    def log_raw(self, x):
        return self.log_values[np.asarray(x, dtype=np.intp)]

    def to_record(self):
        return {**super().to_record(), "a": self.log_values.tolist()}


class PotentialTwist(TwistFunction):
    """Twist equal to (a tempered, normalised) deterministic potential ``G_p``."""

    kind = "potential"

    def __init__(self, model, p, **kw):
        super().__init__(**kw)
        self.model = model
        self.p = int(p)

    def log_raw(self, x):
        return np.asarray(self.model.log_potential(self.p, x, None), dtype=float)

    def to_record(self):
        return {**super().to_record(), "p": self.p}


class Proposal:
    """An analytically twisted kernel ``M_p^rho`` used as rejection proposal.

    Implementations provide ``log_eval`` (``log rho``), exact sampling from
    ``M_p^rho`` and the exact log-mass ``log M_p(rho)(x_prev)``.
    """

    def log_eval(self, x):
        raise NotImplementedError

    def sample(self, p, x_prev, rng, size=None):
        raise NotImplementedError

    def log_mass(self, p, x_prev):
        raise NotImplementedError

    def to_record(self):
        return {}


@dataclass
class TwistSchedule:
    """Twisting functions ``psi_0:n`` with optional proposals ``rho_0:n``."""

    psi: list
    proposal_rho: list | None = None
    n_tilde: int = 1
    report: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.n_tilde < 1:
            raise ValueError("n_tilde must be at least 1")
        if self.proposal_rho is None:
            self.proposal_rho = [None] * len(self.psi)
        if len(self.proposal_rho) != len(self.psi):
            raise ValueError("proposal list must match the twist list in length")

    @property
    def n(self):
        return len(self.psi) - 1

    @classmethod
    def unit(cls, n, n_tilde=1):
        return cls([UnitTwist() for _ in range(n + 1)], n_tilde=n_tilde)


def _draw_proposals(p, x_prev, model, proposal, rng, size):
    if proposal is not None:
        return proposal.sample(p, x_prev, rng, size=size)
    if x_prev is None:
        return model.sample_initial(size, rng)
    return model.sample_kernel(p, x_prev, rng)


def rejection_sample(p, x_prev, model, twist, proposal=None, rng=None, *,
                     size=None, max_trials=None):
    """Sample ``M_p^omega(x_prev, .)`` exactly by rejection.

    Proposals come from ``M_p`` (or ``M_p^rho`` when ``proposal`` is given) and
    are accepted with probability ``omega / rho``.  ``x_prev`` is an array of
    previous states (one draw per row) or ``None`` at ``p = 0``, with ``size``
    draws.  Returns ``(states, trials)``.
    """
    rng = np.random.default_rng(rng)
    m = size if x_prev is None else len(x_prev)
    cap = max_trials or twist.default_max_trials()
    trials = np.zeros(m, dtype=np.int64)
    pending = np.arange(m)
    out = None
    chunk = 1
    while pending.size:
        rows = np.repeat(pending, chunk)
        src = None if x_prev is None else x_prev[rows]
        cand = _draw_proposals(p, src, model, proposal, rng, rows.size)
        log_ratio = twist.log_eval(cand)
        if proposal is not None:
            log_ratio = log_ratio - proposal.log_eval(cand)
            if np.any(log_ratio > 1e-9):
                raise ValueError(f"omega/rho exceeds 1 at time p={p}")
        accept = (np.log(rng.random(rows.size)) < log_ratio).reshape(pending.size, chunk)
        hit = accept.any(axis=1)
        first = accept.argmax(axis=1)
        trials[pending] += np.where(hit, first + 1, chunk)
        if out is None:
            out = np.empty((m,) + cand.shape[1:], dtype=cand.dtype)
        if hit.any():
            cand = cand.reshape((pending.size, chunk) + cand.shape[1:])
            out[pending[hit]] = cand[np.flatnonzero(hit), first[hit]]
        pending = pending[~hit]
        if pending.size and trials[pending].max() >= cap:
            raise RunawayRejectionError(p, cap)
        chunk = min(2 * chunk, 512)
    return out, trials


def estimate_m_psi(p, x, model, psi, n_tilde, rng=None, log=False):
    """Monte Carlo estimate ``n_tilde^-1 sum_j psi(U_j)``, ``U_j ~ M_p(x, .)``.

    ``x`` is an array of states (one estimate per row) or ``None`` at ``p = 0``
    (a single estimate from ``M_0``).
    """
    if n_tilde < 1:
        raise ValueError("n_tilde must be at least 1")
    rng = np.random.default_rng(rng)
    if x is None:
        u = model.sample_initial(n_tilde, rng)
        val = logsumexp(psi.log_eval(u)) - math.log(n_tilde)
    else:
        u = model.sample_kernel(p, np.repeat(x, n_tilde, axis=0), rng)
        lv = psi.log_eval(u).reshape(len(x), n_tilde)
        val = logsumexp(lv, axis=1) - math.log(n_tilde)
    return val if log else np.exp(val)


def _estimate_m_psi_via_proposal(p, x, psi, proposal, n_tilde, rng):
    # M(psi) = M(rho) * M^rho(psi / rho), with U_j ~ M^rho exactly
    if x is None:
        u = proposal.sample(0, None, rng, size=n_tilde)
        lv = psi.log_eval(u) - proposal.log_eval(u)
        return proposal.log_mass(0, None) + logsumexp(lv) - math.log(n_tilde)
    u = proposal.sample(p, np.repeat(x, n_tilde, axis=0), rng)
    lv = (psi.log_eval(u) - proposal.log_eval(u)).reshape(len(x), n_tilde)
    return proposal.log_mass(p, x) + logsumexp(lv, axis=1) - math.log(n_tilde)


class TwistedModel(FeynmanKacModel):
    """The ``psi``-twisted version of ``base`` with random-weight potentials.

    ``exact_m(p, x, twist)``, when given, returns the exact ``log M_p(psi)(x)``
    (``x`` is ``None`` at ``p = 0``) and replaces the Monte Carlo estimates.
    ``m_estimator="proposal"`` estimates ``M_p(psi)`` by importance sampling
    from ``M_p^rho`` wherever a proposal is available.
    """

    def __init__(self, base, schedule, exact_m=None, max_trials=None,
                 m_estimator="base"):
        if schedule.n != base.n:
            raise ValueError(f"schedule covers n={schedule.n}, model has n={base.n}")
        if m_estimator not in ("base", "proposal"):
            raise ValueError(f"unknown m_estimator {m_estimator!r}")
        self.base = base
        self.schedule = schedule
        self.n = base.n
        self.state_dim = base.state_dim
        self.exact_m = exact_m
        self.max_trials = max_trials
        self.m_estimator = m_estimator

    def sample_initial(self, size, rng):
        return self.draw_initial(size, rng)[0]

    def sample_kernel(self, p, x, rng):
        return self.draw_kernel(p, x, rng)[0]

    def draw_initial(self, size, rng):
        s = self.schedule
        return rejection_sample(0, None, self.base, s.psi[0], s.proposal_rho[0],
                                rng, size=size, max_trials=self.max_trials)

    def draw_kernel(self, p, x, rng):
        s = self.schedule
        return rejection_sample(p, x, self.base, s.psi[p], s.proposal_rho[p],
                                rng, max_trials=self.max_trials)

    def _log_m(self, p, x, rng):
        psi = self.schedule.psi[p]
        if self.exact_m is not None:
            return self.exact_m(p, x, psi)
        rho = self.schedule.proposal_rho[p]
        if self.m_estimator == "proposal" and rho is not None:
            return _estimate_m_psi_via_proposal(p, x, psi, rho, self.schedule.n_tilde, rng)
        return estimate_m_psi(p, x, self.base, psi, self.schedule.n_tilde, rng, log=True)

    def log_potential(self, p, x, rng):
        rng = np.random.default_rng(rng) if rng is None else rng
        out = np.asarray(self.base.log_potential(p, x, rng), dtype=float)
        out = out - self.schedule.psi[p].log_eval(x)
        if p < self.n:
            out = out + self._log_m(p + 1, x, rng)
        if p == 0:
            out = out + self._log_m(0, None, rng)
        return out

    def potential_cost(self, p, size):
        if self.exact_m is not None:
            return 0
        k = self.schedule.n_tilde
        return k * size * (p < self.n) + k * (p == 0)


def build_twisted_model(base, schedule, exact_m=None, max_trials=None,
                        m_estimator="base"):
    """Twisted model whose kernels use rejection and potentials use MC integrals."""
    return TwistedModel(base, schedule, exact_m=exact_m, max_trials=max_trials,
                        m_estimator=m_estimator)


def acceptance_trace(run):
    """Per-time mean rejection trials and empirical acceptance rates."""
    trials = np.asarray(run.rejection_trials, dtype=float)
    return trials, 1.0 / trials


# -- serialisation -----------------------------------------------------------

def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(e) for e in list(v)) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def schedule_to_toml(schedule):
    """Text document with one ``[[twist]]`` block per time index."""
    lines = [f"n_tilde = {schedule.n_tilde}", ""]
    for p, (psi, rho) in enumerate(zip(schedule.psi, schedule.proposal_rho)):
        rec = {"p": p, **psi.to_record()}
        rec["rho_b"] = rho.to_record().get("b", float("nan")) if rho is not None else float("nan")
        lines.append("[[twist]]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in rec.items())
        lines.append("")
    return "\n".join(lines)


def save_schedule(schedule, path):
    with open(path, "w") as fh:
        fh.write(schedule_to_toml(schedule))


_LOADERS = {}


def register_twist_kind(kind, loader):
    """Register ``loader(record, model) -> (twist, proposal)`` for ``kind``."""
    _LOADERS[kind] = loader


def _common(rec):
    return {"beta": rec["beta"], "shift": rec["shift"], "floor_log": rec["floor_log"]}


register_twist_kind("unit", lambda r, m: (UnitTwist(**_common(r)), None))
register_twist_kind("constant", lambda r, m: (ConstantTwist(math.exp(r["c"]), **_common(r)), None))
register_twist_kind("expquad", lambda r, m: (ExpQuadraticTwist(r["a"], r["b"], r["c"], **_common(r)), None))
register_twist_kind("tabular", lambda r, m: (TabularTwist(r["a"], **_common(r)), None))
register_twist_kind("potential", lambda r, m: (PotentialTwist(m, r["p"], **_common(r)), None))


def schedule_from_toml(text, model=None):
    from ._compat import tomllib

    doc = tomllib.loads(text)
    psi, rho = [], []
    for rec in sorted(doc["twist"], key=lambda r: r["p"]):
        kind = rec["kind"]
        if kind not in _LOADERS:
            raise ValueError(f"unknown twist kind {kind!r}")
        t, r = _LOADERS[kind](rec, model)
        psi.append(t)
        rho.append(r)
    return TwistSchedule(psi, rho, n_tilde=int(doc.get("n_tilde", 1)))


def load_schedule(path, model=None):
    with open(path) as fh:
        return schedule_from_toml(fh.read(), model)
