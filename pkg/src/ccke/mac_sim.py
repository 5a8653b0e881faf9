"""Frame-level uplink multi-access simulator with scheduler selection.

One scheduling frame serves K user queues over F resource blocks.  The
context is the pair (initial backlogs, CQIs); the logged app is either
round-robin (RR) or proportional fair channel aware (PFCA) scheduling;
the KPI vector is the per-user backlog remaining at frame end.

The controller picks RR with a logistic probability driven by a cheap
analytic estimate of RR's worst residual backlog, so app selection is
context dependent and induces the covariate shift the calibration layer
has to absorb.  All randomness flows through explicit generator handles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conformal import ContractViolationError

__all__ = [
    "RR",
    "PFCA",
    "MAC_APPS",
    "CQI_EFFICIENCY",
    "MacContext",
    "MacPolicy",
    "FrameConfig",
    "default_payload_table",
    "generate_context",
    "estimate_rr_residual",
    "select_app",
    "run_frame",
    "write_mac_dataset",
    "read_mac_dataset",
]

RR = "RR"
PFCA = "PFCA"
MAC_APPS = (RR, PFCA)

# Spectral efficiency (bits/symbol) per CQI index 1..15, TS 36.213 Rel-11
# Table 7.2.3-1.  Transcribed, not invented.
CQI_EFFICIENCY = np.array([
    0.1523, 0.2344, 0.3770, 0.6016, 0.8770,
    1.1758, 1.4766, 1.9141, 2.4063, 2.7305,
    3.3223, 3.9023, 4.5234, 5.1152, 5.5547,
])

BACKLOG_MIN = 10
BACKLOG_MAX = 100


@dataclass(frozen=True)
class MacContext:
    """Initial per-user packet backlogs and CQI indices (1..15)."""

    initial_backlogs: np.ndarray
    cqis: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.initial_backlogs, dtype=np.int64))
        c = np.atleast_1d(np.asarray(self.cqis, dtype=np.int64))
        if b.shape != c.shape or b.ndim != 1 or b.size < 1:
            raise ContractViolationError("backlogs and CQIs must be equal-length vectors")
        if np.any(b < 0):
            raise ContractViolationError("backlogs must be nonnegative")
        if np.any((c < 1) | (c > 15)):
            raise ContractViolationError("CQIs must lie in 1..15")
        object.__setattr__(self, "initial_backlogs", b)
        object.__setattr__(self, "cqis", c)

    @property
    def n_users(self) -> int:
        return self.initial_backlogs.size

    def features(self) -> np.ndarray:
        """2 x K token matrix (backlog, CQI) fed to the quantile model."""
        return np.stack([self.initial_backlogs, self.cqis]).astype(float)


def default_payload_table(
    n_users: int,
    packets_per_efficiency: float = 3.0,
    sign_balance: float = 0.35,
) -> np.ndarray:
    """Expected full-frame payload g(c) in packets per CQI index.

    Per-user payload share is affine in spectral efficiency,
    ``g(c)/K = base + packets_per_efficiency * eff(c)``, with the base
    solved so that the RR residual-backlog estimate is negative for
    roughly ``sign_balance`` of random contexts at this K.  Keeping both
    signs populated at O(10) magnitudes is what makes every selection
    temperature usable: sharper temperatures still log both apps, and
    large temperatures genuinely approach context-free selection.
    """
    if n_users < 1:
        raise ContractViolationError("n_users must be >= 1")
    if packets_per_efficiency < 0.0:
        raise ContractViolationError("packets_per_efficiency must be >= 0")
    target_single = sign_balance ** (1.0 / n_users)
    n_levels = BACKLOG_MAX - BACKLOG_MIN + 1

    def below_fraction(base):
        thresholds = base + packets_per_efficiency * CQI_EFFICIENCY
        counts = np.clip(np.floor(thresholds) - BACKLOG_MIN + 1, 0, n_levels)
        return float(np.mean(counts / n_levels))

    lo, hi = 0.0, BACKLOG_MAX + packets_per_efficiency * CQI_EFFICIENCY[-1]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if below_fraction(mid) < target_single:
            lo = mid
        else:
            hi = mid
    base = 0.5 * (lo + hi)
    return n_users * (base + packets_per_efficiency * CQI_EFFICIENCY)


@dataclass(frozen=True)
class MacPolicy:
    """Logistic scheduler-selection policy.

    ``payload_table[c-1]`` maps CQI c to the expected payload if the
    whole frame served one user; the temperature controls how sharply
    the RR-residual estimate drives the choice.
    """

    temperature: float
    payload_table: np.ndarray

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ContractViolationError("temperature must be positive")
        g = np.asarray(self.payload_table, dtype=float)
        if g.shape != (15,):
            raise ContractViolationError("payload_table must have 15 CQI entries")
        if np.any(np.diff(g) < 0.0):
            raise ContractViolationError("payload must be nondecreasing in CQI")
        object.__setattr__(self, "payload_table", g)

    @classmethod
    def default(cls, n_users: int, temperature: float,
                packets_per_efficiency: float = 3.0,
                sign_balance: float = 0.35) -> "MacPolicy":
        return cls(temperature=temperature,
                   payload_table=default_payload_table(
                       n_users, packets_per_efficiency, sign_balance))

    def payload(self, cqis) -> np.ndarray:
        return self.payload_table[np.asarray(cqis, dtype=np.int64) - 1]

    def prob_rr(self, ctx: MacContext) -> float:
        """p(RR | x) = logistic(-residual_estimate / T), computed stably."""
        z = -estimate_rr_residual(ctx, self) / self.temperature
        if z >= 0.0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)

    def app_probability(self, ctx: MacContext, app: str) -> float:
        p_rr = self.prob_rr(ctx)
        if app == RR:
            return p_rr
        if app == PFCA:
            return 1.0 - p_rr
        raise ContractViolationError(f"unknown app {app!r}")

    def weight(self, ctx: MacContext, numer_app: str, denom_app: str) -> float:
        """Density ratio p(numer|x)/p(denom|x), computed in log space.

        For the logistic pair the ratio is exactly exp(+-residual/T);
        the exponent is clipped to keep the result finite.
        """
        for app in (numer_app, denom_app):
            if app not in MAC_APPS:
                raise ContractViolationError(f"unknown app {app!r}")
        if numer_app == denom_app:
            return 1.0
        z = estimate_rr_residual(ctx, self) / self.temperature
        if numer_app == RR:
            z = -z
        return math.exp(min(max(z, -700.0), 700.0))


@dataclass(frozen=True)
class FrameConfig:
    """Frame dynamics: F resource blocks and a per-RB success probability."""

    resource_blocks: int = 50
    per_rb_success_prob: Callable[[int], float] = None
    pfca_smoothing: float = 0.1
    pfca_floor: float = 1e-6

    def __post_init__(self):
        if self.resource_blocks < 1:
            raise ContractViolationError("resource_blocks must be >= 1")
        if self.per_rb_success_prob is None:
            object.__setattr__(self, "per_rb_success_prob", default_rb_success_prob)


def default_rb_success_prob(cqi: int) -> float:
    return 0.9 + 0.1 * (cqi - 1) / 14.0


def generate_context(n_users: int, rng: np.random.Generator,
                     backlog_range=(BACKLOG_MIN, BACKLOG_MAX)) -> MacContext:
    """Backlogs i.i.d. uniform integers over ``backlog_range``; CQIs
    i.i.d. uniform over 1..15."""
    if n_users < 1:
        raise ContractViolationError("n_users must be >= 1")
    lo, hi = backlog_range
    return MacContext(
        initial_backlogs=rng.integers(lo, hi + 1, size=n_users),
        cqis=rng.integers(1, 16, size=n_users),
    )


def estimate_rr_residual(ctx: MacContext, policy: MacPolicy) -> float:
    """Worst-case analytic residual backlog if RR served this frame:
    max_k (b_k - g(c_k)/K)."""
    share = policy.payload(ctx.cqis) / ctx.n_users
    return float(np.max(ctx.initial_backlogs - share))


def select_app(ctx: MacContext, policy: MacPolicy, rng: np.random.Generator) -> str:
    return RR if rng.random() < policy.prob_rr(ctx) else PFCA


def run_frame(app: str, ctx: MacContext, policy: MacPolicy,
              frame_cfg: FrameConfig, rng: np.random.Generator) -> np.ndarray:
    """Simulate one scheduling frame; returns the final backlog vector.

    Each scheduled RB drains ``round(g(c)/F)`` packets from the chosen
    user with probability ``per_rb_success_prob(c)`` (zero otherwise),
    never below an empty queue.  RR hands RBs out cyclically in user
    order; PFCA gives each RB to the backlogged user with the largest
    expected-rate / smoothed-throughput ratio.
    """
    if app not in MAC_APPS:
        raise ContractViolationError(f"unknown app {app!r}")
    n = ctx.n_users
    f = frame_cfg.resource_blocks
    if f < n:
        raise ContractViolationError(f"{f} RBs cannot serve {n} users round-robin")
    backlog = ctx.initial_backlogs.astype(np.int64).copy()
    quanta = np.rint(policy.payload(ctx.cqis) / f).astype(np.int64)
    success_p = np.array([frame_cfg.per_rb_success_prob(int(c)) for c in ctx.cqis])
    if app == RR:
        # drains never depend on other users, so the cyclic allocation
        # collapses to counting each user's successful RBs (one batched
        # draw consumes the stream exactly like per-RB draws)
        users = np.arange(f) % n
        hits = rng.random(f) < success_p[users]
        successes = np.bincount(users[hits], minlength=n)
        return np.maximum(backlog - quanta * successes, 0)
    # PFCA
    rate = quanta * success_p
    avg = np.zeros(n)
    beta = frame_cfg.pfca_smoothing
    for _ in range(f):
        eligible = backlog > 0
        if not eligible.any():
            break
        metric = np.where(eligible, rate / np.maximum(avg, frame_cfg.pfca_floor), -np.inf)
        u = int(np.argmax(metric))
        drained = min(quanta[u], backlog[u]) if rng.random() < success_p[u] else 0
        backlog[u] -= drained
        served = np.zeros(n)
        served[u] = drained
        avg = (1.0 - beta) * avg + beta * served
    return backlog


# ---------------------------------------------------------------------------
# logged dataset io


def write_mac_dataset(path, samples: Sequence) -> None:
    """One row per (context, app, final backlogs) sample, fully headered."""
    if not samples:
        raise ContractViolationError("nothing to write")
    k = samples[0][0].n_users
    header = ([f"b_in_{i+1}" for i in range(k)] + [f"cqi_{i+1}" for i in range(k)]
              + ["app"] + [f"b_fin_{i+1}" for i in range(k)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ctx, app, kpi in samples:
            writer.writerow([*ctx.initial_backlogs.tolist(), *ctx.cqis.tolist(),
                             app, *np.asarray(kpi, dtype=np.int64).tolist()])


def read_mac_dataset(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = sum(1 for h in header if h.startswith("b_in_"))
        samples = []
        for row in reader:
            ctx = MacContext(initial_backlogs=np.array(row[:k], dtype=np.int64),
                             cqis=np.array(row[k:2 * k], dtype=np.int64))
            app = row[2 * k]
            kpi = np.array(row[2 * k + 1:], dtype=np.int64)
            samples.append((ctx, app, kpi))
    return samples
