"""2x2 MIMO link simulator with space-time scheme selection and ARQ.

The context is (average SNR in dB, number of multipath components m).
A transmission app pairs a space-time code (Alamouti or per-antenna
multiplexing) with a constellation (BPSK or QPSK).  The KPI is the ARQ
latency: transmission attempts until the first error-free packet, capped
at the retransmission limit.

The controller selects apps through a softmax over inverse symbol error
rates; the SER estimates come from a Monte-Carlo table built once on a
(1 dB SNR bin) x (m) grid and persisted as delimited text.  Receivers
assume perfect CSI: orthogonal combining for Alamouti, zero-forcing via
pseudo-inverse for multiplexing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conformal import ContractViolationError

__all__ = [
    "ALAMOUTI",
    "MULTIPLEXING",
    "BPSK",
    "QPSK",
    "PHY_APPS",
    "TransmissionApp",
    "PhyContext",
    "ChannelRealization",
    "ArqConfig",
    "SerTable",
    "PhyPolicy",
    "ConfigurationError",
    "sample_context",
    "sample_contexts",
    "build_channel",
    "transmit_arq",
    "estimate_ser",
    "select_app",
    "write_phy_dataset",
    "read_phy_dataset",
]


class ConfigurationError(RuntimeError):
    """A required lookup table entry or configuration value is missing."""


ALAMOUTI = "alamouti"
MULTIPLEXING = "multiplexing"
BPSK = "bpsk"
QPSK = "qpsk"

SNR_DB_MIN = -5.0
SNR_DB_MAX = 15.0
SNR_DB_MEAN = 5.0
SNR_DB_SIGMA = 5.0
PATHS_MAX = 10
ANTENNA_SEPARATION = 0.5
SER_CLAMP = 1e-6

_CONSTELLATIONS = {
    BPSK: np.array([1.0 + 0.0j, -1.0 + 0.0j]),
    QPSK: np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / math.sqrt(2.0),
}


@dataclass(frozen=True)
class TransmissionApp:
    code: str
    constellation: str

    def __post_init__(self):
        if self.code not in (ALAMOUTI, MULTIPLEXING):
            raise ContractViolationError(f"unknown space-time code {self.code!r}")
        if self.constellation not in (BPSK, QPSK):
            raise ContractViolationError(f"unknown constellation {self.constellation!r}")

    @property
    def key(self) -> str:
        return f"{self.code}_{self.constellation}"

    @classmethod
    def from_key(cls, key: str) -> "TransmissionApp":
        code, _, constellation = key.partition("_")
        return cls(code=code, constellation=constellation)


PHY_APPS = (
    TransmissionApp(ALAMOUTI, BPSK),
    TransmissionApp(ALAMOUTI, QPSK),
    TransmissionApp(MULTIPLEXING, BPSK),
    TransmissionApp(MULTIPLEXING, QPSK),
)


@dataclass(frozen=True)
class PhyContext:
    """Average SNR in dB (nominally -5..15) and multipath count m in 1..10."""

    snr_db: float
    paths: int

    def features(self) -> np.ndarray:
        return np.array([self.snr_db, float(self.paths)])


@dataclass(frozen=True)
class ChannelRealization:
    matrix: np.ndarray  # 2x2 complex


@dataclass(frozen=True)
class ArqConfig:
    max_retx: int = 10
    symbols_per_packet: int = 8

    def __post_init__(self):
        if self.max_retx < 1 or self.symbols_per_packet < 1:
            raise ContractViolationError("max_retx and symbols_per_packet must be >= 1")
        if self.symbols_per_packet % 2 != 0:
            raise ContractViolationError("symbols_per_packet must be even (2 symbols per block)")


def sample_context(rng: np.random.Generator) -> PhyContext:
    """SNR from a rejection-sampled truncated Gaussian, m uniform on 1..10."""
    while True:
        snr = rng.normal(SNR_DB_MEAN, SNR_DB_SIGMA)
        if SNR_DB_MIN <= snr <= SNR_DB_MAX:
            break
    return PhyContext(snr_db=float(snr), paths=int(rng.integers(1, PATHS_MAX + 1)))


def sample_contexts(n: int, rng: np.random.Generator):
    """Vectorized batch of i.i.d. contexts; (snr_db, paths) arrays."""
    snrs = np.empty(n)
    filled = 0
    while filled < n:
        draw = rng.normal(SNR_DB_MEAN, SNR_DB_SIGMA, size=2 * (n - filled) + 16)
        keep = draw[(draw >= SNR_DB_MIN) & (draw <= SNR_DB_MAX)][: n - filled]
        snrs[filled : filled + keep.size] = keep
        filled += keep.size
    paths = rng.integers(1, PATHS_MAX + 1, size=n)
    return snrs, paths


def snr_bin_masses(snr_lo: float, bin_width: float, n_bins: int) -> np.ndarray:
    """Context-law probability of each SNR bin under the truncated Gaussian."""
    from scipy.stats import norm

    edges = snr_lo + bin_width * np.arange(n_bins + 1)
    cdf = norm.cdf((edges - SNR_DB_MEAN) / SNR_DB_SIGMA)
    masses = np.diff(cdf)
    return masses / masses.sum()


def _steering(phi: np.ndarray) -> np.ndarray:
    """Two-element array response; unit norm.  phi shape (...,) -> (..., 2)."""
    second = np.exp(-2j * math.pi * ANTENNA_SEPARATION * np.cos(phi))
    return np.stack([np.ones_like(second), second], axis=-1) / math.sqrt(2.0)


def _channel_batch(snr_db: float, paths: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. channel draws, shape (n, 2, 2)."""
    snr_lin = 10.0 ** (snr_db / 10.0)
    # per-component variance 1/m, so E|a_i|^2 = 2/m and E||H||_F^2 = 2*SNR
    gains = (rng.standard_normal((n, paths)) + 1j * rng.standard_normal((n, paths)))
    gains /= math.sqrt(paths)
    phi_r = rng.uniform(0.0, 2.0 * math.pi, size=(n, paths))
    phi_t = rng.uniform(0.0, 2.0 * math.pi, size=(n, paths))
    e_r = _steering(phi_r)  # (n, m, 2)
    e_t = _steering(phi_t)
    h = np.einsum("nm,nmi,nmj->nij", gains, e_r, np.conj(e_t))
    return math.sqrt(snr_lin) * h


def build_channel(ctx: PhyContext, rng: np.random.Generator) -> ChannelRealization:
    """One multipath realization: sqrt(SNR) * sum_i a_i e_r(phi_r) e_t(phi_t)^H."""
    return ChannelRealization(matrix=_channel_batch(ctx.snr_db, ctx.paths, 1, rng)[0])


# ---------------------------------------------------------------------------
# modulation and detection (batched over blocks of 2 symbols)


def _draw_noise(shape, rng, noise_std):
    if noise_std == 0.0:
        return np.zeros(shape, dtype=complex)
    scale = noise_std / math.sqrt(2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _decode_nearest(estimates, constellation):
    d = np.abs(estimates[..., None] - constellation)
    return np.argmin(d, axis=-1)


def _alamouti_block(h, s, rng, noise_std):
    """(n,2,2) channels x (n,2) symbol values -> (n,2) soft estimates."""
    tx1 = s / math.sqrt(2.0)
    tx2 = np.stack([-np.conj(s[:, 1]), np.conj(s[:, 0])], axis=1) / math.sqrt(2.0)
    r1 = np.einsum("nij,nj->ni", h, tx1) + _draw_noise(s.shape, rng, noise_std)
    r2 = np.einsum("nij,nj->ni", h, tx2) + _draw_noise(s.shape, rng, noise_std)
    h1, h2 = h[:, :, 0], h[:, :, 1]
    z1 = np.sum(np.conj(h1) * r1, axis=1) + np.conj(np.sum(np.conj(h2) * r2, axis=1))
    z2 = np.sum(np.conj(h2) * r1, axis=1) - np.conj(np.sum(np.conj(h1) * r2, axis=1))
    gain = np.sum(np.abs(h) ** 2, axis=(1, 2))
    gain = np.where(gain > 0.0, gain, np.inf)  # dead channel decodes arbitrarily
    return math.sqrt(2.0) * np.stack([z1, z2], axis=1) / gain[:, None]


def _multiplexing_block(h, s, rng, noise_std):
    """One slot, one independent symbol per antenna, zero-forcing receive."""
    r = np.einsum("nij,nj->ni", h, s / math.sqrt(2.0)) + _draw_noise(s.shape, rng, noise_std)
    h_inv = np.linalg.pinv(h)
    return math.sqrt(2.0) * np.einsum("nij,nj->ni", h_inv, r)


def _send_blocks(app: TransmissionApp, h, sym_idx, rng, noise_std=1.0):
    """Decode symbol-index pairs through batched channels; returns indices."""
    constellation = _CONSTELLATIONS[app.constellation]
    s = constellation[sym_idx]
    if app.code == ALAMOUTI:
        est = _alamouti_block(h, s, rng, noise_std)
    else:
        est = _multiplexing_block(h, s, rng, noise_std)
    return _decode_nearest(est, constellation)


def transmit_arq(app: TransmissionApp, ctx: PhyContext, arq: ArqConfig,
                 rng: np.random.Generator, noise_std: float = 1.0) -> int:
    """ARQ latency KPI: attempts until one packet decodes error free.

    Every attempt rides a fresh channel realization and carries
    ``symbols_per_packet`` random symbols; the count is capped at
    ``max_retx`` (persistent failure saturates the KPI).
    """
    constellation = _CONSTELLATIONS[app.constellation]
    blocks = arq.symbols_per_packet // 2
    for attempt in range(1, arq.max_retx + 1):
        h = _channel_batch(ctx.snr_db, ctx.paths, 1, rng)
        hb = np.repeat(h, blocks, axis=0)
        sym = rng.integers(0, constellation.size, size=(blocks, 2))
        decoded = _send_blocks(app, hb, sym, rng, noise_std)
        if np.array_equal(decoded, sym):
            return attempt
    return arq.max_retx


# ---------------------------------------------------------------------------
# Monte-Carlo SER table


def estimate_ser(app: TransmissionApp, snr_db: float, paths: int,
                 rng: np.random.Generator, n_symbols: int = 10_000) -> float:
    """Symbol-error frequency over fresh channels, clamped into (0, 1).

    One channel draw per 2-symbol block; the clamp keeps the softmax
    selection's exp(1/(ser*T)) finite on error-free cells.
    """
    constellation = _CONSTELLATIONS[app.constellation]
    blocks = n_symbols // 2
    h = _channel_batch(snr_db, paths, blocks, rng)
    sym = rng.integers(0, constellation.size, size=(blocks, 2))
    decoded = _send_blocks(app, h, sym, rng)
    ser = np.mean(decoded != sym)
    return float(np.clip(ser, SER_CLAMP, 1.0 - SER_CLAMP))


@dataclass(frozen=True)
class SerTable:
    """Dense SER grid: apps x 1-dB SNR bins x path counts.

    Cells are estimated at bin centers with a per-cell seeded stream, so
    the table is reproducible and independent of build order.
    """

    values: np.ndarray  # (n_apps, n_bins, PATHS_MAX)
    snr_lo: float
    bin_width: float
    n_mc: int
    seed: int

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def bin_index(self, snr_db: float) -> int:
        idx = int(math.floor((snr_db - self.snr_lo) / self.bin_width))
        return min(max(idx, 0), self.n_bins - 1)

    def lookup(self, app: TransmissionApp, snr_db: float, paths: int) -> float:
        try:
            a = PHY_APPS.index(app)
        except ValueError:
            raise ConfigurationError(f"SER table has no app {app!r}")
        if not 1 <= paths <= self.values.shape[2]:
            raise ConfigurationError(f"SER table has no entry for m={paths}")
        v = self.values[a, self.bin_index(snr_db), paths - 1]
        if not np.isfinite(v):
            raise ConfigurationError(
                f"SER table cell ({app.key}, snr={snr_db}, m={paths}) is unset"
            )
        return float(v)

    @classmethod
    def build(cls, n_mc: int = 10_000, seed: int = 20139,
              snr_lo: float = SNR_DB_MIN, snr_hi: float = SNR_DB_MAX,
              bin_width: float = 1.0) -> "SerTable":
        n_bins = int(round((snr_hi - snr_lo) / bin_width))
        values = np.full((len(PHY_APPS), n_bins, PATHS_MAX), np.nan)
        for a, app in enumerate(PHY_APPS):
            for b in range(n_bins):
                center = snr_lo + (b + 0.5) * bin_width
                for m in range(1, PATHS_MAX + 1):
                    rng = np.random.Generator(np.random.PCG64(
                        np.random.SeedSequence([seed, a, b, m])))
                    values[a, b, m - 1] = estimate_ser(app, center, m, rng, n_mc)
        return cls(values=values, snr_lo=snr_lo, bin_width=bin_width, n_mc=n_mc, seed=seed)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["app", "snr_bin_low_db", "m", "ser", "n_mc", "seed"])
            for a, app in enumerate(PHY_APPS):
                for b in range(self.n_bins):
                    low = self.snr_lo + b * self.bin_width
                    for m in range(1, PATHS_MAX + 1):
                        writer.writerow([app.key, repr(low), m,
                                         repr(float(self.values[a, b, m - 1])),
                                         self.n_mc, self.seed])

    @classmethod
    def load(cls, path) -> "SerTable":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                rows.append(row)
        if not rows:
            raise ConfigurationError(f"empty SER table file {path}")
        lows = sorted({float(r[1]) for r in rows})
        snr_lo = lows[0]
        bin_width = lows[1] - lows[0] if len(lows) > 1 else 1.0
        n_bins = len(lows)
        values = np.full((len(PHY_APPS), n_bins, PATHS_MAX), np.nan)
        n_mc, seed = int(rows[0][4]), int(rows[0][5])
        keys = [app.key for app in PHY_APPS]
        for app_key, low, m, ser, _, _ in rows:
            a = keys.index(app_key)
            b = int(round((float(low) - snr_lo) / bin_width))
            values[a, b, int(m) - 1] = float(ser)
        return cls(values=values, snr_lo=snr_lo, bin_width=bin_width, n_mc=n_mc, seed=seed)


# ---------------------------------------------------------------------------
# app selection policy


@dataclass(frozen=True)
class PhyPolicy:
    """Softmax selection over inverse SER: p(a|x) prop. to exp(1/(ser*T))."""

    temperature: float
    ser_table: SerTable

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ContractViolationError("temperature must be positive")

    def _utilities(self, ctx: PhyContext) -> np.ndarray:
        return np.array([
            1.0 / (self.ser_table.lookup(app, ctx.snr_db, ctx.paths) * self.temperature)
            for app in PHY_APPS
        ])

    def app_probabilities(self, ctx: PhyContext) -> np.ndarray:
        """All four selection probabilities (normalized softmax; the sum
        is 1 to floating-point roundoff)."""
        u = self._utilities(ctx)
        e = np.exp(u - u.max())
        return e / e.sum()

    def app_probability(self, ctx: PhyContext, app: TransmissionApp) -> float:
        return float(self.app_probabilities(ctx)[PHY_APPS.index(app)])

    def weight(self, ctx: PhyContext, numer_app: TransmissionApp,
               denom_app: TransmissionApp) -> float:
        """Density ratio p(numer|x)/p(denom|x) in log space (clipped finite)."""
        if numer_app == denom_app:
            return 1.0
        u = self._utilities(ctx)
        z = u[PHY_APPS.index(numer_app)] - u[PHY_APPS.index(denom_app)]
        return math.exp(min(max(z, -700.0), 700.0))

    def batch_probabilities(self, snr_db: np.ndarray, paths: np.ndarray) -> np.ndarray:
        """(n, 4) selection probabilities for vectorized context batches."""
        bins = np.clip(np.floor((snr_db - self.ser_table.snr_lo)
                                / self.ser_table.bin_width).astype(int),
                       0, self.ser_table.n_bins - 1)
        sers = self.ser_table.values[:, bins, np.asarray(paths) - 1]  # (4, n)
        u = 1.0 / (sers * self.temperature)
        e = np.exp(u - u.max(axis=0, keepdims=True))
        return (e / e.sum(axis=0, keepdims=True)).T


def select_app(ctx: PhyContext, policy: PhyPolicy, rng: np.random.Generator) -> TransmissionApp:
    p = policy.app_probabilities(ctx)
    return PHY_APPS[int(rng.choice(len(PHY_APPS), p=p))]


# ---------------------------------------------------------------------------
# logged dataset io


def write_phy_dataset(path, samples: Sequence) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["snr_db", "m", "app_code", "app_constellation", "y"])
        for ctx, app, y in samples:
            writer.writerow([repr(ctx.snr_db), ctx.paths, app.code, app.constellation, int(y)])


def read_phy_dataset(path):
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for snr, m, code, constellation, y in reader:
            samples.append((PhyContext(snr_db=float(snr), paths=int(m)),
                            TransmissionApp(code, constellation), int(y)))
    return samples
