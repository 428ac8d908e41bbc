"""Quantum-jump photon records, detection-chain thinning and pulsed g2.

Shots are simulated in fixed-size blocks.  Each block draws from its own
generator keyed by ``(master_seed, emitter, block)``, and the spectral
diffusion path is sampled once for the whole shot sequence, so a record is
bit-identical for any number of workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, InsufficientStatistics
from .lindblad import Drive, ReadoutWindow, collapse_operators, hamiltonian
from .noise import NoiseModel, make_rng, ou_trace

BLOCK_SIZE = 2000
_BISECT_ITER = 48


@dataclass(frozen=True)
class DetectionChain:
    grating_efficiency: float = 0.25
    splitter_fraction: float = 0.99
    detector_efficiency: float = 0.8
    extra_loss: float = 0.0
    background_rate: float = 0.0  # counts/s during readout windows
    dark_count_rate: float = 0.0  # counts/s
    dead_time: float = 50e-9  # s

    def __post_init__(self):
        for name in ("grating_efficiency", "splitter_fraction", "detector_efficiency", "extra_loss"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"chain.{name}", f"must lie in [0, 1], got {v}")
        for name in ("background_rate", "dark_count_rate", "dead_time"):
            if getattr(self, name) < 0:
                raise ConfigError(f"chain.{name}", "must be >= 0")

    @property
    def efficiency(self):
        return self.grating_efficiency * self.splitter_fraction * self.detector_efficiency * (1 - self.extra_loss)

    @property
    def uncorrelated_rate(self):
        return self.background_rate + self.dark_count_rate


@dataclass
class PhotonRecord:
    """Detection timestamps (s from shot start), stored flat and sorted by (shot, time)."""

    shot_index: np.ndarray
    times: np.ndarray
    n_shots: int
    period: float

    def __post_init__(self):
        self.shot_index = np.asarray(self.shot_index, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=float)
        order = np.lexsort((self.times, self.shot_index))
        self.shot_index = self.shot_index[order]
        self.times = self.times[order]

    def __len__(self):
        return self.times.size

    @property
    def shots(self):
        """Per-shot lists of timestamps."""
        splits = np.searchsorted(self.shot_index, np.arange(1, self.n_shots))
        return [list(a) for a in np.split(self.times, splits)]

    def counts_per_shot(self):
        return np.bincount(self.shot_index, minlength=self.n_shots)

    def absolute_times(self):
        return self.shot_index * self.period + self.times

    def merge(self, other):
        if other.n_shots != self.n_shots or other.period != self.period:
            raise ValueError("records cover different shot sequences")
        return PhotonRecord(
            np.concatenate([self.shot_index, other.shot_index]),
            np.concatenate([self.times, other.times]),
            self.n_shots,
            self.period,
        )


@dataclass
class Emitter:
    """One ion: level scheme, decay rates, noise and starting ground populations."""

    levels: object
    rates: object
    noise: NoiseModel = field(default_factory=NoiseModel)
    initial: dict = field(default_factory=lambda: {"g1": 1.0})


@dataclass
class EmissionBatch:
    shot_index: np.ndarray
    times: np.ndarray
    window_spans: list  # (start, stop) of every ReadoutWindow within a shot
    channel_counts: dict


# -- stochastic wavefunction core ------------------------------------------

def _segment_hamiltonians(levels, rates, noise, seg, frame, deltas):
    """Effective non-Hermitian Hamiltonians (S, d, d) for one segment."""
    if isinstance(seg, Drive):
        frame = (seg.transition, seg.detuning)
        active = seg
    else:
        active = None
    H0 = hamiltonian(levels, frame[0], frame[1], active)
    ops = collapse_operators(levels, rates, noise, frame[0])
    anti = sum((L.conj().T @ L for _, L in ops), np.zeros_like(H0))
    Heff = H0 - 0.5j * anti
    e = levels.index(levels.transition(frame[0]).upper)
    H = np.broadcast_to(Heff, (deltas.size,) + Heff.shape).copy()
    # detuning enters as -(laser - atom); spectral diffusion shifts the atom
    H[:, e, e] += deltas
    return H, ops, frame


class _Propagator:
    """psi(t) = exp(-i H t) psi(0) for a batch, via eigen-decomposition."""

    def __init__(self, H):
        self.H = H
        lam, V = np.linalg.eig(H)
        ok = np.ones(H.shape[0], dtype=bool)
        try:
            Vinv = np.linalg.inv(V)
            cond = np.linalg.norm(V, axis=(1, 2)) * np.linalg.norm(Vinv, axis=(1, 2))
            ok = np.isfinite(cond) & (cond < 1e8)
        except np.linalg.LinAlgError:
            Vinv = np.zeros_like(V)
            ok[:] = False
        self.lam, self.V, self.Vinv, self.ok = lam, V, Vinv, ok

    def apply(self, idx, psi, tau):
        """Propagate rows ``idx`` of ``psi`` by times ``tau``."""
        out = np.empty_like(psi)
        good = self.ok[idx]
        if good.any():
            i = idx[good]
            c = np.einsum("sij,sj->si", self.Vinv[i], psi[good])
            c *= np.exp(-1j * self.lam[i] * tau[good][:, None])
            out[good] = np.einsum("sij,sj->si", self.V[i], c)
        if (~good).any():
            i = idx[~good]
            U = expm(-1j * self.H[i] * tau[~good][:, None, None])
            out[~good] = np.einsum("sij,sj->si", U, psi[~good])
        return out


def _simulate_emissions(levels, rates, noise, sequence, deltas, rng, initial):
    """Quantum-jump trajectories for a batch of shots.

    ``deltas`` has shape (S, n_segments): the spectral-diffusion shift of the
    optical transition frozen over each segment.  Returns A-channel emission
    times inside ReadoutWindows plus total jump counts per channel.
    """
    segments = sequence.expanded()
    S = deltas.shape[0]
    d = levels.dim
    names = list(initial)
    probs = np.array([initial[n] for n in names], dtype=float)
    probs /= probs.sum()
    start = rng.choice(len(names), size=S, p=probs)
    psi = np.zeros((S, d), dtype=complex)
    psi[np.arange(S), [levels.index(names[k]) for k in start]] = 1.0
    r = rng.random(S)

    frame = ("A", 0.0)
    ev_shot, ev_time, spans = [], [], []
    channel_counts = {}
    t_seg = 0.0
    for j, seg in enumerate(segments):
        T = seg.duration
        if T <= 0:
            continue
        H, ops, frame = _segment_hamiltonians(levels, rates, noise, seg, frame, deltas[:, j])
        gated = isinstance(seg, ReadoutWindow)
        if gated:
            spans.append((t_seg, t_seg + T))
        prop = _Propagator(H)
        t_loc = np.zeros(S)
        active = np.arange(S)
        while active.size:
            end = prop.apply(active, psi[active], T - t_loc[active])
            n_end = np.einsum("si,si->s", end.conj(), end).real
            done = n_end > r[active]
            psi[active[done]] = end[done]
            jumpers = active[~done]
            if jumpers.size == 0:
                break
            # bisection for the time at which |psi|^2 reaches r
            lo = np.zeros(jumpers.size)
            hi = T - t_loc[jumpers]
            p0 = psi[jumpers]
            for _ in range(_BISECT_ITER):
                mid = 0.5 * (lo + hi)
                pm = prop.apply(jumpers, p0, mid)
                nm = np.einsum("si,si->s", pm.conj(), pm).real
                above = nm > r[jumpers]
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
            pj = prop.apply(jumpers, p0, hi)
            weights = np.stack([np.sum(np.abs(pj @ L.T) ** 2, axis=1) for _, L in ops], axis=1)
            cum = np.cumsum(weights, axis=1)
            u = rng.random(jumpers.size) * cum[:, -1]
            choice = (u[:, None] > cum).sum(axis=1)
            choice = np.minimum(choice, len(ops) - 1)
            new = np.empty_like(pj)
            for k, (name, L) in enumerate(ops):
                sel = choice == k
                if not sel.any():
                    continue
                channel_counts[name] = channel_counts.get(name, 0) + int(sel.sum())
                v = pj[sel] @ L.T
                new[sel] = v / np.linalg.norm(v, axis=1, keepdims=True)
                if gated and name == "A":
                    ev_shot.append(jumpers[sel])
                    ev_time.append(t_seg + t_loc[jumpers[sel]] + hi[sel])
            psi[jumpers] = new
            t_loc[jumpers] += hi
            r[jumpers] = rng.random(jumpers.size)
            active = jumpers
        t_seg += T
    shot = np.concatenate(ev_shot) if ev_shot else np.zeros(0, dtype=np.int64)
    times = np.concatenate(ev_time) if ev_time else np.zeros(0)
    return EmissionBatch(shot, times, spans, channel_counts)


def detect(shot_index, times, spans, n_shots, chain, rng, shot_offset=0):
    """Thin emissions by the chain efficiency, add gated background, apply dead time."""
    shot_index = np.asarray(shot_index, dtype=np.int64)
    times = np.asarray(times, dtype=float)
    keep = rng.random(times.size) < chain.efficiency
    shot_index, times = shot_index[keep], times[keep]
    rate = chain.uncorrelated_rate
    if rate > 0:
        extra_s, extra_t = [], []
        for a, b in spans:
            n = rng.poisson(rate * (b - a), size=n_shots)
            idx = np.repeat(np.arange(n_shots), n)
            extra_s.append(idx + shot_offset)
            extra_t.append(a + (b - a) * rng.random(idx.size))
        shot_index = np.concatenate([shot_index] + extra_s)
        times = np.concatenate([times] + extra_t)
    order = np.lexsort((times, shot_index))
    shot_index, times = shot_index[order], times[order]
    if chain.dead_time > 0 and times.size > 1:
        close = np.nonzero((np.diff(times) < chain.dead_time) & (np.diff(shot_index) == 0))[0]
        if close.size:
            drop = np.zeros(times.size, dtype=bool)
            # non-paralyzable: compare each event with the last kept one in its shot
            last_t, last_s = -np.inf, -1
            for i in range(times.size):
                if shot_index[i] == last_s and times[i] - last_t < chain.dead_time:
                    drop[i] = True
                else:
                    last_t, last_s = times[i], shot_index[i]
            shot_index, times = shot_index[~drop], times[~drop]
    return shot_index, times


def _segment_starts(sequence):
    starts, t = [], 0.0
    for seg in sequence.expanded():
        starts.append(t)
        t += seg.duration
    return np.array(starts)


def _emitter_deltas(emitter, sequence, shot_ids, period, trace):
    starts = _segment_starts(sequence)
    if trace is None:
        return np.zeros((shot_ids.size, starts.size))
    abs_t = shot_ids[:, None] * period + starts[None, :]
    k = np.clip(((abs_t - trace.t0) // trace.dt).astype(np.int64), 0, len(trace.values) - 1)
    return trace.values[k]


def _run_block(args):
    emitters, traces, sequence, chain, n_shots, period, master_seed, block = args
    lo = block * BLOCK_SIZE
    hi = min(n_shots, lo + BLOCK_SIZE)
    ids = np.arange(lo, hi)
    shots, times, spans, counts = [], [], [], {}
    for e, (em, trace) in enumerate(zip(emitters, traces)):
        deltas = _emitter_deltas(em, sequence, ids, period, trace)
        batch = _simulate_emissions(em.levels, em.rates, em.noise, sequence, deltas, make_rng(master_seed, 1, e, block), em.initial)
        shots.append(batch.shot_index + lo)
        times.append(batch.times)
        spans = batch.window_spans
        for k, v in batch.channel_counts.items():
            counts[k] = counts.get(k, 0) + v
    if not spans:
        spans = [(a, a + s.duration) for a, s in zip(_segment_starts(sequence), sequence.expanded()) if isinstance(s, ReadoutWindow)]
    s, t = detect(np.concatenate(shots), np.concatenate(times), spans, hi - lo, chain, make_rng(master_seed, 3, block), shot_offset=lo)
    return s, t, counts


def simulate_record(emitters, sequence, chain, n_shots, master_seed, period=None, workers=1, return_counts=False):
    """Detected photon record for ``n_shots`` repetitions of ``sequence``.

    Several emitters share one detector.  Each emitter's spectral diffusion
    evolves continuously across consecutive shots, which are ``period`` apart.
    """
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    if isinstance(emitters, Emitter):
        emitters = [emitters]
    period = period or sequence.period or sequence.duration
    if sequence.duration > period * (1 + 1e-12):
        raise ValueError("shot sequence longer than the repetition period")
    traces = []
    for e, em in enumerate(emitters):
        if em.noise.sigma > 0:
            traces.append(ou_trace(em.noise, n_shots * period, make_rng(master_seed, 2, e), dt=period))
        else:
            traces.append(None)
    n_blocks = int(math.ceil(n_shots / BLOCK_SIZE))
    jobs = [(emitters, traces, sequence, chain, n_shots, period, master_seed, b) for b in range(n_blocks)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_block, jobs))
    else:
        results = [_run_block(j) for j in jobs]
    record = PhotonRecord(
        np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results]), n_shots, period
    )
    if return_counts:
        counts = {}
        for _, _, c in results:
            for k, v in c.items():
                counts[k] = counts.get(k, 0) + v
        return record, counts
    return record


def jump_trajectory(levels, rates, sequence, noise, chain, seed, initial=None):
    """Single detected shot (as a one-shot :class:`PhotonRecord`)."""
    em = Emitter(levels, rates, noise or NoiseModel(), initial or {"g1": 1.0})
    return simulate_record([em], sequence, chain, 1, seed, period=sequence.period or sequence.duration)


# -- correlation analysis ---------------------------------------------------

@dataclass
class G2Histogram:
    edges: np.ndarray  # s
    counts: np.ndarray
    normalization: np.ndarray
    g2: np.ndarray
    g2_err: np.ndarray
    period: float
    peak_lags: np.ndarray  # integer pulse separations
    peak_g2: np.ndarray
    peak_err: np.ndarray
    far_lag_min: int

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def g2_zero(self):
        return float(self.peak_g2[self.peak_lags == 0][0])

    @property
    def g2_zero_err(self):
        return float(self.peak_err[self.peak_lags == 0][0])


def _poisson_err(g2, counts, norm):
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(counts > 0, g2 / np.sqrt(np.maximum(counts, 1)), 1.0 / norm)
    return err


def g2_pulsed(record, max_lag=20, bin_width=None, far_lag_min=10):
    """Pulsed single-detector autocorrelation.

    Coincidences are grouped by pulse separation k: the zero-lag peak counts
    ordered pairs inside one shot, peak k counts pairs between shots j and
    j + k.  Each peak is normalised by the far-lag (|k| >= far_lag_min) mean
    per shot pair.  ``bin_width`` smaller than the period adds a fine
    histogram, normalised phase-by-phase against the far-lag peaks.
    """
    if record.n_shots < 1:
        raise ValueError("empty record")
    if max_lag < far_lag_min:
        raise ValueError("max_lag must reach the far-lag normalisation region")
    period = record.period
    n = record.counts_per_shot().astype(float)
    N = n.size
    lags = np.arange(0, max_lag + 1)
    coinc = np.empty(lags.size)
    pairs = np.empty(lags.size)
    coinc[0] = float(np.sum(n * (n - 1)))
    pairs[0] = N
    for k in lags[1:]:
        if k >= N:
            coinc[k], pairs[k] = 0.0, 0.0
        else:
            coinc[k] = float(np.dot(n[:-k], n[k:]))
            pairs[k] = N - k
    far = lags >= far_lag_min
    far = far & (pairs > 0)
    if not far.any() or coinc[far].sum() == 0:
        raise InsufficientStatistics("insufficient statistics: no far-lag coincidences", module="photon-stats")
    per_pair = coinc[far].sum() / pairs[far].sum()
    norm = per_pair * pairs
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(norm > 0, coinc / norm, 0.0)
    err = _poisson_err(g, coinc, np.where(norm > 0, norm, 1.0))
    # symmetric signed lags; the zero peak already holds both orderings
    peak_lags = np.concatenate([-lags[:0:-1], lags])
    peak_counts = np.concatenate([coinc[:0:-1], coinc])
    peak_norm = np.concatenate([norm[:0:-1], norm])
    peak_g2 = np.concatenate([g[:0:-1], g])
    peak_err = np.concatenate([err[:0:-1], err])

    if bin_width is None or bin_width >= period:
        edges = (peak_lags - 0.5) * period
        edges = np.append(edges, (max_lag + 0.5) * period)
        return G2Histogram(edges, peak_counts, peak_norm, peak_g2, peak_err, period, peak_lags, peak_g2, peak_err, far_lag_min)

    per_period = int(round(period / bin_width))
    if abs(per_period * bin_width - period) > 1e-9 * period:
        raise ValueError("bin_width must divide the repetition period")
    span = (max_lag + 0.5) * period
    edges = np.linspace(-span, span, (2 * max_lag + 1) * per_period + 1)
    t = record.absolute_times()
    fine = np.zeros(edges.size - 1)
    for i in range(t.size):
        j = np.searchsorted(t, t[i] + span, side="right")
        dt = t[i + 1 : j] - t[i]
        if dt.size:
            fine += np.histogram(dt, edges)[0]
            fine += np.histogram(-dt, edges)[0]
    fine = fine.reshape(2 * max_lag + 1, per_period)
    far_rows = np.abs(peak_lags) >= far_lag_min
    shot_pairs = np.concatenate([pairs[:0:-1], pairs])
    phase_profile = fine[far_rows].sum(axis=0) / max(shot_pairs[far_rows].sum(), 1)
    fine_norm = shot_pairs[:, None] * phase_profile[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        fine_g2 = np.where(fine_norm > 0, fine / fine_norm, 0.0)
    fine_err = _poisson_err(fine_g2, fine, np.where(fine_norm > 0, fine_norm, 1.0))
    return G2Histogram(
        edges, fine.ravel(), fine_norm.ravel(), fine_g2.ravel(), fine_err.ravel(), period,
        peak_lags, peak_g2, peak_err, far_lag_min,
    )


def bunching_ratio(histogram, near_window):
    """Mean normalised peak area for 0 < |lag| < near_window over the far-lag mean."""
    lag_s = np.abs(histogram.peak_lags) * histogram.period
    near = (histogram.peak_lags != 0) & (lag_s < near_window)
    far = np.abs(histogram.peak_lags) >= histogram.far_lag_min
    if not near.any() or not far.any():
        raise InsufficientStatistics("insufficient bins for a bunching ratio", module="photon-stats")
    return float(histogram.peak_g2[near].mean() / histogram.peak_g2[far].mean())


def g2_background_oracle(x):
    """g2(0) of a single-photon source with uncorrelated background-to-signal ratio x."""
    return (2 * x + x * x) / (1 + x) ** 2
