"""Density-matrix evolution under piecewise-constant drives.

The generator inside every step is constant: the drive is rectangular and
the slow spectral-diffusion detuning is frozen over at most ``tau_c / 100``.
The default ``expm`` method therefore propagates each step exactly with a
matrix exponential; ``rk45`` integrates the same generator with an adaptive
Dormand-Prince scheme and is kept as an independent check.

Density matrices are plain ``(d, d)`` complex arrays, vectorised row-major,
so that ``vec(A rho B) = kron(A, B.T) vec(rho)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import SolverError

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-9
EIGEN_TOL = 1e-8


@dataclass(frozen=True)
class Drive:
    transition: str
    rabi: float  # rad/s
    duration: float  # s
    detuning: float = 0.0  # laser - transition, rad/s
    phase: float = 0.0


@dataclass(frozen=True)
class Delay:
    duration: float


@dataclass(frozen=True)
class ReadoutWindow:
    duration: float
    bins: int = 1


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple
    repetitions: int = 1
    period: float | None = None  # pad each repetition to this length

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        for seg in self.segments:
            if seg.duration < 0:
                raise ValueError(f"negative duration in {seg}")
            if isinstance(seg, ReadoutWindow) and seg.bins < 1:
                raise ValueError("readout window needs at least one bin")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.period is not None and self.repetitions > 1 and self.single_duration > self.period * (1 + 1e-12):
            raise ValueError("segments do not fit inside the repetition period")

    @property
    def single_duration(self):
        return sum(s.duration for s in self.segments)

    @property
    def duration(self):
        one = self.single_duration
        if self.period is not None and self.repetitions > 1:
            one = max(one, self.period)
        return one * self.repetitions

    def expanded(self):
        """Flat list of segments with repetitions and period padding applied."""
        out = []
        pad = 0.0
        if self.period is not None and self.repetitions > 1:
            pad = self.period - self.single_duration
        for r in range(self.repetitions):
            out.extend(self.segments)
            if pad > 0 and r < self.repetitions - 1:
                out.append(Delay(pad))
        return out

    def validate(self, levels):
        for seg in self.segments:
            if isinstance(seg, Drive):
                levels.transition(seg.transition)


def sequence(*segments, repetitions=1, period=None):
    return PulseSequence(tuple(segments), repetitions=repetitions, period=period)


# -- states -----------------------------------------------------------------

def pure_state(levels, name):
    rho = np.zeros((levels.dim, levels.dim), dtype=complex)
    i = levels.index(name)
    rho[i, i] = 1.0
    return rho


def mixed_state(levels, populations):
    rho = np.zeros((levels.dim, levels.dim), dtype=complex)
    total = sum(populations.values())
    for name, p in populations.items():
        i = levels.index(name)
        rho[i, i] = p / total
    return rho


def density_matrix_violations(rho):
    """Return a list of broken invariants (empty when rho is a valid state)."""
    problems = []
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > HERMITIAN_TOL:
        problems.append(f"hermiticity error {herm:.3g}")
    tr = abs(np.trace(rho) - 1.0)
    if tr > TRACE_TOL:
        problems.append(f"trace error {tr:.3g}")
    lam = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min()
    if lam < -EIGEN_TOL:
        problems.append(f"negative eigenvalue {lam:.3g}")
    return problems


# -- generator --------------------------------------------------------------

def collapse_operators(levels, rates, noise=None, frame_transition="A"):
    """Jump operators as (channel, matrix) pairs.

    Decay channels follow the rates from ``enhanced_decay``; the optional
    dephasing operator sqrt(gamma_phi) |e><e| acts on the upper level of the
    frame transition, so its optical coherence decays at gamma_phi / 2.
    """
    d = levels.dim
    upper = levels.transition("A").upper
    targets = {"A": levels.transition("A").lower}
    try:
        targets["C"] = levels.transition("C").lower
    except KeyError:
        if "g0" in levels.levels:
            targets["C"] = "g0"
    if "gaux" in levels.levels:
        targets["aux"] = "gaux"
    ops = []
    for channel, rate in rates.channels.items():
        if rate <= 0:
            continue
        if channel not in targets:
            raise SolverError(f"no decay target for channel {channel}", module="lindblad")
        L = np.zeros((d, d), dtype=complex)
        L[levels.index(targets[channel]), levels.index(upper)] = math.sqrt(rate)
        ops.append((channel, L))
    if noise is not None and noise.gamma_phi > 0:
        e = levels.index(levels.transition(frame_transition).upper)
        L = np.zeros((d, d), dtype=complex)
        L[e, e] = math.sqrt(noise.gamma_phi)
        ops.append(("dephasing", L))
    return ops


def hamiltonian(levels, frame_transition, detuning, drive=None):
    """Rotating-frame Hamiltonian (rad/s) in the frame of ``frame_transition``.

    ``detuning`` is laser minus atom, including any spectral-diffusion shift.
    """
    d = levels.dim
    H = np.zeros((d, d), dtype=complex)
    t = levels.transition(frame_transition)
    e = levels.index(t.upper)
    H[e, e] = -detuning
    if drive is not None and drive.rabi != 0:
        g = levels.index(t.lower)
        c = 0.5 * drive.rabi * np.exp(1j * drive.phase)
        H[e, g] += c
        H[g, e] += np.conj(c)
    return H


def dissipator(ops, d):
    eye = np.eye(d)
    D = np.zeros((d * d, d * d), dtype=complex)
    for _, L in ops:
        LdL = L.conj().T @ L
        D += np.kron(L, L.conj()) - 0.5 * np.kron(LdL, eye) - 0.5 * np.kron(eye, LdL.T)
    return D


def hamiltonian_superop(H):
    d = H.shape[0]
    eye = np.eye(d)
    # kron(H, I) - kron(I, H^T) written out by broadcasting
    left = H[:, None, :, None] * eye[None, :, None, :]
    right = eye[:, None, :, None] * H.T[None, :, None, :]
    return -1j * (left - right).reshape(d * d, d * d)


def build_generator(levels, rates, drive, noise_detuning=0.0, noise=None, frame=None):
    """Liouvillian for one constant piece of a sequence.

    ``drive`` is a :class:`Drive`, or a :class:`Delay`/:class:`ReadoutWindow`
    for free evolution; free evolution uses ``frame`` = (transition, laser
    detuning) of the most recent drive, defaulting to a resonant A frame.
    """
    if isinstance(drive, Drive):
        try:
            levels.transition(drive.transition)
        except KeyError as exc:
            raise SolverError(f"unknown transition {drive.transition!r}", module="lindblad") from exc
        frame = (drive.transition, drive.detuning)
        active = drive
    else:
        frame = frame or ("A", 0.0)
        active = None
    H = hamiltonian(levels, frame[0], frame[1] - noise_detuning, active)
    ops = collapse_operators(levels, rates, noise, frame[0])
    return hamiltonian_superop(H) + dissipator(ops, levels.dim)


# -- integration ------------------------------------------------------------

@dataclass
class EvolveResult:
    times: list
    states: list
    readouts: list  # per ReadoutWindow: array of A-channel emission per bin
    frame: tuple
    steps: int = 0

    @property
    def final(self):
        return self.states[-1]

    @property
    def t_end(self):
        return self.times[-1]

    @property
    def total_emission(self):
        return float(sum(r.sum() for r in self.readouts))


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_DP_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _dopri_piece(G, y, T, tol, segment, counter):
    """Integrate y' = G y over [0, T] with step control to ``tol``."""
    if T == 0:
        return y
    norm = np.abs(G).sum(axis=1).max()
    h = T if norm == 0 else min(T, 0.5 / norm)
    t = 0.0
    h_min = max(T * 1e-13, 1e-18)
    while t < T:
        h = min(h, T - t)
        k = [G @ y]
        for i in range(1, 7):
            k.append(G @ (y + h * sum(a * kj for a, kj in zip(_DP_A[i], k))))
        K = np.array(k)
        y5 = y + h * (_DP_B5 @ K)
        err = h * ((_DP_B5 - _DP_B4) @ K)
        scale = tol + tol * np.maximum(np.abs(y), np.abs(y5))
        e = np.max(np.abs(err) / scale)
        if e <= 1.0:
            t += h
            y = y5
            counter[0] += 1
        fac = 0.9 * e ** (-0.2) if e > 0 else 5.0
        h *= min(5.0, max(0.2, fac))
        if h < h_min and t < T:
            raise SolverError(f"step size underflow at t={t:.3e}", module="lindblad", segment=segment)
    return y


def _free_phase(levels, frame, delta, h):
    """exp(K h) for the diagonal Hamiltonian part K of a free-evolution piece, as a vector."""
    diag = np.diag(hamiltonian(levels, frame[0], frame[1] - delta))
    return np.exp(-1j * (diag[:, None] - diag[None, :]) * h).reshape(-1)


def _propagate(make_G, vec, h, readout_row, method, tol, segment, cache, key, counter, phase=None):
    """Advance ``vec`` by ``h``; returns (vec, emitted) where emitted integrates readout_row.

    ``make_G`` builds the generator; it is only called when no cached
    propagator exists for ``key``.  ``phase`` is an optional diagonal factor
    applied first, for a generator part that commutes with ``make_G()``.
    """
    n = vec.shape[0]
    if phase is not None:
        vec = phase * vec
    if method == "expm":
        if readout_row is None:
            P = cache.get(key)
            if P is None:
                P = expm(make_G() * h)
                cache[key] = P
            counter[0] += 1
            return P @ vec, 0.0
        P = cache.get(key)
        if P is None:
            G = make_G()
            B = np.zeros((n + 1, n + 1), dtype=complex)
            B[:n, :n] = G
            B[n, :n] = readout_row
            P = expm(B * h)
            cache[key] = P
        counter[0] += 1
        out = P[:, :n] @ vec
        return out[:n], float(out[n].real)
    # rk45: augment with the emission integral
    B = np.zeros((n + 1, n + 1), dtype=complex)
    B[:n, :n] = make_G()
    if readout_row is not None:
        B[n, :n] = readout_row
    y = np.concatenate([vec, [0.0]])
    y = _dopri_piece(B, y, h, tol, segment, counter)
    return y[:n], float(y[n].real)


def evolve(
    rho0,
    sequence,
    levels,
    rates,
    noise=None,
    noise_trace=None,
    tol=1e-9,
    method="expm",
    t0=0.0,
    frame=None,
    check=True,
    cache=None,
):
    """Evolve ``rho0`` through ``sequence``.

    Returns an :class:`EvolveResult` with the state at every segment boundary
    and, for each ReadoutWindow, the A-channel emission Gamma_A * rho_ee
    integrated over each of its bins (photons per shot).

    ``noise_trace`` supplies the spectral-diffusion detuning; it is held
    constant between its sample boundaries and steps never exceed
    ``noise.tau_c / 100`` when ``noise.sigma > 0``.

    ``cache`` may be a dict reused across calls that share levels, rates and
    noise model; propagators of identical pieces are then computed once.
    """
    if not 1e-12 < tol < 1e-3:
        raise ValueError("tol must lie in (1e-12, 1e-3)")
    if method not in ("expm", "rk45"):
        raise ValueError(f"unknown method {method!r}")
    sequence.validate(levels)
    d = levels.dim
    rho0 = np.asarray(rho0, dtype=complex)
    if check:
        bad = density_matrix_violations(rho0)
        if bad:
            raise SolverError("invalid initial state: " + "; ".join(bad), module="lindblad")

    a_upper = levels.index(levels.transition("A").upper)
    readout_row = np.zeros(d * d, dtype=complex)
    readout_row[a_upper * d + a_upper] = rates.gamma_A

    max_step = math.inf
    if noise is not None and noise.sigma > 0:
        max_step = noise.max_step
    noise_fn = noise_trace.at if noise_trace is not None else (lambda t: 0.0)

    frame = frame or ("A", 0.0)
    D_cache = {}

    def generator(seg, delta, frame, free=False):
        if free:
            # dissipator only; the diagonal Hamiltonian goes in as a phase
            frame = (frame[0], delta)
        if isinstance(seg, Drive):
            frame = (seg.transition, seg.detuning)
            active = seg
        else:
            active = None
        ops_key = frame[0]
        if ops_key not in D_cache:
            D_cache[ops_key] = dissipator(collapse_operators(levels, rates, noise, frame[0]), d)
        H = hamiltonian(levels, frame[0], frame[1] - delta, active)
        return hamiltonian_superop(H) + D_cache[ops_key]

    vec = rho0.reshape(-1).copy()
    t = float(t0)
    times, states, readouts = [t], [rho0.copy()], []
    if cache is None or method != "expm":
        cache = {}
    counter = [0]
    for index, seg in enumerate(sequence.expanded()):
        label = f"{index}:{type(seg).__name__}"
        if isinstance(seg, Drive):
            try:
                levels.transition(seg.transition)
            except KeyError as exc:
                raise SolverError(f"unknown transition {seg.transition!r}", module="lindblad", segment=label) from exc
        # piece boundaries: readout bins, noise samples, step cap
        edges = [0.0, seg.duration]
        if isinstance(seg, ReadoutWindow):
            edges = list(np.linspace(0.0, seg.duration, seg.bins + 1))
        bins = np.zeros(max(len(edges) - 1, 0))
        is_readout = isinstance(seg, ReadoutWindow)
        seg_key = (type(seg).__name__, seg) if isinstance(seg, Drive) else (type(seg).__name__, frame, is_readout)
        free = method == "expm" and not isinstance(seg, Drive)
        t_seg = t
        for b in range(len(edges) - 1):
            a_edge, b_edge = t_seg + edges[b], t_seg + edges[b + 1]
            tt = a_edge
            while tt < b_edge - 1e-18 * max(1.0, abs(b_edge)):
                stop = min(b_edge, tt + max_step)
                if noise_trace is not None:
                    stop = min(stop, noise_trace.next_boundary(tt))
                h = stop - tt
                if h <= 0:
                    break
                delta = noise_fn(tt)
                row = readout_row if is_readout else None
                if free:
                    # diagonal Hamiltonians commute with phase-covariant dissipators,
                    # so the detuning factors out exactly and the cache ignores it
                    key = (seg_key[0], frame[0], is_readout, round(h, 18))
                    phase = _free_phase(levels, frame, delta, h)
                    make = lambda: generator(seg, 0.0, frame, free=True)
                else:
                    key = (seg_key, delta, round(h, 18))
                    phase = None
                    make = lambda: generator(seg, delta, frame)
                vec, emitted = _propagate(make, vec, h, row, method, tol, label, cache, key, counter, phase)
                bins[b] += emitted
                tt = stop
        if isinstance(seg, Drive):
            frame = (seg.transition, seg.detuning)
        t = t_seg + seg.duration
        rho = vec.reshape(d, d)
        if check:
            bad = density_matrix_violations(rho)
            if bad:
                raise SolverError("; ".join(bad), module="lindblad", segment=label)
        times.append(t)
        states.append(rho.copy())
        if isinstance(seg, ReadoutWindow):
            readouts.append(bins)
    return EvolveResult(times=times, states=states, readouts=readouts, frame=frame, steps=counter[0])


def excited_population(levels, rho, transition="A"):
    i = levels.index(levels.transition(transition).upper)
    return float(np.real(rho[i, i]))


def coherence(levels, rho, transition="A"):
    t = levels.transition(transition)
    return complex(rho[levels.index(t.upper), levels.index(t.lower)])
