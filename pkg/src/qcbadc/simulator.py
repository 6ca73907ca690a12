"""Clock-accurate simulation of a controlled analog system.

Each clock period is propagated exactly: the sinusoidal test input is an
autonomous oscillator whose contribution over one period is a fixed linear map
of its phase at the period start, and the control is held (NRZ), so the whole
period reduces to two precomputed matrix products.
"""

from dataclasses import dataclass, field, replace
import io
import json
import math

import numpy as np
from numba import njit

from .control import LowpassControlParams, QuadratureControlParams
from .numerics import discretize, rotation

TRACE_FORMAT_VERSION = 1
INPUT_KINDS = ("lowpass_tone", "quadrature_tone", "zero", "reference_only")


class SimulationDiverged(RuntimeError):
    """Raised when a state magnitude exceeds the blow-up bound."""

    def __init__(self, period, bound, value):
        super().__init__(f"state magnitude {value:.3g} exceeded {bound:.3g} at period {period}")
        self.period = int(period)
        self.bound = bound
        self.value = value


@dataclass(frozen=True)
class InputSpec:
    kind: str = "zero"
    amplitude: float = 1.0
    frequency: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in INPUT_KINDS:
            raise ValueError(f"unknown input kind {self.kind!r}")
        if not (math.isfinite(self.amplitude) and math.isfinite(self.frequency)):
            raise ValueError("amplitude and frequency must be finite")

    @property
    def has_tone(self):
        return self.kind in ("lowpass_tone", "quadrature_tone") and self.amplitude != 0.0

    def value(self, t):
        """``(u, ubar)`` at times ``t`` (for checks and oracles)."""
        t = np.asarray(t, dtype=float)
        if not self.has_tone:
            return np.zeros_like(t), np.zeros_like(t)
        arg = 2.0 * np.pi * self.frequency * t + self.phase
        u = self.amplitude * np.cos(arg)
        ub = self.amplitude * np.sin(arg) if self.kind == "quadrature_tone" else np.zeros_like(t)
        return u, ub


class ControlTrace:
    """Binary decisions, one row per clock period, stored one bit each.

    ``+1`` is stored as bit 1 and ``-1`` as bit 0; rows are packed little-endian
    (decision ``j`` of a row is bit ``j % 8`` of byte ``j // 8``).
    """

    def __init__(self, packed, K, M, T_s, labels=(), seed=None, n_reference=0):
        packed = np.ascontiguousarray(packed, dtype=np.uint8)
        row_bytes = (M + 7) // 8
        if packed.shape != (K, row_bytes):
            raise ValueError(f"packed shape {packed.shape} != ({K}, {row_bytes})")
        self._packed = packed
        self._packed.setflags(write=False)
        self.K, self.M, self.T_s = int(K), int(M), float(T_s)
        self.labels = tuple(labels) if labels else tuple(f"c{j}" for j in range(M))
        self.seed = seed
        self.n_reference = int(n_reference)

    @classmethod
    def from_decisions(cls, decisions, T_s, labels=(), seed=None, n_reference=0):
        d = np.asarray(decisions)
        if d.ndim != 2:
            raise ValueError("decisions must be K x M")
        if not np.all(np.abs(d) == 1):
            raise ValueError("decisions must be +-1")
        packed = np.packbits(d > 0, axis=1, bitorder="little")
        return cls(packed, d.shape[0], d.shape[1], T_s, labels, seed, n_reference)

    @property
    def packed(self):
        return self._packed

    def decisions(self, dtype=np.int8):
        bits = np.unpackbits(self._packed, axis=1, count=self.M, bitorder="little")
        return (2 * bits.astype(np.int8) - 1).astype(dtype, copy=False)

    def __eq__(self, other):
        return (isinstance(other, ControlTrace) and self.K == other.K and self.M == other.M
                and self.T_s == other.T_s and np.array_equal(self._packed, other._packed))

    def header(self):
        return {"version": TRACE_FORMAT_VERSION, "K": self.K, "M": self.M, "T_s": self.T_s,
                "labels": list(self.labels), "seed": self.seed, "n_reference": self.n_reference,
                "bitorder": "little"}

    def to_bytes(self):
        return (json.dumps(self.header()) + "\n").encode() + self._packed.tobytes()

    @classmethod
    def from_bytes(cls, blob):
        nl = blob.index(b"\n")
        h = json.loads(blob[:nl].decode())
        if h.get("version") != TRACE_FORMAT_VERSION:
            raise ValueError(f"unsupported trace version {h.get('version')}")
        body = np.frombuffer(blob[nl + 1:], dtype=np.uint8)
        packed = body.reshape(h["K"], (h["M"] + 7) // 8)
        return cls(packed.copy(), h["K"], h["M"], h["T_s"], h["labels"], h["seed"], h.get("n_reference", 0))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class StateTrace:
    states: np.ndarray  # (K // decimation, n) snapshots at k T_s, k = 0, d, 2d, ...
    T_s: float
    decimation: int = 1
    pairs: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.states.ndim != 2 or not np.all(np.isfinite(self.states)):
            raise ValueError("state trace must be a finite 2-D array")


def max_state_norm(trace):
    """Per-pair supremum of ``||(x_l, xbar_l)||``, or ``sup |x_l|`` without pairs."""
    X = np.asarray(trace.states)
    if X.shape[0] == 0:
        raise ValueError("empty state trace")
    if trace.pairs:
        return np.array([np.max(np.hypot(X[:, i], X[:, j])) for i, j in trace.pairs])
    return np.max(np.abs(X), axis=0)


def pair_norms(trace):
    X = np.asarray(trace.states)
    if trace.pairs:
        return np.stack([np.hypot(X[:, i], X[:, j]) for i, j in trace.pairs], axis=1)
    return np.abs(X)


def _state_pairs(model):
    sm = model.state_map
    if model.is_quadrature:
        N = len(sm) // 2
        return tuple((sm[i], sm[N + i]) for i in range(N))
    return ()


def inject_reference(model, amplitude_ratio=0.1, seed=0):
    """Add reference control column(s) at the first stage.

    The gain is ``amplitude_ratio`` times the stage-1 control gain (a full
    2x2 block for quadrature models, so ``(s0, sbar0)`` enter like a regular
    control pair). Returns the extended model and a callable ``K -> (K, r)``
    array of i.i.d. +-1 decisions drawn from ``seed``.
    """
    if not 0.0 < amplitude_ratio <= 1.0:
        raise ValueError("amplitude_ratio must lie in (0, 1]")
    if model.n_reference:
        raise ValueError("model already has a reference input")
    G = np.asarray(model.Gamma_ctrl)
    n_ctrl = G.shape[1]
    if model.is_quadrature:
        N = n_ctrl // 2
        ref = amplitude_ratio * G[:, [0, N]]
        # keep only the first-stage rows (the pair block itself)
        keep = np.zeros(G.shape[0], dtype=bool)
        keep[[model.state_map[0], model.state_map[N]]] = True
        ref[~keep] = 0.0
        labels = ("s0", "sbar0")
    else:
        ref = amplitude_ratio * G[:, [0]]
        keep = np.zeros(G.shape[0], dtype=bool)
        keep[model.state_map[0]] = True
        ref[~keep] = 0.0
        labels = ("s0",)
    n_ref = ref.shape[1]
    ext = replace(model, Gamma_ctrl=np.hstack([ref, G]), n_reference=n_ref,
                  control_labels=labels + tuple(model.control_labels), param_map=())

    def generator(K):
        rng = np.random.default_rng(seed)
        return np.where(rng.random((K, n_ref)) < 0.5, -1, 1).astype(np.int8)

    return ext, generator


def _check_params(model, params):
    d = model.design
    if isinstance(params, QuadratureControlParams):
        if not model.is_quadrature:
            raise ValueError("quadrature params given for a low-pass model")
    elif isinstance(params, LowpassControlParams):
        if model.is_quadrature:
            raise ValueError("low-pass params given for a quadrature model")
    else:
        raise TypeError("params must be QuadratureControlParams or LowpassControlParams")
    if not math.isclose(params.f_s, 2.0 * d.beta, rel_tol=1e-12):
        raise ValueError(f"control clock {params.f_s} Hz violates f_s = 2 beta = {2 * d.beta}")
    if not 0.0 <= params.tau_dc < params.T_s:
        raise ValueError("tau_dc must lie in [0, T_s)")


def _input_columns(model, inp):
    # maps oscillator state (cos, sin) to the input vector
    n = model.n_states
    if not inp.has_tone:
        return np.zeros((n, 2))
    a = inp.amplitude
    if inp.kind == "lowpass_tone":
        return a * np.column_stack([model.B[:, 0], np.zeros(n)])
    if model.n_inputs < 2:
        raise ValueError("quadrature_tone needs a model with two inputs")
    return a * np.column_stack([model.B[:, 0], model.B[:, 1]])


@dataclass(frozen=True)
class PeriodBlocks:
    """Exact per-period propagation for ``x[k+1] = P x[k] + Q osc[k] + R s[k-1] + S s[k]``."""

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    cycles_per_period: float


def period_blocks(model, T_s, tau_dc, inp):
    n = model.n_states
    Bo = _input_columns(model, inp)
    w = 2.0 * np.pi * inp.frequency if inp.has_tone else 0.0
    W = np.array([[0.0, -w], [w, 0.0]])
    A_aug = np.zeros((n + 2, n + 2))
    A_aug[:n, :n] = model.A
    A_aug[:n, n:] = Bo
    A_aug[n:, n:] = W
    Gam = np.vstack([model.Gamma_ctrl, np.zeros((2, model.Gamma_ctrl.shape[1]))])
    m = Gam.shape[1]
    if tau_dc > 0:
        d1 = discretize(A_aug, Gam, tau_dc)
        d2 = discretize(A_aug, Gam, T_s - tau_dc)
        P = d2.Phi @ d1.Phi
        R = d2.Phi @ d1.Gamma
        S = d2.Gamma
    else:
        d2 = discretize(A_aug, Gam, T_s)
        P, R, S = d2.Phi, np.zeros((n + 2, m)), d2.Gamma
    return PeriodBlocks(
        P=np.ascontiguousarray(P[:n, :n]), Q=np.ascontiguousarray(P[:n, n:]),
        R=np.ascontiguousarray(R[:n]), S=np.ascontiguousarray(S[:n]),
        cycles_per_period=(inp.frequency * T_s) if inp.has_tone else 0.0,
    )


@njit(cache=True, nogil=True)
def _run(P, Q, R, S, obs, ref, x0, prev0, cyc, phase, K, bound, every, out_s, out_x):
    n = P.shape[0]
    m = S.shape[1]
    nref = ref.shape[1]
    nctl = obs.shape[0]
    x = x0.copy()
    xn = np.empty(n)
    prev = prev0.copy()
    cur = np.empty(m)
    for k in range(K):
        if every > 0 and k % every == 0:
            out_x[k // every, :] = x
        for j in range(nref):
            cur[j] = ref[k, j]
            out_s[k, j] = ref[k, j]
        for c in range(nctl):
            v = 0.0
            for i in range(n):
                v += obs[c, i] * x[i]
            d = 1 if v >= 0.0 else -1
            cur[nref + c] = d
            out_s[k, nref + c] = d
        frac = (k * cyc) % 1.0
        arg = 2.0 * np.pi * frac + phase
        oc = math.cos(arg)
        os_ = math.sin(arg)
        worst = 0.0
        for i in range(n):
            v = Q[i, 0] * oc + Q[i, 1] * os_
            for j in range(n):
                v += P[i, j] * x[j]
            for j in range(m):
                v += R[i, j] * prev[j] + S[i, j] * cur[j]
            xn[i] = v
            a = abs(v)
            if a > worst or not (a == a):
                worst = a if a == a else np.inf
        if worst > bound:
            return k + 1, worst
        for i in range(n):
            x[i] = xn[i]
        for j in range(m):
            prev[j] = cur[j]
    return -1, 0.0


def simulate(model, params, inp, K, record_states=False, state_decimation=1,
             blowup=1e3, v_fs=1.0, reference=None, x0=None, raise_on_divergence=True):
    """Simulate ``K`` clock periods.

    At each instant ``k T_s`` the comparators see ``observation @ x`` and the
    resulting decisions are held over the next period (shifted by ``tau_dc``).
    ``reference`` supplies the reference decisions (``K x n_reference``) for a
    model produced by :func:`inject_reference`.

    Returns ``(ControlTrace, StateTrace or None)``. On divergence raises
    :class:`SimulationDiverged` (or, with ``raise_on_divergence=False``,
    returns the exception as the second element, the trace being truncated).
    """
    _check_params(model, params)
    if K < 1:
        raise ValueError("K must be >= 1")
    n = model.n_states
    nref = model.n_reference
    if nref:
        if reference is None:
            raise ValueError("model has reference columns but no reference sequence")
        ref = np.ascontiguousarray(reference[:K], dtype=np.float64)
        if ref.shape != (K, nref):
            raise ValueError(f"reference must be ({K}, {nref})")
    else:
        ref = np.zeros((K, 0))
    blocks = period_blocks(model, params.T_s, params.tau_dc, inp)
    obs = np.ascontiguousarray(model.observation, dtype=np.float64)
    m = nref + model.n_controls
    out_s = np.empty((K, m), dtype=np.int8)
    every = max(1, int(state_decimation)) if record_states else 0
    out_x = np.empty(((K + every - 1) // every if every else 0, n))
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    prev0 = np.zeros(m)
    phase = inp.phase if inp.has_tone else 0.0
    bad_k, value = _run(blocks.P, blocks.Q, blocks.R, blocks.S, obs, ref, x0, prev0,
                        blocks.cycles_per_period, phase, K, blowup * v_fs, every, out_s, out_x)
    labels = model.control_labels
    if bad_k >= 0:
        err = SimulationDiverged(bad_k, blowup * v_fs, value)
        if raise_on_divergence:
            raise err
        ctrl = ControlTrace.from_decisions(out_s[:bad_k], params.T_s, labels, n_reference=nref)
        return ctrl, err
    ctrl = ControlTrace.from_decisions(out_s, params.T_s, labels, n_reference=nref)
    states = None
    if record_states:
        states = StateTrace(out_x, params.T_s, every, _state_pairs(model))
    return ctrl, states


def controlled_states(model, params, inp, trace, x0=None, substeps=1):
    """Replay a recorded trace and return states on a ``T_s / substeps`` grid.

    Used by the estimation oracle, which needs the trajectory inside each
    period. Returns an array of shape ``(K * substeps + 1, n)``.
    """
    n = model.n_states
    h = params.T_s / substeps
    if params.tau_dc and abs(round(params.tau_dc / h) * h - params.tau_dc) > 1e-15 * params.T_s:
        raise ValueError("tau_dc must be a multiple of T_s / substeps")
    shift = int(round(params.tau_dc / h))
    Bo = _input_columns(model, inp)
    w = 2.0 * np.pi * inp.frequency if inp.has_tone else 0.0
    A_aug = np.zeros((n + 2, n + 2))
    A_aug[:n, :n] = model.A
    A_aug[:n, n:] = Bo
    A_aug[n:, n:] = np.array([[0.0, -w], [w, 0.0]])
    Gam = np.vstack([model.Gamma_ctrl, np.zeros((2, model.Gamma_ctrl.shape[1]))])
    blk = discretize(A_aug, Gam, h)
    d = trace.decisions(np.float64)
    K = trace.K
    total = K * substeps
    z = np.zeros(n + 2)
    z[:n] = 0.0 if x0 is None else x0
    z[n:] = (np.cos(inp.phase), np.sin(inp.phase)) if inp.has_tone else (0.0, 0.0)
    out = np.empty((total + 1, n))
    out[0] = z[:n]
    zero = np.zeros(d.shape[1])
    for q in range(total):
        k = (q - shift) // substeps
        s = d[k] if k >= 0 else zero
        z = blk.Phi @ z + blk.Gamma @ s
        out[q + 1] = z[:n]
    return out


def free_response(model, inp, t_end, substeps_total):
    """Input-only trajectory (controls off) on a uniform grid of ``substeps_total`` steps."""
    n = model.n_states
    Bo = _input_columns(model, inp)
    w = 2.0 * np.pi * inp.frequency if inp.has_tone else 0.0
    A_aug = np.zeros((n + 2, n + 2))
    A_aug[:n, :n] = model.A
    A_aug[:n, n:] = Bo
    A_aug[n:, n:] = np.array([[0.0, -w], [w, 0.0]])
    blk = discretize(A_aug, np.zeros((n + 2, 1)), t_end / substeps_total)
    z = np.zeros(n + 2)
    z[n:] = (np.cos(inp.phase), np.sin(inp.phase)) if inp.has_tone else (0.0, 0.0)
    out = np.empty((substeps_total + 1, n))
    out[0] = z[:n]
    for q in range(substeps_total):
        z = blk.Phi @ z
        out[q + 1] = z[:n]
    return out
