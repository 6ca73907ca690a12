"""Analog-system models: low-pass leapfrog, its quadrature extension and
op-amp augmented variants, plus transfer functions, nominal SNR prediction,
mismatch perturbation and JSON persistence."""

from dataclasses import dataclass, field, replace
import json
import math

import numpy as np
from scipy.linalg import matrix_balance

from .control import LowpassControlParams, QuadratureControlParams, derive_control_params

PARAMETER_CLASSES = (
    "alpha", "beta", "omega_n", "kappa_phi", "bar_kappa_phi",
    "tilde_kappa_phi", "bar_tilde_kappa_phi",
)


class PoleError(ArithmeticError):
    """``i*omega`` coincides with an undamped pole of the model."""

    def __init__(self, omega):
        super().__init__(f"i*omega with omega={float(omega):g} hits a pole; offset omega slightly")
        self.omega = float(omega)


@dataclass(frozen=True)
class LeapfrogDesign:
    order_N: int
    osr: int
    omega_B: float
    beta: float
    alpha: float
    kappa: float
    f_s: float
    T_s: float

    @property
    def f_B(self):
        return self.omega_B / (2.0 * math.pi)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StateSpaceModel:
    """Linear analog system with local digital controls.

    ``A`` (n x n), ``B`` (n x m_u) and ``Gamma_ctrl`` (n x m_s) are in 1/s.
    ``observation`` (m_ctrl x n) maps states to comparator inputs for the
    quantized control columns; the first ``n_reference`` columns of
    ``Gamma_ctrl`` are externally driven reference controls with no
    comparator. ``param_map`` lists, per matrix entry, which physical
    parameter class it carries so mismatch can be applied entry by entry.
    """

    A: np.ndarray
    B: np.ndarray
    Gamma_ctrl: np.ndarray
    observation: np.ndarray
    output_rows: tuple
    design: LeapfrogDesign
    kind: str = "lowpass"
    omega_n: float = 0.0
    n_reference: int = 0
    input_labels: tuple = ()
    control_labels: tuple = ()
    param_map: tuple = field(default=(), repr=False)
    state_map: tuple = field(default=(), repr=False)

    def __post_init__(self):
        for name in ("A", "B", "Gamma_ctrl", "observation"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.Gamma_ctrl.shape[0] != n:
            raise ValueError("inconsistent state dimension")
        if self.observation.shape != (self.n_controls, n):
            raise ValueError("observation must be (controls x states)")
        if not self.state_map:
            object.__setattr__(self, "state_map", tuple(range(n)))

    @property
    def n_states(self):
        return self.A.shape[0]

    @property
    def n_inputs(self):
        return self.B.shape[1]

    @property
    def n_controls(self):
        """Number of comparator-driven control channels."""
        return self.Gamma_ctrl.shape[1] - self.n_reference

    @property
    def is_quadrature(self):
        return self.kind == "quadrature"

    @property
    def band_center(self):
        return self.omega_n

    def observed_states(self):
        """Indices of the states the comparators look at (stage outputs)."""
        return self.state_map


def leapfrog_lowpass(order_N, osr, omega_B):
    """Nominal low-pass leapfrog (design, model).

    ``beta = omega_B * osr / (2 pi)``, ``kappa = -beta`` and
    ``alpha = omega_B**2 / (4 kappa)``, which makes alpha negative.
    """
    if order_N < 1 or osr < 1 or not omega_B > 0:
        raise ValueError("need order_N >= 1, osr >= 1 and omega_B > 0")
    beta = omega_B * osr / (2.0 * math.pi)
    kappa = -beta
    alpha = omega_B ** 2 / (4.0 * kappa)
    f_s = 2.0 * beta
    design = LeapfrogDesign(order_N, osr, omega_B, beta, alpha, kappa, f_s, 1.0 / f_s)

    N = order_N
    A = np.zeros((N, N))
    pmap = []
    for i in range(N - 1):
        A[i, i + 1] = alpha
        A[i + 1, i] = beta
        pmap += [("alpha", "A", i, i + 1), ("beta", "A", i + 1, i)]
    B = np.zeros((N, 1))
    B[0, 0] = beta
    pmap.append(("beta", "B", 0, 0))
    Gamma = kappa * np.eye(N)
    pmap += [("kappa_phi", "Gamma_ctrl", i, i) for i in range(N)]
    model = StateSpaceModel(
        A=A, B=B, Gamma_ctrl=Gamma, observation=np.eye(N), output_rows=(N - 1,),
        design=design, kind="lowpass", input_labels=("u",),
        control_labels=tuple(f"s{i + 1}" for i in range(N)), param_map=tuple(pmap),
    )
    return design, model


def lowpass_params(model, tau_dc=0.0):
    d = model.design
    return LowpassControlParams(kappa=d.kappa, f_s=d.f_s, T_s=d.T_s, tau_dc=tau_dc)


def quadrature_extend(lp, omega_n, params=None):
    """Stack two copies of a low-pass leapfrog and couple them by +-omega_n.

    State order is ``(x_1..x_N, xbar_1..xbar_N)``, inputs ``(u, ubar)`` and
    controls ``(s_1..s_N, sbar_1..sbar_N)``. Without explicit ``params`` the
    control is derived for ``phi_kappa = 0`` and ``tau_dc = 0``.
    """
    if lp.kind != "lowpass" or lp.n_reference:
        raise ValueError("quadrature_extend needs a plain low-pass model")
    design = lp.design
    if not 0.0 <= omega_n < math.pi * design.f_s:
        raise ValueError(f"omega_n={omega_n} outside [0, pi*f_s)")
    if params is None:
        params = derive_control_params(design.beta, omega_n)
    N = design.order_N
    A_lp = np.asarray(lp.A)
    A = np.zeros((2 * N, 2 * N))
    A[:N, :N] = A_lp
    A[N:, N:] = A_lp
    pmap = []
    for cls, mat, i, j in lp.param_map:
        if mat == "A":
            pmap += [(cls, "A", i, j), (cls, "A", N + i, N + j)]
    for i in range(N):
        A[i, N + i] = -omega_n
        A[N + i, i] = omega_n
        pmap += [("omega_n", "A", i, N + i), ("omega_n", "A", N + i, i)]
    B = np.zeros((2 * N, 2))
    B[:N, 0] = np.asarray(lp.B)[:, 0]
    B[N:, 1] = np.asarray(lp.B)[:, 0]
    for cls, mat, i, j in lp.param_map:
        if mat == "B":
            pmap += [(cls, "B", i, 0), (cls, "B", N + i, 1)]

    K = params.control_matrix
    O = params.observation_matrix
    Gamma = np.zeros((2 * N, 2 * N))
    obs = np.zeros((2 * N, 2 * N))
    for i in range(N):
        idx = (i, N + i)
        for r in range(2):
            for c in range(2):
                Gamma[idx[r], idx[c]] = K[r, c]
                obs[idx[r], idx[c]] = O[r, c]
        pmap += [("kappa_phi", "Gamma_ctrl", i, i), ("kappa_phi", "Gamma_ctrl", N + i, N + i),
                 ("bar_kappa_phi", "Gamma_ctrl", i, N + i), ("bar_kappa_phi", "Gamma_ctrl", N + i, i),
                 ("tilde_kappa_phi", "observation", i, i),
                 ("tilde_kappa_phi", "observation", N + i, N + i),
                 ("bar_tilde_kappa_phi", "observation", i, N + i),
                 ("bar_tilde_kappa_phi", "observation", N + i, i)]
    return StateSpaceModel(
        A=A, B=B, Gamma_ctrl=Gamma, observation=obs, output_rows=(N - 1, 2 * N - 1),
        design=design, kind="quadrature", omega_n=float(omega_n),
        input_labels=("u", "ubar"),
        control_labels=tuple(f"s{i + 1}" for i in range(N)) + tuple(f"sbar{i + 1}" for i in range(N)),
        param_map=tuple(pmap),
    )


_POLE_RTOL = 1e-11


def _pole_hits(A, omegas):
    # smallest singular value of (i w I - A) is its absolute distance to
    # singularity; compare it against |w| or, near DC, the geometric-mean
    # singular value of A (robust to the stiff op-amp augmented models)
    sv = np.linalg.svd(A, compute_uv=False)
    sv = sv[sv > 0]
    ref = math.exp(np.mean(np.log(sv))) if sv.size else 1.0
    M = 1j * omegas[:, None, None] * np.eye(A.shape[0])[None] - A[None]
    smin = np.linalg.svd(M, compute_uv=False)[:, -1]
    return smin <= _POLE_RTOL * np.maximum(np.abs(omegas), ref)


def frequency_response(A, columns, omegas, nudge=None):
    """Solve ``(i w I - A) X = columns`` for every ``w`` in ``omegas``.

    Returns an array of shape ``(len(omegas), n, k)``. A frequency where
    ``i w I - A`` is singular to within ``1e-11`` (relative) sits on an
    undamped pole and raises :class:`PoleError`, unless ``nudge`` is given,
    in which case it is offset by ``nudge`` rad/s.
    """
    A = np.asarray(A, dtype=float)
    columns = np.asarray(columns)
    if columns.ndim == 1:
        columns = columns[:, None]
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float)).copy()
    # exact power-of-two similarity, improves the solves on badly scaled models
    A, (d, _) = matrix_balance(A, permute=False, separate=True)
    hit = _pole_hits(A, omegas)
    if np.any(hit):
        if nudge is None:
            raise PoleError(omegas[hit][0])
        omegas[hit] += nudge
    M = 1j * omegas[:, None, None] * np.eye(A.shape[0])[None] - A[None]
    rhs = np.broadcast_to((columns / d[:, None]).astype(complex), (len(omegas),) + columns.shape)
    return d[None, :, None] * np.linalg.solve(M, rhs)


def transfer_function(model, omega, input=0, source="input"):
    """Response of every state to one input (or control) channel at ``i*omega``.

    ``source`` is ``"input"`` for the signal inputs (columns of ``B``) or
    ``"control"`` for columns of ``Gamma_ctrl``.
    """
    cols = model.B if source == "input" else model.Gamma_ctrl
    if not np.isfinite(omega):
        raise ValueError("omega must be finite")
    return frequency_response(model.A, cols[:, input], [omega])[0, :, 0]


def output_response(model, omegas, nudge=None):
    """Complex responses of the observed output to the inputs and controls.

    For a low-pass model the output is ``x_N``; for a quadrature model it is
    ``z = x_N + i xbar_N``. Returns ``(G_u, G_s)`` where ``G_u`` has shape
    ``(len(omegas),)`` and ``G_s`` has shape ``(len(omegas), m_s)``. For a
    quadrature model ``G_u`` is the response to the analytic input
    ``u + i ubar``, i.e. ``(G_zu - i G_zubar) / 2``.
    """
    cols = np.hstack([model.B, model.Gamma_ctrl])
    X = frequency_response(model.A, cols, omegas, nudge=nudge)
    if model.is_quadrature:
        z = X[:, model.output_rows[0], :] + 1j * X[:, model.output_rows[1], :]
        G_u = 0.5 * (z[:, 0] - 1j * z[:, 1])
    else:
        z = X[:, model.output_rows[0], :]
        G_u = z[:, 0]
    return G_u, z[:, model.n_inputs:]


def predicted_snr_db(order_N, osr, xi=1.0):
    """Nominal leapfrog SNR ``g(N) (OSR / 2 pi)**(2N) / xi`` with ``g(N) = 2**(2N-1)``."""
    if not xi > 0:
        raise ValueError("xi must be positive")
    return 10.0 * (math.log10(2.0 ** (2 * order_N - 1)) + 2 * order_N * math.log10(osr / (2.0 * math.pi))
                   - math.log10(xi))


def opamp_augment(model, k_A, omega_A):
    """Replace each ideal integrator by an inverting op-amp integrator.

    The op-amp has ``A(s) = k_A omega_A / (s + omega_A)``. Every original
    state becomes a pair: the integrating capacitor voltage ``c`` and the
    op-amp output ``y`` (which drives all downstream resistors, comparators
    and the observed output). With the virtual-ground error ``v = c - y``:

        dc/dt = sum_j A_lj y_j + B u + Gamma s - G_l v
        dy/dt = k_A omega_A v - omega_A y

    where ``G_l`` is the total input conductance (sum of absolute gains) on
    integrator ``l``. States are ordered ``(c_1..c_n, y_1..y_n)``.
    """
    if not (k_A > 0 and omega_A > 0):
        raise ValueError("k_A and omega_A must be positive")
    n = model.n_states
    A0 = np.asarray(model.A)
    G = (np.sum(np.abs(A0), axis=1) + np.sum(np.abs(model.B), axis=1)
         + np.sum(np.abs(model.Gamma_ctrl), axis=1))
    A = np.zeros((2 * n, 2 * n))
    A[:n, :n] = -np.diag(G)
    A[:n, n:] = A0 + np.diag(G)
    A[n:, :n] = k_A * omega_A * np.eye(n)
    A[n:, n:] = -(omega_A * (1.0 + k_A)) * np.eye(n)
    B = np.vstack([model.B, np.zeros_like(model.B)])
    Gamma = np.vstack([model.Gamma_ctrl, np.zeros_like(model.Gamma_ctrl)])
    obs = np.hstack([np.zeros_like(model.observation), model.observation])
    state_map = tuple(n + s for s in model.state_map)
    return replace(model, A=A, B=B, Gamma_ctrl=Gamma, observation=obs,
                   output_rows=tuple(n + r for r in model.output_rows),
                   param_map=(), state_map=state_map)


@dataclass(frozen=True)
class PerturbationSpec:
    relative_bound: float = 0.10
    targets: frozenset = frozenset(PARAMETER_CLASSES)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.relative_bound < 0.5:
            raise ValueError("relative_bound must lie in [0, 0.5)")
        unknown = set(self.targets) - set(PARAMETER_CLASSES)
        if unknown:
            raise ValueError(f"unknown parameter classes {sorted(unknown)}")
        object.__setattr__(self, "targets", frozenset(self.targets))


def perturb(model, spec, rng=None):
    """Draw an independent ``(1 + delta)``, ``delta ~ U(-r, r)``, for every
    parameter occurrence in the model and apply it to the targeted classes.

    One draw is consumed per occurrence in a fixed order whether or not the
    class is targeted, so results for a given seed do not depend on the
    target set. Structural zeros are left untouched.
    """
    if not model.param_map:
        raise ValueError("model carries no parameter map (perturb before augmenting)")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    mats = {name: np.array(getattr(model, name)) for name in ("A", "B", "Gamma_ctrl", "observation")}
    r = spec.relative_bound
    deltas = rng.uniform(-r, r, size=len(model.param_map)) if r > 0 else np.zeros(len(model.param_map))
    for (cls, mat, i, j), d in zip(model.param_map, deltas):
        if cls in spec.targets and mats[mat][i, j] != 0.0:
            mats[mat][i, j] *= 1.0 + d
    return replace(model, **mats)


def model_to_dict(model):
    d = model.design
    return {
        "kind": model.kind,
        "A": np.asarray(model.A).tolist(),
        "B": np.asarray(model.B).tolist(),
        "Gamma_ctrl": np.asarray(model.Gamma_ctrl).tolist(),
        "observation": np.asarray(model.observation).tolist(),
        "output_rows": list(model.output_rows),
        "state_map": list(model.state_map),
        "omega_n": model.omega_n,
        "n_reference": model.n_reference,
        "input_labels": list(model.input_labels),
        "control_labels": list(model.control_labels),
        "param_map": [list(p) for p in model.param_map],
        "design": {k: getattr(d, k) for k in d.__dataclass_fields__},
    }


def model_from_dict(doc):
    design = LeapfrogDesign(**doc["design"])
    return StateSpaceModel(
        A=np.array(doc["A"], dtype=float), B=np.array(doc["B"], dtype=float),
        Gamma_ctrl=np.array(doc["Gamma_ctrl"], dtype=float),
        observation=np.array(doc["observation"], dtype=float),
        output_rows=tuple(doc["output_rows"]), design=design, kind=doc["kind"],
        omega_n=float(doc["omega_n"]), n_reference=int(doc["n_reference"]),
        input_labels=tuple(doc["input_labels"]), control_labels=tuple(doc["control_labels"]),
        param_map=tuple(tuple(p) for p in doc["param_map"]),
        state_map=tuple(doc["state_map"]),
    )


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
