"""Quadrature control-bounded ADC simulation and estimation toolkit."""

__version__ = "0.1.0"

from .numerics import InfeasibleSpecError, design_fir, discretize, expm, rotation  # noqa: F401
from .control import (  # noqa: F401
    QuadratureControlParams, LowpassControlParams, derive_control_params,
    lowpass_control_params, verify_stability_conditions,
)
from .system import (  # noqa: F401
    LeapfrogDesign, StateSpaceModel, PerturbationSpec, PoleError,
    leapfrog_lowpass, quadrature_extend, transfer_function, predicted_snr_db,
    opamp_augment, perturb,
)
