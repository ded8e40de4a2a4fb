"""Multi-resolution diffeomorphic image registration with stationary velocity fields."""

from .autodiff import Parameter, Tape, Var, grad_check
from .engine import RegistrationConfig, RegistrationResult, lambda_sweep, register, train
from .evalsynth import SynthPair, dice, endpoint_error, synth_pair, synth_suite, warp_labels
from .fields import avg_pool_down, build_pyramid, gaussian_smooth, sample_linear, upsample_linear, warp
from .objective import mdreg_loss, ncc, tv_l1
from .regnet import cascade_forward, init_params
from .transform import (DeformationField, compose, count_nonpositive_jacobian, integrate_svf, invert_svf,
                        jacobian_determinant)

__version__ = "0.1.0"
