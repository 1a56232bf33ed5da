"""Multi-stage deformable image registration that interpolates the source once.

Stages compose their incremental deformation fields and the source image is
warped a single time with the composition, instead of re-warping the previous
stage's output.
"""

from .energy import LossConfig, LossValue, bending_energy, mse, ncc_loss, total_loss
from .errors import (DataError, DegenerateInputError, DimensionError, DivergenceError,
                     FormatError, ParameterError, RegistrationError)
from .grid import (DeformationField, Image, LabelMap, StageTrace, load_field, load_image,
                   load_labels, save_field, save_image, save_labels, zero_field)
from .metrics import MetricsReport, evaluate
from .pipeline import (AdamConfig, PipelineConfig, RegistrationResult, blur_stress,
                       estimate_incremental_field, run_pipeline)
from .sampler import compose_fields, warp_gradient, warp_image, warp_labels
from .synth import (CALIBRATED_PRESET, LARGE_DEFORMATION_PRESET, SynthConfig, make_pair,
                    phantom)

__version__ = "0.1.0"
