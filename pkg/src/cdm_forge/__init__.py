"""Few-shot generation by modelling class-conditional feature distributions.

A feature extractor and a conditional diffusion denoiser are trained on seen
classes; an unseen class gets a Gaussian in feature space from a handful of
support items, refined by inversion through the frozen denoiser, and new
items are sampled from it.
"""

from .calibration import (ClassStats, InversionConfig, UnseenDistribution, calibrate, calibrate_variance,
                          compute_seen_stats, generate_unseen, invert_optimize, nearest_seen_classes,
                          sample_conditional, support_mean)
from .config import RunConfig, load_config, parse_config
from .diffusion import (NoiseSchedule, SamplerConfig, cfg_predict, ddim_sample, linear_beta_schedule, loss_simple,
                        loss_total, loss_vlb, q_sample, train_ldm)
from .errors import CDMError
from .metrics import MetricReport, diversity_score, fit_gaussian, frechet_distance
from .rng import SeededRNG, derive_seed

__version__ = "0.1.0"
