from .backbone import FrozenVisualBackbone, parameter_hash
from .encoders import ActionEncoder, FilmFusion, MLPTokenizer, Stage1Encoders
from .dynamics import CrossAttentionBlock, DynamicsCore, draw_masks
from .foresight import (DegenerateTargetError, ForesightHead, ForesightOutput,
                        latent_loss, normalize_target, pool_target_tokens, recon_loss)
from .stage1 import Stage1Losses, Stage1Model
from .policy import (ActionNormalizer, DenoiserMLP, DiffusionPolicy, DiffusionSchedule,
                     ObservationEncoders, apply_condition_mode, build_schedule,
                     ddpm_sample, forward_noise)
