"""Per-face attributable watermarking: embed identities into every face of a
multi-face image, trace them back after benign processing, and flag the faces
that were swapped."""

from .errors import NonFiniteLossError, ValidationError
from .geometry import FaceBox, PatchBatch, crop_resample, iou, paste_residual, to_absolute, to_normalized
from .models import MessageMatrix, ModelBundle, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, desk_config, full_config, train

__version__ = "0.1.0"
