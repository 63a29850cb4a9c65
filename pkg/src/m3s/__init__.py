"""Meta-sampling (M3S) training for multimodal prediction with missing modalities."""

from .dataproc import Dataset, MultimodalSample, SyntheticConfig, freeze_masks, generate_synthetic, load_csv, save_csv
from .masking import MaskPlan, MissingSpec, apply_mask, plan_mask, sample_rates, transform_batch
from .model import ModelConfig, forward, init_params
from .trainers import MetaConfig, TrainLog, train_m3s, train_orig, train_spl_trn

__version__ = "0.1.0"
