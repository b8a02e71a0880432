"""Forecasting irregular multivariate time series with a masked-autoencoder backbone."""

from .backbone import BackboneConfig, MAEBackbone, PlainTransformerBackbone, tpe, tpe_table
from .batching import Batch, PackedTasks, SectionGrid
from .checkpoint import (
    KeyMap,
    LoadManifest,
    export_backbone_checkpoint,
    load_model_state,
    load_pretrained_checkpoint,
    save_model,
)
from .data import (
    ForecastTask,
    ImtsDataset,
    ImtsSample,
    NormalizerStats,
    Schema,
    apply_normalizer,
    build_forecast_tasks,
    few_shot_subset,
    fit_normalizer,
    invert_normalizer,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .errors import CheckpointError, ConfigError, DataConflictError, ParseError
from .graph import ChannelGraph, compensate
from .head import DirectProjectionHead, QueryHead, match_patch_index
from .metrics import mae, mse
from .model import VIMTS, ModelConfig, predict_batch
from .patchify import TTCN, PatchGrid, Patchify, TimeEmbedding, assemble_patch_grid, divide_sections, section_index
from .synthetic import GeneratorConfig, SyntheticOracle, generate_synthetic
from .training import (
    TrainPlan,
    TrainingDiverged,
    apply_freeze_policy,
    evaluate,
    finetune_loss,
    sample_mask,
    ssl_loss,
    train_stage,
)

__version__ = "0.1.0"
