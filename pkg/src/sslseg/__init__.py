"""Semi-supervised fine-tuning of a stacked-autoencoder pixel classifier
for building detection in aerial CIR + nDSM imagery."""
from .features import PatchDataset, build_dataset, compute_ndvi
from .losses import LOSS_KINDS, SSLConfig, assemble_targets, loss_value_and_grad
from .nn import MlpModel, TrainConfig, finetune, pretrain_encoders
from .pipeline import PipelineConfig, run_pipeline, run_stage
from .raster_io import BandStack, LabelMask, ModelBundle
from .synth import SyntheticSceneSpec, synth_generate

__version__ = "0.1.0"
