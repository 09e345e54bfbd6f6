"""fineflow: deterministic fine-tuning for small-image classification.

The pipeline mirrors a fixed recipe end to end: decode -> resize -> sharpen
-> color-convert -> scale, equal-weight affine augmentation, a compound-
scaled small-CNN backbone with a replaceable classification head, Adam
training with a pinned seed, and a metrics suite (confusion matrix, macro
precision/recall/F1, percent-scale MAE/MSE/RMSE).
"""

from .augment import AffineSpec, AugmentConfig, affine_transform, build_affine, sample_augmentation
from .data import (
    Dataset,
    SplitIndices,
    ingest_directory,
    kfold_split,
    stratified_split,
    synth_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DecodeError,
    FineFlowError,
    NumericError,
    ShapeError,
)
from .image import ImageU8, bgr_to_rgb, decode_image, resize_bilinear, scale_to_unit, sharpen
from .layers import (
    AdamState,
    BatchNormState,
    adam_step,
    batch_norm,
    conv2d,
    dense,
    dropout,
    global_pool,
    relu,
    softmax,
    sparse_ce_loss,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    accuracy,
    build_report,
    confusion_matrix,
    index_error_metrics,
    precision_recall_f1,
    write_confusion_csv,
    write_report,
)
from .model import (
    BackboneConfig,
    HeadConfig,
    Model,
    PipelineConfig,
    build_backbone,
    forward,
    predict,
    preset_backbone,
    set_trainable,
    truncate_and_attach_head,
)
from .rng import RngState, derive, stream
from .tensor import GradTape, Tensor, backward, elementwise, grad_check, matmul, reduce, tensor_new
from .train import (
    TrainConfig,
    TrainLog,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    pretrain_then_finetune,
    train,
)

__version__ = "0.1.0"
