"""qsegment: a small encoder-decoder vessel segmenter with an int8 engine.

Arrays are plain NCHW numpy tensors throughout.
"""
from .data import DatasetIndex, Sample, load_chase, synth_vessels, synthetic_index
from .loss import LossOutput, loss, loss_and_grad, weight_map
from .metrics import MetricReport, auc, confusion, dice_accuracy, evaluate
from .model import ModelGraph, build_model, forward_float, layer_table, mac_count
from .qsm import QSMError, load_model, save_model
from .quant import QuantizationError, calibrate, fold_batchnorm, forward_quantized, quantize_model, quantize_pipeline
from .train import TrainConfig, lr_schedule, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "DatasetIndex", "Sample", "load_chase", "synth_vessels", "synthetic_index",
    "LossOutput", "loss", "loss_and_grad", "weight_map",
    "MetricReport", "auc", "confusion", "dice_accuracy", "evaluate",
    "ModelGraph", "build_model", "forward_float", "layer_table", "mac_count",
    "QSMError", "load_model", "save_model",
    "QuantizationError", "calibrate", "fold_batchnorm", "forward_quantized", "quantize_model", "quantize_pipeline",
    "TrainConfig", "lr_schedule", "sgd_step", "train",
]
