"""Benchmark harness for earlobe-crease (DELC) detection: dataset tooling,
seeded augmentation, backbone feature extraction, from-scratch classifier-head
training, and repeated stratified cross-validation reports."""

from .augment import (AugmentConfig, apply_brightness, apply_contrast,
                      apply_hflip, apply_motion_blur, apply_shift_scale_rotate,
                      augment_class_to_count)
from .backbone import (BackboneSpec, FeatureCache, FeatureVector, OnnxBackbone,
                       StubBackbone, cache_read, cache_write, extract,
                       preprocess, registry, stub_extract)
from .classifier import (AdamState, Batch, MLPParams, TrainConfig, adam_step,
                         backward, bce_loss, forward, init_params, predict,
                         train)
from .dataset import (DatasetManifest, FoldPlan, ImageRecord, ShapeStats,
                      compute_shape_stats, filter_negatives, load_manifest,
                      make_fold_plans, save_manifest, synth_generate)
from .evaluation import (BackboneReport, ComparisonReport, ConfusionMatrix,
                         confusion, overfit_gap, relative_report, run_cv,
                         throughput)

__version__ = "0.1.0"
