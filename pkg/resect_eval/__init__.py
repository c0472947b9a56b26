"""
resect-eval - Residual tumor evaluation on early post-operative MRI

Post-processing of segmentation probability maps (binarization, connected
component filtering, residual volume, GTR/RT classification), the
validation metric battery (Dice/Jaccard, patient-wise detection,
fold-pooled statistics, inter-rater consensus) and an experiment harness
that runs it all over a cohort manifest.

Example usage:
    from resect_eval import ExperimentConfig, generate_phantom_cohort, run_experiment
    from resect_eval.cohort import load_fold_plan
    from resect_eval.report import emit_report

    cohort = generate_phantom_cohort('phantoms', n_patients=20, seed=7)
    plan = load_fold_plan('phantoms/fold_plan.cfg')
    report = run_experiment(ExperimentConfig(workers=4), cohort, plan)
    emit_report(report, 'results')
"""

__version__ = "1.0.0"
__author__ = "resect-eval developers"

from .errors import ResectEvalError
from .grid import BinaryMask, GridGeometry, VoxelGrid
from .nifti import read_mask, read_volume, write_volume
from .postprocess import run_postprocess
from .metrics import dice, jaccard
from .cohort import load_manifest
from .phantom import generate_phantom_cohort
from .harness import ExperimentConfig, ExperimentRunner, run_experiment
from . import utils

__all__ = [
    "BinaryMask",
    "ExperimentConfig",
    "ExperimentRunner",
    "GridGeometry",
    "ResectEvalError",
    "VoxelGrid",
    "dice",
    "generate_phantom_cohort",
    "jaccard",
    "load_manifest",
    "read_mask",
    "read_volume",
    "run_experiment",
    "run_postprocess",
    "utils",
    "write_volume",
]
