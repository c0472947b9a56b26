#!/usr/bin/env python3
"""
Example usage of resect-eval in user projects

This demonstrates how to use the resect-eval package in external projects
after installing it with: pip install resect-eval
"""

import tempfile
from pathlib import Path

from resect_eval import ExperimentConfig, ExperimentRunner, generate_phantom_cohort, read_mask, run_postprocess
from resect_eval.cohort import load_fold_plan
from resect_eval.metrics import ConfusionCounts, detection_metrics
from resect_eval.nifti import read_probability
from resect_eval.phantom import FOLD_PLAN_NAME, PhantomConfig
from resect_eval.report import emit_report, format_cell


def basic_usage_example(workdir: Path) -> None:
    """Generate a phantom cohort and score it with the Otsu baseline"""
    print("=== Basic Usage Example ===")

    cohort = generate_phantom_cohort(workdir / 'phantoms', n_patients=10, seed=7)
    plan = load_fold_plan(workdir / 'phantoms' / FOLD_PLAN_NAME)
    print(f"✅ Generated {len(cohort)} patients from {len(cohort.hospitals)} hospitals")

    config = ExperimentConfig(output_dir=str(workdir / 'results'))
    with ExperimentRunner(config, workers=2) as runner:
        report = runner.run(cohort, plan)

    for protocol, summary in report.protocols.items():
        print(f"📊 {protocol}: DSC-P {format_cell(summary.dsc_p)}, bAcc {format_cell(summary.balanced_accuracy)}")
    written = emit_report(report)
    print(f"💾 Report written ({len(written)} files)")


def single_patient_example(workdir: Path) -> None:
    """Run the post-processing pipeline on one probability map"""
    print("\n=== Single Patient Example ===")

    cohort = generate_phantom_cohort(
        workdir / 'single', n_patients=1, seed=3, config=PhantomConfig(n_predictions=1)
    )
    patient = next(iter(cohort))
    mask, verdict = run_postprocess(read_probability(patient.path('pred_0')), threshold=0.5, min_voxels=20)
    gt = read_mask(patient.path('gt'))
    print(f"📋 {patient.patient_id}: {verdict.classification}, residual {verdict.residual_volume_ml:.3f} ml")
    print(f"📋 GT volume {gt.volume_ml():.3f} ml, refined mask {mask.count} voxels")


def classification_example() -> None:
    """Classification metrics straight from confusion counts"""
    print("\n=== Classification Example ===")

    metrics = detection_metrics(ConfusionCounts(tp=43, tn=14, fp=8, fn=8))
    print(f"Sensitivity: {100 * metrics.sensitivity:.2f}")
    print(f"Specificity: {100 * metrics.specificity:.2f}")
    print(f"bAcc: {100 * metrics.balanced_accuracy:.2f}")


if __name__ == "__main__":
    print("resect-eval Usage Examples")
    print("=" * 50)

    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        basic_usage_example(workdir)
        single_patient_example(workdir)
    classification_example()
