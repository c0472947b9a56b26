#!/usr/bin/env python3
"""
resect-eval command line interface

Every subcommand exits 0 on success. On failure a JSON error summary
({"success": false, "error": <code>, "message": ...}) is printed on stderr
and the exit code is 1.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Mapping, Optional

import pandas as pd

from . import __version__
from .baseline import baseline_segment
from .cohort import default_fold_plan, load_fold_plan, load_manifest
from .errors import InvalidArgumentError, ResectEvalError
from .grid import PREPROCESSING_PRESETS, BinaryMask, preprocess
from .harness import ExperimentConfig, ProtocolSummary, run_experiment
from .metrics import (
    ConfusionCounts,
    consensus_vote,
    detection_metrics,
    interrater_group_summary,
    interrater_table,
)
from .nifti import read_mask, read_probability, read_volume, write_volume
from .phantom import PhantomConfig, generate_phantom_cohort
from .postprocess import (
    DEFAULT_CONNECTIVITY,
    DEFAULT_CUTOFF_ML,
    DEFAULT_MIN_VOXELS,
    DEFAULT_THRESHOLD,
    ensemble_average,
    run_postprocess,
    threshold_sweep,
)
from .preview import render_overlay, write_preview
from .report import (
    FORMATS,
    emit_report,
    emit_tables,
    format_cell,
    hospital_counts_from_results,
    load_patient_table,
    summarize,
)
from .utils import format_verdict

GROUP_COLUMNS = [
    'group', 'raters', 'jaccard_min', 'jaccard_max', 'jaccard_mean', 'dice_min', 'dice_max', 'dice_mean',
]


def _add_rule_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--threshold', type=float, default=DEFAULT_THRESHOLD, help='Binarization threshold (default: 0.5)')
    parser.add_argument('--connectivity', type=int, choices=[6, 18, 26], default=DEFAULT_CONNECTIVITY,
                        help='Component connectivity (default: 26)')
    parser.add_argument('--min-voxels', type=int, default=DEFAULT_MIN_VOXELS,
                        help='Smallest component kept, in voxels (default: 20)')
    parser.add_argument('--cutoff-ml', type=float, default=DEFAULT_CUTOFF_ML,
                        help='GTR/RT residual volume cutoff in ml (default: 0.175)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='resect-eval',
        description='Post-operative residual tumor post-processing and evaluation',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--verbose', '-v', action='store_true', help='Verbose output')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='Generate a synthetic phantom cohort')
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--patients', type=int, default=20, help='Number of patients (default: 20)')
    p.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    p.add_argument('--predictions', type=int, default=0,
                   help='Also write this many perfect prediction maps per patient (default: 0)')

    p = sub.add_parser('baseline', help='Segment one patient with the Otsu baseline')
    p.add_argument('--t1ce', required=True, help='T1w-CE scan')
    p.add_argument('--t1w', help='T1w scan for blood exclusion (omit for configuration A)')
    p.add_argument('--brain', required=True, help='Brain mask')
    p.add_argument('--out', required=True, help='Output probability map (.nii or .nii.gz)')

    p = sub.add_parser('postprocess', help='Binarize, filter and classify one probability map')
    p.add_argument('--prob', required=True, help='Probability map')
    p.add_argument('--out-mask', '--out', dest='out_mask', help='Write the refined mask here')
    p.add_argument('--out-verdict', help='Write the verdict record here as JSON')
    p.add_argument('--json', action='store_true', help='Print the verdict as JSON instead of text')
    _add_rule_arguments(p)

    p = sub.add_parser('ensemble', help='Average several probability maps')
    p.add_argument('--probs', nargs='+', required=True, help='Probability maps on the same grid')
    p.add_argument('--out', required=True, help='Output probability map')

    p = sub.add_parser('evaluate', help='Run an experiment over a cohort manifest')
    p.add_argument('--manifest', required=True, help='Cohort manifest CSV')
    p.add_argument('--config', help='Experiment configuration file (key = value)')
    plan = p.add_mutually_exclusive_group()
    plan.add_argument('--fold-plan', help='Fold plan file; defaults to the manifest fold column')
    plan.add_argument('--default-fold-plan', action='store_true', help='Use the shipped twelve-hospital plan')
    p.add_argument('--workers', type=int, help='Worker threads (overrides the config)')
    p.add_argument('--output-dir', help='Report directory (overrides the config)')
    p.add_argument('--source', choices=['external', 'baseline'], help='Prediction source (overrides the config)')
    p.add_argument('--configuration', choices=list('ABCDE'), help='Input configuration (overrides the config)')

    p = sub.add_parser('interrater', help='Score rater annotations against a reference')
    p.add_argument('--annotations', nargs='+', required=True, help='Rater masks')
    p.add_argument('--names', nargs='+', help='Rater names (default: file stems)')
    p.add_argument('--reference', required=True, help="Reference mask, or 'consensus' for the majority vote")
    p.add_argument('--out', help='Write the table as CSV')
    p.add_argument('--groups', nargs='+',
                   help="Group label per annotation, e.g. novice or expert; '-' leaves a rater ungrouped")
    p.add_argument('--groups-out', help='Write the per-group ranges as CSV')

    p = sub.add_parser('classify-eval', help='GTR/RT classification metrics')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--patients', help='Per-patient CSV written by evaluate')
    source.add_argument('--counts', nargs=4, type=int, metavar=('TP', 'TN', 'FP', 'FN'), help='Confusion counts')

    p = sub.add_parser('report', help='Recompute report tables from a per-patient CSV')
    p.add_argument('--patients', required=True, help='Per-patient CSV written by evaluate')
    p.add_argument('--output-dir', required=True, help='Directory for the tables')
    p.add_argument('--formats', nargs='+', choices=list(FORMATS), default=list(FORMATS), help='Table formats')
    p.add_argument('--cutoff-ml', type=float, default=DEFAULT_CUTOFF_ML, help='Residual volume cutoff in ml')
    p.add_argument('--std-ddof', type=int, choices=[0, 1], default=0, help='0 population std, 1 sample std')

    p = sub.add_parser('sweep', help='Evaluate a probability map over a range of thresholds')
    p.add_argument('--prob', required=True, help='Probability map')
    p.add_argument('--gt', help='Ground-truth mask for Dice')
    p.add_argument('--steps', type=int, default=11, help='Number of thresholds over [0, 1] (default: 11)')
    p.add_argument('--out', help='Write the sweep as CSV')
    p.add_argument('--connectivity', type=int, choices=[6, 18, 26], default=DEFAULT_CONNECTIVITY)
    p.add_argument('--min-voxels', type=int, default=DEFAULT_MIN_VOXELS)
    p.add_argument('--cutoff-ml', type=float, default=DEFAULT_CUTOFF_ML)

    p = sub.add_parser('preview', help='Render a QC slice with mask contours')
    p.add_argument('--image', required=True, help='Scan or probability map')
    p.add_argument('--gt', help='Ground-truth mask (blue contour)')
    p.add_argument('--pred', help='Predicted mask (red contour)')
    p.add_argument('--out', required=True, help='Output PNG')
    p.add_argument('--axis', type=int, choices=[0, 1, 2], default=2, help='Slicing axis (default: 2)')
    p.add_argument('--index', type=int, help='Slice index (default: most foreground)')
    p.add_argument('--colormap', choices=['gray', 'jet', 'inferno'], default='gray', help='Background colormap')

    p = sub.add_parser('preprocess', help='Resample, skull-strip and normalize a scan')
    p.add_argument('--image', required=True, help='Input scan')
    p.add_argument('--brain', required=True, help='Brain mask on the scan grid')
    p.add_argument('--preset', choices=sorted(PREPROCESSING_PRESETS), default='nnunet', help='Model preset')
    p.add_argument('--out', required=True, help='Output scan')
    p.add_argument('--brain-out', help='Write the resampled brain mask here')
    return parser


def _cmd_synth(args: argparse.Namespace) -> None:
    config = PhantomConfig(n_predictions=args.predictions)
    cohort = generate_phantom_cohort(args.out, args.patients, args.seed, config)
    rt = sum(1 for p in cohort if p.gt_volume_ml >= DEFAULT_CUTOFF_ML)
    print(f"Generated {len(cohort)} patients ({rt} RT, {len(cohort) - rt} GTR) in {args.out}")
    print(f"Manifest: {cohort.source}")


def _cmd_baseline(args: argparse.Namespace) -> None:
    t1w = read_volume(args.t1w) if args.t1w else None
    prob = baseline_segment(read_volume(args.t1ce), t1w, read_mask(args.brain))
    write_volume(prob, args.out)
    print(f"Wrote {args.out}")


def _cmd_postprocess(args: argparse.Namespace) -> None:
    mask, verdict = run_postprocess(
        read_probability(args.prob), args.threshold, args.connectivity, args.min_voxels, args.cutoff_ml
    )
    if args.out_mask:
        write_volume(mask, args.out_mask)
    record = verdict.to_dict()
    record['parameters'] = {
        'threshold': args.threshold,
        'connectivity': args.connectivity,
        'min_voxels': args.min_voxels,
        'cutoff_ml': args.cutoff_ml,
    }
    if args.out_verdict:
        Path(args.out_verdict).write_text(json.dumps(record, indent=2) + '\n')
    print(json.dumps(record) if args.json else format_verdict(record))


def _cmd_ensemble(args: argparse.Namespace) -> None:
    write_volume(ensemble_average([read_probability(p) for p in args.probs]), args.out)
    print(f"Averaged {len(args.probs)} maps into {args.out}")


def _print_summaries(summaries: Mapping[str, ProtocolSummary]) -> None:
    for protocol, s in summaries.items():
        print(f"\n[{protocol}] {s.n_patients} patients, folds {', '.join(s.folds)}")
        print(f"   DSC-P: {format_cell(s.dsc_p)}   DSC-TP: {format_cell(s.dsc_tp)}")
        print(f"   Recall: {format_cell(s.recall)}   Precision: {format_cell(s.precision)}   F1: {format_cell(s.f1)}")
        print(f"   Sensitivity: {format_cell(s.sensitivity)}   Specificity: {format_cell(s.specificity)}"
              f"   bAcc: {format_cell(s.balanced_accuracy)}")


def _cmd_evaluate(args: argparse.Namespace) -> None:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {
        'workers': args.workers,
        'output_dir': args.output_dir,
        'prediction_source': args.source,
        'input_configuration': args.configuration,
    }
    config = config.replace(**{k: v for k, v in overrides.items() if v is not None})

    plan = None
    if args.fold_plan:
        plan = load_fold_plan(args.fold_plan)
    elif args.default_fold_plan:
        plan = default_fold_plan()

    report = run_experiment(config, load_manifest(args.manifest), plan)
    written = emit_report(report)
    print(f"Evaluated {len(report.patients)} patients ({len(report.failures)} failed)")
    _print_summaries(report.protocols)
    print(f"\nReport written to {config.output_dir} ({len(written)} files)")


def _cmd_interrater(args: argparse.Namespace) -> None:
    names = args.names or [Path(p).name.split('.')[0] for p in args.annotations]
    if len(names) != len(args.annotations):
        raise InvalidArgumentError(f"Got {len(names)} names for {len(args.annotations)} annotations")
    if args.groups and len(args.groups) != len(names):
        raise InvalidArgumentError(f"Got {len(args.groups)} groups for {len(names)} annotations")
    masks = {name: read_mask(path) for name, path in zip(names, args.annotations)}
    if args.reference == 'consensus':
        reference = consensus_vote(list(masks.values()))
    else:
        reference = read_mask(args.reference)
    rows = interrater_table(masks, reference)
    frame = pd.DataFrame(rows, columns=['rater', 'jaccard', 'dice'])
    if args.out:
        frame.to_csv(args.out, index=False, lineterminator='\n')
    print(frame.to_string(index=False, na_rep='n/a', float_format=lambda v: f'{v:.4f}'))

    if args.groups:
        mapping = {name: group for name, group in zip(names, args.groups) if group != '-'}
        summary = pd.DataFrame(interrater_group_summary(rows, mapping), columns=GROUP_COLUMNS)
        if args.groups_out:
            summary.to_csv(args.groups_out, index=False, lineterminator='\n')
        print()
        print(summary.to_string(index=False, na_rep='n/a', float_format=lambda v: f'{v:.4f}'))


def _cmd_classify_eval(args: argparse.Namespace) -> None:
    if args.counts:
        counts = ConfusionCounts(*args.counts)
    else:
        results = [r for r in load_patient_table(args.patients) if r.success]
        counts = ConfusionCounts.from_statuses(r.detection() for r in results)
    metrics = detection_metrics(counts)
    print(f"TP={counts.tp} TN={counts.tn} FP={counts.fp} FN={counts.fn}")
    for name, value in (
        ('Sensitivity', metrics.sensitivity),
        ('Specificity', metrics.specificity),
        ('bAcc', metrics.balanced_accuracy),
        ('Precision', metrics.precision),
        ('F1', metrics.f1),
    ):
        print(f"   {name}: {'n/a' if value is None else f'{100 * value:.2f}'}")


def _cmd_report(args: argparse.Namespace) -> None:
    results = load_patient_table(args.patients)
    summaries = summarize(results, args.cutoff_ml, args.std_ddof)
    counts = hospital_counts_from_results(results, args.cutoff_ml)
    written = emit_tables(summaries, counts, args.output_dir, args.formats, Path(args.patients).stem)
    _print_summaries(summaries)
    print(f"\nWrote {len(written)} tables to {args.output_dir}")


def _cmd_sweep(args: argparse.Namespace) -> None:
    gt = read_mask(args.gt) if args.gt else None
    rows = threshold_sweep(
        read_probability(args.prob), gt, args.steps, args.connectivity, args.min_voxels, args.cutoff_ml
    )
    frame = pd.DataFrame(rows)
    if args.out:
        frame.to_csv(args.out, index=False, lineterminator='\n')
    print(frame.to_string(index=False, na_rep='n/a'))


def _read_overlay_mask(path: Optional[str]) -> Optional[BinaryMask]:
    return read_mask(path) if path else None


def _cmd_preview(args: argparse.Namespace) -> None:
    canvas = render_overlay(
        read_volume(args.image),
        _read_overlay_mask(args.gt),
        _read_overlay_mask(args.pred),
        args.axis,
        args.index,
        args.colormap,
    )
    write_preview(canvas, args.out)
    print(f"Wrote {args.out}")


def _cmd_preprocess(args: argparse.Namespace) -> None:
    image, brain = preprocess(read_volume(args.image), read_mask(args.brain), args.preset)
    write_volume(image, args.out)
    if args.brain_out:
        write_volume(brain, args.brain_out)
    print(f"Preprocessed ({args.preset}) to shape {image.geometry.shape}, spacing {image.geometry.spacing}")


COMMANDS = {
    'synth': _cmd_synth,
    'baseline': _cmd_baseline,
    'postprocess': _cmd_postprocess,
    'ensemble': _cmd_ensemble,
    'evaluate': _cmd_evaluate,
    'interrater': _cmd_interrater,
    'classify-eval': _cmd_classify_eval,
    'report': _cmd_report,
    'sweep': _cmd_sweep,
    'preview': _cmd_preview,
    'preprocess': _cmd_preprocess,
}


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entry point"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        COMMANDS[args.command](args)
    except ResectEvalError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({'success': False, 'error': 'io-error', 'message': str(e)}), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
