"""
Report emission

The per-patient CSV is the source of truth: every cohort table cell can be
recomputed from it alone (``load_patient_table`` + ``summarize``).
"""

import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import pandas as pd

from .cohort import CohortManifest, HospitalCounts, PatientRecord
from .errors import InvalidArgumentError, ManifestError, VolumeIOError
from .harness import PROTOCOLS, MetricReport, PatientResult, ProtocolSummary, summarize_results
from .metrics import PooledStat
from .postprocess import DEFAULT_CUTOFF_ML

logger = logging.getLogger(__name__)

FORMATS = ('csv', 'markdown')
PATIENT_COLUMNS = tuple(f.name for f in fields(PatientResult))
PATIENTS_FILE = 'patients.csv'

SEGMENTATION_COLUMNS = ('Protocol', 'Patients', 'DSC-P', 'DSC-TP', 'Recall', 'Precision', 'F1')
CLASSIFICATION_COLUMNS = ('Protocol', 'Patients', 'Sensitivity', 'Specificity', 'bAcc', 'TP', 'TN', 'FP', 'FN')
COHORT_COLUMNS = ('Hospital', 'Patients', 'RT', 'GTR', 'RT ratio (%)')

_FLOAT_COLUMNS = ('gt_volume_ml', 'pred_volume_ml', 'dice', 'jaccard', 'preop_volume_ml', 'eor')
_BOOL_COLUMNS = ('success', 'eor_clamped')
_INT_COLUMNS = ('n_predictions',)

PathLike = Union[str, Path]


def format_cell(stat: PooledStat, scale: float = 100.0) -> str:
    """
    Table cell for a pooled statistic

    Two decimals after scaling; no ± for a single value; "n/a (n=0)" when
    nothing was defined.
    """
    if not stat.defined:
        return 'n/a (n=0)'
    mean = stat.mean * scale
    if stat.n == 1:
        return f'{mean:.2f}'
    return f'{mean:.2f}±{stat.std * scale:.2f}'


def segmentation_rows(summaries: Mapping[str, ProtocolSummary]) -> List[List[str]]:
    rows = []
    for protocol in PROTOCOLS:
        if protocol not in summaries:
            continue
        s = summaries[protocol]
        rows.append([
            protocol, str(s.n_patients),
            format_cell(s.dsc_p), format_cell(s.dsc_tp),
            format_cell(s.recall), format_cell(s.precision), format_cell(s.f1),
        ])
    return rows


def classification_rows(summaries: Mapping[str, ProtocolSummary]) -> List[List[str]]:
    rows = []
    for protocol in PROTOCOLS:
        if protocol not in summaries:
            continue
        s = summaries[protocol]
        c = s.counts
        rows.append([
            protocol, str(s.n_patients),
            format_cell(s.sensitivity), format_cell(s.specificity), format_cell(s.balanced_accuracy),
            str(c.tp), str(c.tn), str(c.fp), str(c.fn),
        ])
    return rows


def cohort_rows(counts: Mapping[str, HospitalCounts]) -> List[List[str]]:
    """One row per hospital plus a total row; ratios to one decimal"""
    def row(name: str, item: HospitalCounts) -> List[str]:
        ratio = item.rt_ratio
        return [name, str(item.patients), str(item.rt), str(item.gtr), 'n/a' if ratio is None else f'{ratio:.1f}']

    rows = [row(h, c) for h, c in counts.items()]
    total = HospitalCounts(
        'Total',
        sum(c.patients for c in counts.values()),
        sum(c.rt for c in counts.values()),
        sum(c.gtr for c in counts.values()),
    )
    rows.append(row('Total', total))
    return rows


def markdown_table(columns: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ['| ' + ' | '.join(columns) + ' |', '|' + '|'.join('---' for _ in columns) + '|']
    lines.extend('| ' + ' | '.join(row) + ' |' for row in rows)
    return '\n'.join(lines) + '\n'


def _write_table(
    out_dir: Path, stem: str, title: str, columns: Sequence[str], rows: Sequence[Sequence[str]], formats: Sequence[str]
) -> List[Path]:
    written = []
    if 'csv' in formats:
        path = out_dir / f'{stem}.csv'
        pd.DataFrame(list(rows), columns=list(columns)).to_csv(path, index=False, lineterminator='\n')
        written.append(path)
    if 'markdown' in formats:
        path = out_dir / f'{stem}.md'
        path.write_text(f'# {title}\n\n' + markdown_table(columns, rows))
        written.append(path)
    return written


def write_patient_table(results: Sequence[PatientResult], path: PathLike) -> Path:
    """Per-patient CSV, one row per patient in manifest order; undefined values are empty"""
    path = Path(path)
    frame = pd.DataFrame([r.to_row() for r in results], columns=list(PATIENT_COLUMNS))
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def _parse_value(column: str, value: str) -> Any:
    if value == '':
        return None
    if column in _FLOAT_COLUMNS:
        return float(value)
    if column in _INT_COLUMNS:
        return int(value)
    if column in _BOOL_COLUMNS:
        if value not in ('True', 'False'):
            raise ValueError(f"expected True or False, got '{value}'")
        return value == 'True'
    return value


def load_patient_table(path: PathLike) -> List[PatientResult]:
    """
    Read a per-patient CSV back into results

    Raises:
        ManifestError: unreadable file, missing columns, or bad values
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ManifestError(f"Cannot read patient table {path}: {e}") from None
    missing = [c for c in PATIENT_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"Patient table {path} is missing columns: {missing}")

    results = []
    for row in frame.to_dict('records'):
        try:
            values = {c: _parse_value(c, row[c]) for c in PATIENT_COLUMNS}
        except ValueError as e:
            raise ManifestError(f"Patient {row['patient_id']}: {e}") from None
        values['message'] = values['message'] or ''
        values['n_predictions'] = values['n_predictions'] or 0
        results.append(PatientResult(**values))
    return results


def summarize(
    results: Union[PathLike, Sequence[PatientResult]],
    cutoff_ml: float = DEFAULT_CUTOFF_ML,
    ddof: int = 0,
) -> Dict[str, ProtocolSummary]:
    """Protocol summaries from per-patient results or a per-patient CSV"""
    if isinstance(results, (str, Path)):
        results = load_patient_table(results)
    return summarize_results(results, cutoff_ml, ddof)


def hospital_counts_from_results(
    results: Sequence[PatientResult], cutoff_ml: float = DEFAULT_CUTOFF_ML
) -> Dict[str, HospitalCounts]:
    cohort = CohortManifest(
        tuple(PatientRecord(r.patient_id, r.hospital, gt_volume_ml=r.gt_volume_ml) for r in results)
    )
    return cohort.hospital_counts(cutoff_ml)


def emit_tables(
    summaries: Mapping[str, ProtocolSummary],
    counts: Mapping[str, HospitalCounts],
    out_dir: PathLike,
    formats: Sequence[str] = FORMATS,
    title: str = 'residual-tumor',
) -> List[Path]:
    """Write the segmentation, classification and cohort tables"""
    bad = [f for f in formats if f not in FORMATS]
    if bad or not formats:
        raise InvalidArgumentError(f"Invalid formats {bad}. Must be a subset of: {list(FORMATS)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        written += _write_table(
            out_dir, 'segmentation', f'Segmentation performance: {title}',
            SEGMENTATION_COLUMNS, segmentation_rows(summaries), formats,
        )
        written += _write_table(
            out_dir, 'classification', f'GTR/RT classification: {title}',
            CLASSIFICATION_COLUMNS, classification_rows(summaries), formats,
        )
        written += _write_table(
            out_dir, 'cohort', f'Cohort: {title}', COHORT_COLUMNS, cohort_rows(counts), formats
        )
    except OSError as e:
        raise VolumeIOError(f"Failed to write report tables in {out_dir}: {e}") from None
    return written


def emit_report(
    report: MetricReport, out_dir: Optional[PathLike] = None, formats: Optional[Sequence[str]] = None
) -> List[Path]:
    """
    Write the per-patient CSV and the cohort tables

    Args:
        report: Completed experiment report
        out_dir: Defaults to the experiment's ``output_dir``
        formats: Table formats; defaults to the experiment's ``formats``

    Returns:
        Paths written, per-patient CSV first
    """
    out_dir = Path(out_dir if out_dir is not None else report.config.output_dir)
    formats = tuple(formats if formats is not None else report.config.formats)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        patients = write_patient_table(report.patients, out_dir / PATIENTS_FILE)
    except OSError as e:
        raise VolumeIOError(f"Failed to write {out_dir / PATIENTS_FILE}: {e}") from None
    title = f'{report.experiment}, {report.architecture}, configuration {report.input_configuration}'
    written = [patients] + emit_tables(report.protocols, report.hospital_counts, out_dir, formats, title)
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written
