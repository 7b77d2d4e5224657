"""
Report files for finished experiments

Per run: metrics.csv, verdicts.csv, confusion.csv, summary.json and the final
model as model.bin. Everything except the spreadsheet is a deterministic
function of the results, so identical runs give byte-identical files.
"""

import csv
import json
import logging
from pathlib import Path
from typing import List, Sequence, Union

from openpyxl import Workbook
from openpyxl.styles import Font

from federation.defense import Label
from learning.network import save_checkpoint

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
VERDICTS_FILE = 'verdicts.csv'
CONFUSION_FILE = 'confusion.csv'
SUMMARY_FILE = 'summary.json'
MODEL_FILE = 'model.bin'

# Detector quantities logged per client in verdicts.csv
SCORE_COLUMNS = ('sign_flip_cos', 'noise_distance', 'unreliable_cos')

COMPARISON_COLUMNS = [
    'aggregator', 'series', 'index', 'malicious_fraction', 'final_accuracy', 'final_loss',
    'target_precision', 'source_recall', 'detection_ratio',
]


def _number(value) -> str:
    if value is None:
        return ''
    return f'{float(value):.6f}'


def _open_csv(path: Path):
    return path.open('w', newline='', encoding='utf-8')


def write_metrics(result, path: Path) -> Path:
    n_classes = len(result.reports[0].per_class)
    sources = list(result.reports[0].source_recall)
    header = ['round', 'accuracy', 'loss', 'target_precision']
    header += [f'recall_source_{s}' for s in sources]
    header += [f'precision_{c}' for c in range(n_classes)] + [f'recall_{c}' for c in range(n_classes)]
    header += ['firm_malicious', 'unreliable', 'no_participants']

    with _open_csv(path) as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for report in result.reports:
            verdict = report.verdict
            row = [report.round_number, _number(report.accuracy), _number(report.loss),
                   _number(report.target_precision)]
            row += [_number(report.source_recall[s]) for s in sources]
            row += [_number(entry['precision']) for entry in report.per_class]
            row += [_number(entry['recall']) for entry in report.per_class]
            row += [
                len(verdict.firm_malicious) if verdict else '',
                len(verdict.clients_with(Label.UNRELIABLE)) if verdict else '',
                int(report.no_participants),
            ]
            writer.writerow(row)
    return path


def write_verdicts(result, path: Path) -> Path:
    """
    One row per client and round: ground-truth role, label, firm flag, weight,
    and the distances the detectors thresholded on (blank where a stage did
    not look at the client).
    """
    with _open_csv(path) as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['round', 'client', 'role', 'label', 'firm', 'first_detection', 'weight']
                        + list(SCORE_COLUMNS))
        for report in result.reports:
            verdict = report.verdict
            for client_id, role in enumerate(result.roles):
                if verdict is not None:
                    label = verdict.labels.get(client_id, Label.NORMAL).value
                    firm = int(client_id in verdict.firm_malicious)
                    first = verdict.first_detection.get(client_id, '')
                    scores = verdict.scores.get(client_id, {})
                else:
                    label, firm, first, scores = '', '', '', {}
                row = [report.round_number, client_id, role.kind.value, label, firm, first,
                       _number(report.weights.get(client_id, 0.0))]
                row += [_number(scores[key]) if key in scores else '' for key in SCORE_COLUMNS]
                writer.writerow(row)
    return path


def write_confusion(result, path: Path) -> Path:
    n_classes = len(result.reports[0].per_class)
    with _open_csv(path) as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['round', 'true_class'] + [f'predicted_{c}' for c in range(n_classes)])
        for report in result.reports:
            for true_class, row in enumerate(report.confusion):
                writer.writerow([report.round_number, true_class] + [int(v) for v in row])
    return path


def write_summary(summary: dict, path: Path) -> Path:
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + '\n', encoding='utf-8')
    return path


def emit_reports(result, out_dir: Union[str, Path]) -> List[Path]:
    """Write every per-run report file into out_dir and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        write_metrics(result, out_dir / METRICS_FILE),
        write_verdicts(result, out_dir / VERDICTS_FILE),
        write_confusion(result, out_dir / CONFUSION_FILE),
        write_summary(result.summary, out_dir / SUMMARY_FILE),
        save_checkpoint(result.params, out_dir / MODEL_FILE),
    ]
    result.output_dir = out_dir
    logger.info('Wrote %d report files to %s', len(paths), out_dir)
    return paths


def write_comparison(rows: Sequence[dict], out_dir: Union[str, Path]) -> List[Path]:
    """comparison.csv plus the same table as a formatted comparison.xlsx."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / 'comparison.csv'
    with _open_csv(csv_path) as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(COMPARISON_COLUMNS)
        for row in rows:
            writer.writerow([
                _number(row[c]) if isinstance(row[c], float) else row[c] if row[c] is not None else ''
                for c in COMPARISON_COLUMNS
            ])

    workbook = Workbook()
    sheet = workbook.active
    sheet.title = 'Comparison'
    sheet.append(COMPARISON_COLUMNS)
    for cell in sheet[1]:
        cell.font = Font(bold=True)
    for row in rows:
        sheet.append([row[c] for c in COMPARISON_COLUMNS])
    for column in sheet.columns:
        sheet.column_dimensions[column[0].column_letter].width = max(12, len(str(column[0].value)) + 2)
    xlsx_path = out_dir / 'comparison.xlsx'
    workbook.save(xlsx_path)
    logger.info('Wrote comparison of %d runs to %s', len(rows), out_dir)
    return [csv_path, xlsx_path]
