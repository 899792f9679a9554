"""
Evaluation metrics: mean 3D joint error, per-joint means and the fraction of
frames whose worst joint error is within a threshold.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator

from .errors import OutputError, ParseError, ValidationError
from .skeleton import JointSet

logger = logging.getLogger(__name__)

MODULE = 'evalkit'

DEFAULT_THRESHOLDS_MM = tuple(float(t) for t in range(0, 81, 5))

_SUMMARY_HEADER = 'mean_joint_error_mm'
_PER_JOINT_HEADER = 'joint\tmean_error_mm'
_CURVE_HEADER = 'threshold_mm\tfraction'


class MetricsReport(BaseModel):
    mean_joint_error_mm: float
    per_joint_mean_mm: List[float]
    threshold_curve: List[Tuple[float, float]]

    @field_validator('threshold_curve')
    @classmethod
    def check_curve(cls, v):
        fractions = [f for _, f in v]
        if any(f < 0 or f > 1 for f in fractions):
            raise ValueError('fractions must lie in [0, 1]')
        return v


def _stack(frames: Sequence[Union[JointSet, np.ndarray]]) -> np.ndarray:
    return np.stack([f.positions if isinstance(f, JointSet) else np.asarray(f, dtype=np.float64) for f in frames])


def evaluate(predictions: Sequence[JointSet], truths: Sequence[JointSet],
             thresholds_mm: Sequence[float] = DEFAULT_THRESHOLDS_MM) -> MetricsReport:
    """
    Raises:
        ValidationError: empty input, or lists / frames of different sizes.
    """
    if len(predictions) != len(truths):
        raise ValidationError(f'{len(predictions)} predictions vs {len(truths)} ground-truth frames', MODULE)
    if not predictions:
        raise ValidationError('evaluation needs at least one frame', MODULE)
    pred, truth = _stack(predictions), _stack(truths)
    if pred.shape != truth.shape:
        raise ValidationError(f'prediction frames {pred.shape[1:]} vs ground truth {truth.shape[1:]}', MODULE)

    errors = np.linalg.norm(pred - truth, axis=-1)
    per_joint = errors.mean(axis=0)
    worst = errors.max(axis=1)
    thresholds = sorted(float(t) for t in thresholds_mm)
    curve = [(t, float(np.count_nonzero(worst <= t)) / worst.size) for t in thresholds]
    return MetricsReport(mean_joint_error_mm=float(per_joint.mean()),
                         per_joint_mean_mm=[float(v) for v in per_joint], threshold_curve=curve)


def emit_curves(report: MetricsReport, out_path: Union[str, Path]) -> None:
    """
    Write plot data as tab-separated blocks separated by blank lines: a summary
    block, the per-joint block and (when thresholds were given) the threshold
    curve block. Values use six decimals.
    """
    blocks = [
        [_SUMMARY_HEADER, f'{report.mean_joint_error_mm:.6f}'],
        [_PER_JOINT_HEADER] + [f'{j}\t{v:.6f}' for j, v in enumerate(report.per_joint_mean_mm)],
    ]
    if report.threshold_curve:
        blocks.append([_CURVE_HEADER] + [f'{t:.6f}\t{f:.6f}' for t, f in report.threshold_curve])
    text = '\n\n'.join('\n'.join(block) for block in blocks) + '\n'
    try:
        path = Path(out_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding='ascii')
    except OSError as e:
        raise OutputError(f'cannot write plot data {out_path}: {e}', MODULE) from e
    logger.info('Wrote plot data to %s', out_path)


def parse_curves(path: Union[str, Path]) -> MetricsReport:
    blocks = {}
    for chunk in Path(path).read_text(encoding='ascii').strip().split('\n\n'):
        lines = chunk.strip().splitlines()
        if lines:
            blocks[lines[0]] = [line.split('\t') for line in lines[1:]]
    try:
        mean = float(blocks[_SUMMARY_HEADER][0][0])
        per_joint = [float(row[1]) for row in blocks[_PER_JOINT_HEADER]]
        curve = [(float(t), float(f)) for t, f in blocks.get(_CURVE_HEADER, [])]
    except (KeyError, IndexError, ValueError) as e:
        raise ParseError(f'{path}: malformed plot data ({e})', MODULE) from e
    return MetricsReport(mean_joint_error_mm=mean, per_joint_mean_mm=per_joint, threshold_curve=curve)
