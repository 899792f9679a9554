"""
Plain-text parameter, joints and fit-report files.

A file is a sequence of blocks. Each block opens with a header line
`<kind> [<label>] <count>` followed by `count` numeric values, one per line.
Blank lines and lines starting with `#` are ignored.

    pose 21                 pose parameters
    scales five 5           scale factors for a mode
    joints 48               16×3 coordinates in mm, x y z per joint
    cost_trace 12           per-iteration costs of a fit
    final_cost 1 / iterations 1 / converged 1 / runs 1
"""

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import OutputError, ParseError
from .skeleton import JointSet, PoseVector, ScaleMode, ScaleVector
from .solver import FitReport

MODULE = 'paramio'

Block = Tuple[str, List[str], np.ndarray]


def _fmt(value: float) -> str:
    return f'{float(value):.17g}'


def format_block(kind: str, values: Iterable[float], label: Optional[str] = None) -> str:
    values = [_fmt(v) for v in np.asarray(list(values), dtype=np.float64).reshape(-1)]
    header = ' '.join([kind] + ([label] if label else []) + [str(len(values))])
    return '\n'.join([header] + values) + '\n'


def parse_blocks(text: str, source: str = '<text>') -> List[Block]:
    """
    Raises:
        ParseError: bad header, non-numeric value or a block cut short.
    """
    lines = [(n, line.strip()) for n, line in enumerate(text.splitlines(), start=1)]
    lines = [(n, line) for n, line in lines if line and not line.startswith('#')]
    blocks: List[Block] = []
    i = 0
    while i < len(lines):
        n, header = lines[i]
        parts = header.split()
        if len(parts) < 2 or not parts[-1].isdigit():
            raise ParseError(f'{source}:{n}: expected a block header, got {header!r}', MODULE)
        count = int(parts[-1])
        body = lines[i + 1:i + 1 + count]
        if len(body) < count:
            raise ParseError(f'{source}:{n}: block {parts[0]!r} declares {count} values, found {len(body)}', MODULE)
        try:
            values = np.array([float(line) for _, line in body], dtype=np.float64)
        except ValueError as e:
            raise ParseError(f'{source}:{n}: non-numeric value in block {parts[0]!r} ({e})', MODULE) from e
        blocks.append((parts[0], parts[1:-1], values))
        i += 1 + count
    return blocks


def read_blocks(path: Union[str, Path]) -> List[Block]:
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ParseError(f'cannot read {path}: {e}', MODULE) from e
    return parse_blocks(text, str(path))


def write_text(path: Union[str, Path], text: str) -> None:
    try:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding='utf-8')
    except OSError as e:
        raise OutputError(f'cannot write {path}: {e}', MODULE) from e


def _first(blocks: Sequence[Block], kind: str, source: str) -> Block:
    for block in blocks:
        if block[0] == kind:
            return block
    raise ParseError(f'{source}: no {kind!r} block', MODULE)


def _scales(block: Block, source: str) -> ScaleVector:
    _, label, values = block
    if not label:
        raise ParseError(f'{source}: scales block needs a mode label', MODULE)
    try:
        return ScaleVector(mode=ScaleMode(label[0]), values=values)
    except ValueError as e:
        raise ParseError(f'{source}: invalid scales block ({e})', MODULE) from e


def format_params(theta: PoseVector, s: ScaleVector) -> str:
    return format_block('pose', theta.theta) + format_block('scales', s.values, s.mode.value)


def read_params(path: Union[str, Path]) -> Tuple[PoseVector, ScaleVector]:
    blocks = read_blocks(path)
    source = str(path)
    try:
        theta = PoseVector(theta=_first(blocks, 'pose', source)[2])
    except ValueError as e:
        raise ParseError(f'{source}: invalid pose block ({e})', MODULE) from e
    return theta, _scales(_first(blocks, 'scales', source), source)


def format_joints(frames: Iterable[JointSet], comment: Optional[str] = None) -> str:
    head = f'# {comment}\n' if comment else ''
    return head + ''.join(format_block('joints', js.positions) for js in frames)


def read_joints(path: Union[str, Path]) -> List[JointSet]:
    """Every `joints` block in the file, in order."""
    frames = []
    for kind, _, values in read_blocks(path):
        if kind != 'joints':
            continue
        if values.size % 3:
            raise ParseError(f'{path}: joints block holds {values.size} values, not a multiple of 3', MODULE)
        try:
            frames.append(JointSet(positions=values.reshape(-1, 3)))
        except ValueError as e:
            raise ParseError(f'{path}: invalid joints block ({e})', MODULE) from e
    if not frames:
        raise ParseError(f'{path}: no joints block', MODULE)
    return frames


def format_fit_report(report: FitReport, joints: Optional[JointSet] = None) -> str:
    text = format_params(report.theta_hat, report.s_hat)
    for key, value in (('final_cost', report.final_cost), ('iterations', report.iterations),
                       ('converged', int(report.converged)), ('runs', report.runs)):
        text += format_block(key, [value])
    text += format_block('cost_trace', report.cost_trace)
    if joints is not None:
        text += format_block('joints', joints.positions)
    return text


def read_fit_report(path: Union[str, Path]) -> FitReport:
    blocks = read_blocks(path)
    source = str(path)
    scalar: Dict[str, float] = {kind: float(values[0]) for kind, _, values in blocks
                                if kind in ('final_cost', 'iterations', 'converged', 'runs') and values.size}
    theta, s = read_params(path)
    try:
        return FitReport(theta_hat=theta, s_hat=s, final_cost=scalar['final_cost'],
                         iterations=int(scalar['iterations']), converged=bool(scalar['converged']),
                         cost_trace=[float(v) for v in _first(blocks, 'cost_trace', source)[2]],
                         runs=int(scalar.get('runs', 1)))
    except KeyError as e:
        raise ParseError(f'{source}: missing {e.args[0]!r} block', MODULE) from e
