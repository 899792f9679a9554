"""Shared test fixtures: small chains, copies of the bundled config and a fake ICVL dataset."""

import copy
import json
import math
from pathlib import Path

import cv2
import numpy as np

from modules.config import DEFAULT_TREE_PATH
from modules.preproc import CAMERAS, project
from modules.skeleton import KinematicTree, default_tree, tree_from_dict
from modules.synth import SynthSpec, generate

_DEFAULT_DOC = json.loads(DEFAULT_TREE_PATH.read_text(encoding='utf-8'))


def default_doc() -> dict:
    """Fresh, mutable copy of the bundled skeleton config."""
    return copy.deepcopy(_DEFAULT_DOC)


def chain_doc(lengths, dof_joints, lo=-math.pi, hi=math.pi) -> dict:
    """Serial chain along x with one z rotation on each joint in `dof_joints`."""
    n = len(lengths) + 1
    return {
        'name': 'toy-chain',
        'joints': [{'name': f'j{i}', 'parent': None if i == 0 else i - 1} for i in range(n)],
        'bones': [{'parent': i, 'child': i + 1, 'length_mm': float(length), 'finger': 0}
                  for i, length in enumerate(lengths)],
        'dofs': [{'joint': j, 'kind': 'rotation', 'axis': 'z', 'lo': lo, 'hi': hi} for j in dof_joints],
        'scale_bounds': {'lo': 0.1, 'hi': 10.0},
    }


def chain(lengths, dof_joints) -> KinematicTree:
    return tree_from_dict(chain_doc(lengths, dof_joints), hand=False)


def synthetic_hands(n, seed=0, depth_mm=500.0):
    """Hands in front of the camera: small poses, palm roughly `depth_mm` away."""
    samples = generate(SynthSpec(n_samples=n, seed=seed, margin=0.3), default_tree())
    return [s.joints.positions + [0.0, 0.0, depth_mm] for s in samples]


def write_icvl(root, hands, missing=()):
    """ICVL layout under `root`: flat 16-bit depth frames at the palm depth plus labels.txt."""
    root = Path(root)
    camera = CAMERAS['icvl']
    lines = []
    for i, hand in enumerate(hands):
        rel = f'subject{i % 2}/{i:04d}.png'
        if i not in missing:
            (root / rel).parent.mkdir(exist_ok=True)
            cv2.imwrite(str(root / rel), np.full((240, 320), int(hand[0, 2]), dtype=np.uint16))
        uvd = project(hand, camera)
        lines.append(rel + ' ' + ' '.join(f'{v:.6f}' for v in uvd.reshape(-1)))
    (root / 'labels.txt').write_text('\n'.join(lines) + '\n')
