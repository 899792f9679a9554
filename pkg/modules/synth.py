"""
Synthetic ground truth and the finite-difference Jacobian oracle.

Samples are drawn from the generative model itself: poses uniform within
(shrunken) DoF limits, scales uniform in a configurable range, joints from the
forward kinematic function plus optional Gaussian noise.

`fd_jacobian` only ever evaluates forward positions; it never touches the
analytic Jacobian code, so it can serve as an independent oracle.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ValidationError
from .fk_core import forward_batch
from .preproc import CropSpec, Sample, SourceTag
from .skeleton import JointSet, KinematicTree, PoseVector, ScaleMode, ScaleVector

logger = logging.getLogger(__name__)

MODULE = 'synth'

DEFAULT_H_THETA = 1e-5
DEFAULT_H_S = 1e-6


class SynthSpec(BaseModel):
    """How to draw synthetic hands."""
    model_config = ConfigDict(frozen=True)

    n_samples: int = Field(1, ge=0)
    seed: int = 0
    mode: ScaleMode = ScaleMode.FIVE
    margin: float = Field(0.8, gt=0.0, le=1.0)
    scale_lo: float = Field(0.8, gt=0.0)
    scale_hi: float = Field(1.25, gt=0.0)
    noise_sigma_mm: float = Field(0.0, ge=0.0)

    @model_validator(mode='after')
    def check_scale_range(self):
        if self.scale_lo > self.scale_hi:
            raise ValueError('scale_lo must not exceed scale_hi')
        return self


class SynthSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    theta: PoseVector
    scales: ScaleVector
    joints: JointSet


def sample_poses(rng: np.random.Generator, n: int, tree: KinematicTree, margin: float) -> np.ndarray:
    """Uniform poses inside the DoF limits shrunk about their midpoints by `margin`."""
    mid = 0.5 * (tree.dof_lo + tree.dof_hi)
    half = 0.5 * (tree.dof_hi - tree.dof_lo) * margin
    return rng.uniform(mid - half, mid + half, size=(n, tree.n_dofs))


def generate(spec: SynthSpec, tree: KinematicTree) -> List[SynthSample]:
    """Draw `spec.n_samples` (Θ, S, J) triples; identical output for identical seeds."""
    if spec.scale_lo < tree.scale_lo or spec.scale_hi > tree.scale_hi:
        raise ValidationError(
            f'scale range [{spec.scale_lo}, {spec.scale_hi}] exceeds tree bounds '
            f'[{tree.scale_lo}, {tree.scale_hi}]', MODULE)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    k = spec.mode.n_params(tree.n_bones)
    thetas = sample_poses(rng, n, tree, spec.margin)
    scales = rng.uniform(spec.scale_lo, spec.scale_hi, size=(n, k))
    if n == 0:
        return []
    joints = forward_batch(thetas, scales, spec.mode, tree)
    if spec.noise_sigma_mm > 0:
        joints = joints + rng.normal(0.0, spec.noise_sigma_mm, size=joints.shape)
    logger.debug('Generated %d synthetic hands (mode=%s, seed=%d)', n, spec.mode.value, spec.seed)
    return [
        SynthSample(theta=PoseVector(theta=thetas[i]),
                    scales=ScaleVector(mode=spec.mode, values=scales[i]),
                    joints=JointSet(positions=joints[i]))
        for i in range(n)
    ]


def features(joint_sets: Sequence[JointSet], scale_mm: float = 150.0) -> np.ndarray:
    """
    Joint coordinates relative to the root joint, in units of the crop
    half-side, flattened to shape (n, 3N).

    Centred like the palm-centred corpus crops, so the input's magnitude
    follows hand size rather than where the hand sits.
    """
    pos = np.stack([js.positions for js in joint_sets])
    return (pos - pos[:, :1]).reshape(pos.shape[0], -1) / scale_mm


def to_corpus_samples(samples: Sequence[SynthSample], crop: CropSpec) -> List[Sample]:
    """Joint-space corpus records: an all-background depth plane, palm centre at the root joint."""
    half = crop.cube_side_mm / 2.0
    depth = np.ones((crop.output_size, crop.output_size), dtype=np.float32)
    out = []
    for i, sample in enumerate(samples):
        pos = sample.joints.positions
        palm = pos[0]
        out.append(Sample(
            depth=depth,
            joints_norm=np.clip((pos - palm) / half, -1.0, 1.0),
            palm_center_mm=palm,
            source=SourceTag(dataset='synth', frame_id=f'{i:08d}', subject_id='synthetic'),
        ))
    return out


def _check_stencil(values: np.ndarray, lo: np.ndarray, hi: np.ndarray, h: float, what: str) -> None:
    close = np.flatnonzero((values - h < lo) | (values + h > hi))
    if close.size:
        k = int(close[0])
        raise ValidationError(f'{what} {k} = {values[k]:.6g} is within {h:g} of a bound; '
                              f'central differences would leave the feasible set', MODULE)


def fd_jacobian(theta: PoseVector, s: ScaleVector, tree: KinematicTree,
                h_theta: float = DEFAULT_H_THETA, h_s: float = DEFAULT_H_S) -> Tuple[np.ndarray, np.ndarray]:
    """
    Central-difference Jacobians of the joint positions.

    Returns:
        (pose Jacobian (3N, D), scale Jacobian (3N, K)) in the mode of `s`.

    Raises:
        ValidationError: the point is closer than the step to a bound.
    """
    t0 = theta.theta
    s0 = s.values
    _check_stencil(t0, tree.dof_lo, tree.dof_hi, h_theta, 'pose parameter')
    _check_stencil(s0, np.full(s0.size, tree.scale_lo), np.full(s0.size, tree.scale_hi), h_s, 'scale')

    d, k = t0.size, s0.size
    # Column p of the stencil: rows 2p and 2p+1 are the + and - perturbations.
    thetas = np.repeat(t0[None, :], 2 * d, axis=0)
    thetas[0::2][np.arange(d), np.arange(d)] += h_theta
    thetas[1::2][np.arange(d), np.arange(d)] -= h_theta
    pos = forward_batch(thetas, np.repeat(s0[None, :], 2 * d, axis=0), s.mode, tree).reshape(2 * d, -1)
    jac_theta = ((pos[0::2] - pos[1::2]) / (2.0 * h_theta)).T

    scales = np.repeat(s0[None, :], 2 * k, axis=0)
    scales[0::2][np.arange(k), np.arange(k)] += h_s
    scales[1::2][np.arange(k), np.arange(k)] -= h_s
    pos = forward_batch(np.repeat(t0[None, :], 2 * k, axis=0), scales, s.mode, tree).reshape(2 * k, -1)
    jac_s = ((pos[0::2] - pos[1::2]) / (2.0 * h_s)).T
    return jac_theta, jac_s


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-9) -> float:
    """
    Largest column-normalised discrepancy between two Jacobians.

    For each column: max |a − f| / max(‖a‖∞, ‖f‖∞, floor). Columns that are
    zero in both (kinematically unrelated DoFs) score 0.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValidationError(f'Jacobian shapes differ: {analytic.shape} vs {numeric.shape}', MODULE)
    diff = np.abs(analytic - numeric).max(axis=0)
    scale = np.maximum(np.maximum(np.abs(analytic).max(axis=0), np.abs(numeric).max(axis=0)), floor)
    return float((diff / scale).max()) if diff.size else 0.0
