"""
Toy regressor with the forward-kinematics layer as its final stage.

A small dense network maps 48 root-centred, normalised joint coordinates to squashed pose
and scale parameters; F_k turns those into joint positions and the joint loss
is backpropagated through F_k (analytic Jacobians) and then through the dense
layers. Training is minibatch SGD with momentum.
"""

import logging
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit, logit
from tqdm import tqdm

from .errors import CorpusFormatError, NumericalError, OutputError, ValidationError
from .fk_core import forward_batch, loss_gradients_batch
from .skeleton import JointSet, KinematicTree, PoseVector, ScaleMode, ScaleVector
from .synth import SynthSample, features

logger = logging.getLogger(__name__)

MODULE = 'toynet'

CHECKPOINT_MAGIC = b'HSTOYNET'
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct('<8sI8sII')

DEFAULT_HIDDEN = (64, 64)
JOINT_UNIT_MM = 150.0

Gradients = List[Tuple[np.ndarray, np.ndarray]]


class ToyNet(BaseModel):
    """Dense layers with rectifier hidden units; outputs squashed onto [out_lo, out_hi]."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mode: ScaleMode
    n_pose: int
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    out_lo: np.ndarray
    out_hi: np.ndarray

    @model_validator(mode='after')
    def check_shapes(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError('need one bias per weight matrix')
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f'layer {i}: bias shape {b.shape} does not match weights {w.shape}')
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f'layer {i}: input size {w.shape[0]} does not follow previous layer')
        out = self.weights[-1].shape[1]
        if self.out_lo.shape != (out,) or self.out_hi.shape != (out,) or not np.all(self.out_lo < self.out_hi):
            raise ValueError('output bounds must match the output layer and satisfy lo < hi')
        if not 0 < self.n_pose < out:
            raise ValueError(f'pose outputs {self.n_pose} must leave room for scales in {out} outputs')
        return self

    @property
    def sizes(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def clone(self) -> 'ToyNet':
        return ToyNet(mode=self.mode, n_pose=self.n_pose, weights=[w.copy() for w in self.weights],
                      biases=[b.copy() for b in self.biases], out_lo=self.out_lo.copy(), out_hi=self.out_hi.copy())


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(1e-3, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(32, gt=0)
    seed: int = 0
    joint_unit_mm: float = Field(JOINT_UNIT_MM, gt=0)


def init_net(input_dim: int, mode: ScaleMode, tree: KinematicTree,
             hidden: Sequence[int] = DEFAULT_HIDDEN, seed: int = 0) -> ToyNet:
    """
    Weights uniform in ±1/√fan_in; output bounds from the tree's limits.

    Biases start at zero except on the scale outputs, which start at S = 1
    (clipped into the scale bounds).
    """
    mode = ScaleMode(mode)
    n_k = mode.n_params(tree.n_bones)
    sizes = [input_dim, *hidden, tree.n_dofs + n_k]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    neutral = np.clip((1.0 - tree.scale_lo) / (tree.scale_hi - tree.scale_lo), 0.01, 0.99)
    biases[-1][tree.n_dofs:] = logit(neutral)
    return ToyNet(mode=mode, n_pose=tree.n_dofs, weights=weights, biases=biases,
                  out_lo=np.concatenate([tree.dof_lo, np.full(n_k, tree.scale_lo)]),
                  out_hi=np.concatenate([tree.dof_hi, np.full(n_k, tree.scale_hi)]))


def _forward_layers(net: ToyNet, x: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray, np.ndarray]:
    activations = [x]
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        activations.append(h)
    sig = expit(h @ net.weights[-1] + net.biases[-1])
    return activations, sig, net.out_lo + (net.out_hi - net.out_lo) * sig


def _split(net: ToyNet, outputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return outputs[:, :net.n_pose], outputs[:, net.n_pose:]


def predict_batch(net: ToyNet, inputs: np.ndarray, tree: KinematicTree) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pose (B, D), scales (B, K) and joints (B, N, 3) for a batch of feature rows."""
    _, _, outputs = _forward_layers(net, np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    thetas, scales = _split(net, outputs)
    return thetas, scales, forward_batch(thetas, scales, net.mode, tree)


def predict(net: ToyNet, inputs: np.ndarray, tree: KinematicTree) -> Tuple[PoseVector, ScaleVector, JointSet]:
    thetas, scales, joints = predict_batch(net, inputs, tree)
    return (PoseVector(theta=thetas[0]), ScaleVector(mode=net.mode, values=scales[0]),
            JointSet(positions=joints[0]))


def composite_gradients(net: ToyNet, inputs: np.ndarray, targets: np.ndarray, tree: KinematicTree,
                        unit_mm: float = JOINT_UNIT_MM) -> Tuple[float, Gradients]:
    """
    Batch-mean joint loss ½‖(F_k(net(x)) − J)/unit‖² and its gradient per layer.

    Returns:
        (loss, [(dW, db) per layer])
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    batch = inputs.shape[0]
    activations, sig, outputs = _forward_layers(net, inputs)
    thetas, scales = _split(net, outputs)
    residual, grad_theta, grad_s = loss_gradients_batch(thetas, scales, net.mode, tree, targets)
    loss = 0.5 * float(np.sum(residual ** 2)) / (unit_mm ** 2 * batch)

    delta = np.hstack([grad_theta, grad_s]) / (unit_mm ** 2 * batch)
    delta = delta * (net.out_hi - net.out_lo) * sig * (1.0 - sig)
    grads: Gradients = []
    for layer in range(len(net.weights) - 1, -1, -1):
        grads.append((activations[layer].T @ delta, delta.sum(axis=0)))
        if layer:
            delta = (delta @ net.weights[layer].T) * (activations[layer] > 0)
    grads.reverse()
    return loss, grads


def composite_loss(net: ToyNet, inputs: np.ndarray, targets: np.ndarray, tree: KinematicTree,
                   unit_mm: float = JOINT_UNIT_MM) -> float:
    _, _, joints = predict_batch(net, inputs, tree)
    diff = (joints - np.asarray(targets, dtype=np.float64)) / unit_mm
    return 0.5 * float(np.sum(diff ** 2)) / joints.shape[0]


def training_arrays(samples: Sequence[SynthSample], tree: KinematicTree,
                    unit_mm: float = JOINT_UNIT_MM) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inputs from the (possibly noisy) sample joints; targets are the noiseless
    F_k(Θ, S) in the same frame, i.e. shifted by the observed root joint.
    """
    inputs = features([s.joints for s in samples], unit_mm)
    thetas = np.stack([s.theta.theta for s in samples])
    scales = np.stack([s.scales.values for s in samples])
    roots = np.stack([s.joints.positions[0] for s in samples])
    return inputs, forward_batch(thetas, scales, samples[0].scales.mode, tree) - roots[:, None, :]


def train(samples: Sequence[SynthSample], tree: KinematicTree, mode: ScaleMode, cfg: TrainConfig,
          net: Optional[ToyNet] = None) -> Tuple[ToyNet, List[float]]:
    """
    Train a copy of `net` (default: a fresh seeded net) on synthetic samples.

    Returns:
        (trained net, mean minibatch loss per epoch)

    Raises:
        ValidationError: no samples, or samples drawn in another scale mode.
        NumericalError: loss became non-finite (epoch and batch named).
    """
    if not samples:
        raise ValidationError('training needs at least one sample', MODULE)
    mode = ScaleMode(mode)
    if samples[0].scales.mode is not mode:
        raise ValidationError(f'samples use {samples[0].scales.mode.value} scales, training asks for {mode.value}',
                              MODULE)
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    inputs, targets = training_arrays(samples, tree, cfg.joint_unit_mm)
    if net is None:
        net = init_net(inputs.shape[1], mode, tree, seed=int(init_seq.generate_state(1)[0]))
    net = net.clone()

    rng = np.random.default_rng(shuffle_seq)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
    history: List[float] = []
    n = inputs.shape[0]
    for epoch in tqdm(range(cfg.epochs), desc='train-toy', disable=None):
        order = rng.permutation(n)
        losses = []
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = composite_gradients(net, inputs[idx], targets[idx], tree, cfg.joint_unit_mm)
            if not np.isfinite(loss):
                raise NumericalError(f'loss became non-finite at epoch {epoch}, batch {batch}', MODULE)
            for layer, ((dw, db), (vw, vb)) in enumerate(zip(grads, velocity)):
                vw = cfg.momentum * vw - cfg.lr * dw
                vb = cfg.momentum * vb - cfg.lr * db
                velocity[layer] = (vw, vb)
                net.weights[layer] += vw
                net.biases[layer] += vb
            losses.append(loss)
        history.append(float(np.mean(losses)))
        logger.debug('epoch %d: loss %.6g', epoch, history[-1])
    if history:
        logger.info('Trained %d epochs on %d samples: loss %.6g -> %.6g', cfg.epochs, n, history[0], history[-1])
    return net, history


def mean_joint_error(net: ToyNet, samples: Sequence[SynthSample], tree: KinematicTree) -> float:
    """Mean Euclidean joint error in mm against the noiseless targets."""
    inputs, targets = training_arrays(samples, tree)
    _, _, joints = predict_batch(net, inputs, tree)
    return float(np.linalg.norm(joints - targets, axis=-1).mean())


def save_checkpoint(net: ToyNet, path: Union[str, Path]) -> None:
    """
    Little-endian checkpoint: magic, version, mode, pose outputs, layer count,
    layer sizes (u32), output bounds, then per layer weights and biases (f64).
    """
    sizes = net.sizes
    parts = [_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.mode.value.encode('ascii'),
                                     net.n_pose, len(net.weights)),
             np.asarray(sizes, dtype='<u4').tobytes(),
             net.out_lo.astype('<f8').tobytes(), net.out_hi.astype('<f8').tobytes()]
    for w, b in zip(net.weights, net.biases):
        parts.append(w.astype('<f8').tobytes())
        parts.append(b.astype('<f8').tobytes())
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(b''.join(parts))
    except OSError as e:
        raise OutputError(f'cannot write checkpoint {path}: {e}', MODULE) from e


def load_checkpoint(path: Union[str, Path]) -> ToyNet:
    data = Path(path).read_bytes()
    if len(data) < _CHECKPOINT_HEADER.size:
        raise CorpusFormatError(f'{path}: file too short for a checkpoint header', MODULE)
    magic, version, mode, n_pose, n_layers = _CHECKPOINT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CorpusFormatError(f'{path}: bad magic {magic!r}', MODULE)
    if version != CHECKPOINT_VERSION:
        raise CorpusFormatError(f'{path}: unsupported checkpoint version {version}', MODULE)
    offset = _CHECKPOINT_HEADER.size

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal offset
        width = np.dtype(dtype).itemsize
        if offset + count * width > len(data):
            raise CorpusFormatError(f'{path}: truncated checkpoint', MODULE)
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(np.float64 if 'f' in dtype else int)
        offset += count * width
        return arr

    sizes = [int(v) for v in take('<u4', n_layers + 1)]
    out_lo = take('<f8', sizes[-1])
    out_hi = take('<f8', sizes[-1])
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(take('<f8', fan_in * fan_out).reshape(fan_in, fan_out))
        biases.append(take('<f8', fan_out))
    if offset != len(data):
        raise CorpusFormatError(f'{path}: trailing bytes after checkpoint payload', MODULE)
    return ToyNet(mode=ScaleMode(mode.rstrip(b'\x00').decode('ascii')), n_pose=n_pose,
                  weights=weights, biases=biases, out_lo=out_lo, out_hi=out_hi)


def write_loss_history(history: Sequence[float], path: Union[str, Path]) -> None:
    lines = ['epoch\tloss'] + [f'{i}\t{loss:.9e}' for i, loss in enumerate(history)]
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text('\n'.join(lines) + '\n', encoding='ascii')
    except OSError as e:
        raise OutputError(f'cannot write loss history {path}: {e}', MODULE) from e
