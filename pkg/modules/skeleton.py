"""
Kinematic tree data model for the articulated hand skeleton.

A tree is loaded from a JSON document (see README for the field names),
validated against the bundled JSON Schema and then against the structural
rules of a hand skeleton: 16 joints rooted at the palm centre, 15 bones in
five 3-bone finger chains and 21 pose degrees of freedom.

The pose, scale and joint-position records used throughout the package are
defined here as well.
"""

import json
import logging
import math
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Literal, Optional, Sequence, Tuple, Union

import jsonschema
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from .config import DEFAULT_TREE_PATH, TREE_SCHEMA_PATH
from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

MODULE = 'skeleton'

HAND_JOINTS = 16
HAND_BONES = 15
HAND_DOFS = 21
HAND_FINGERS = 5
BONES_PER_FINGER = 3

# Bones translate along their local x axis.
BONE_AXIS = 'x'


class DofKind(str, Enum):
    ROTATION = 'rotation'
    TRANSLATION = 'translation'


class ScaleMode(str, Enum):
    """Scale parameterisation: one shared factor, one per finger, one per bone."""
    GLOBAL = 'global'
    FIVE = 'five'
    MULTI = 'multi'

    def n_params(self, n_bones: int) -> int:
        if self is ScaleMode.GLOBAL:
            return 1
        if self is ScaleMode.FIVE:
            return HAND_FINGERS
        return n_bones


class JointSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    parent: Optional[int] = None


class BoneSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    parent: int
    child: int
    length_mm: float
    finger: int
    splay_deg: float = 0.0


class DofSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    joint: int
    kind: DofKind
    axis: Literal['x', 'y', 'z']
    lo: float
    hi: float

    @model_validator(mode='after')
    def check_limits(self):
        if not self.lo < self.hi:
            raise ValueError(f'limit lo ({self.lo}) must be below hi ({self.hi})')
        return self


def _readonly(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class KinematicTree(BaseModel):
    """
    Immutable skeleton: topology, rest bone lengths and the pose DoF map.

    Build instances through `load_tree`, `tree_from_dict` or `default_tree`
    so that the structural validation in `validate_tree` runs. The derived
    index arrays below are computed once and shared read-only.
    """
    model_config = ConfigDict(frozen=True)

    name: str = 'hand'
    joints: Tuple[JointSpec, ...]
    bones: Tuple[BoneSpec, ...]
    dofs: Tuple[DofSpec, ...]
    scale_lo: float = 0.5
    scale_hi: float = 2.0

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    @property
    def n_dofs(self) -> int:
        return len(self.dofs)

    @cached_property
    def joint_names(self) -> Tuple[str, ...]:
        return tuple(j.name for j in self.joints)

    @cached_property
    def parent_index(self) -> np.ndarray:
        return _readonly(np.array([-1 if j.parent is None else j.parent for j in self.joints], dtype=np.int64))

    @cached_property
    def bone_of_joint(self) -> np.ndarray:
        """Index of the bone ending at each joint (-1 for the root)."""
        out = np.full(self.n_joints, -1, dtype=np.int64)
        for b, bone in enumerate(self.bones):
            out[bone.child] = b
        return _readonly(out)

    @cached_property
    def order(self) -> Tuple[int, ...]:
        """Joints in breadth-first order from the root; parents precede children."""
        children = [[] for _ in range(self.n_joints)]
        for bone in self.bones:
            children[bone.parent].append(bone.child)
        out, queue = [], [0]
        while queue:
            j = queue.pop(0)
            out.append(j)
            queue.extend(sorted(children[j]))
        return tuple(out)

    @cached_property
    def descendant_mask(self) -> np.ndarray:
        """mask[j, n] is True when n is j or a descendant of j."""
        mask = np.eye(self.n_joints, dtype=bool)
        for n in range(self.n_joints):
            p = self.joints[n].parent
            while p is not None:
                mask[p, n] = True
                p = self.joints[p].parent
        return _readonly(mask)

    @cached_property
    def bone_path_mask(self) -> np.ndarray:
        """mask[b, n] is True when bone b lies on the root-to-n path."""
        return _readonly(np.stack([self.descendant_mask[bone.child] for bone in self.bones]))

    @cached_property
    def dofs_of_joint(self) -> Tuple[Tuple[int, ...], ...]:
        per_joint = [[] for _ in range(self.n_joints)]
        for p, dof in enumerate(self.dofs):
            per_joint[dof.joint].append(p)
        return tuple(tuple(p) for p in per_joint)

    @cached_property
    def dof_lo(self) -> np.ndarray:
        return _readonly(np.array([d.lo for d in self.dofs], dtype=np.float64))

    @cached_property
    def dof_hi(self) -> np.ndarray:
        return _readonly(np.array([d.hi for d in self.dofs], dtype=np.float64))

    @cached_property
    def rest_lengths(self) -> np.ndarray:
        return _readonly(np.array([b.length_mm for b in self.bones], dtype=np.float64))

    @cached_property
    def finger_ids(self) -> np.ndarray:
        return _readonly(np.array([b.finger for b in self.bones], dtype=np.int64))

    @cached_property
    def splay_rad(self) -> np.ndarray:
        return _readonly(np.radians(np.array([b.splay_deg for b in self.bones], dtype=np.float64)))

    def with_lengths(self, lengths_mm: Sequence[float]) -> 'KinematicTree':
        """Copy of this tree with new rest lengths; topology and DoFs unchanged."""
        lengths = np.asarray(lengths_mm, dtype=np.float64)
        if lengths.shape != (self.n_bones,):
            raise ValidationError(f'expected {self.n_bones} bone lengths, got {lengths.size}', MODULE)
        bones = tuple(
            BoneSpec(parent=b.parent, child=b.child, length_mm=float(length), finger=b.finger, splay_deg=b.splay_deg)
            for b, length in zip(self.bones, lengths)
        )
        tree = KinematicTree(name=self.name, joints=self.joints, bones=bones, dofs=self.dofs,
                             scale_lo=self.scale_lo, scale_hi=self.scale_hi)
        _validate_lengths(tree)
        return tree


class PoseVector(BaseModel):
    """Pose parameters: rotations in radians, root translations in mm."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    theta: np.ndarray

    @field_validator('theta', mode='before')
    @classmethod
    def as_array(cls, v):
        arr = np.array(v, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError('pose parameters must be finite')
        return _readonly(arr)

    @classmethod
    def zeros(cls, tree: KinematicTree) -> 'PoseVector':
        return cls(theta=np.zeros(tree.n_dofs))


class ScaleVector(BaseModel):
    """Positive, dimensionless bone-length scale factors for one scale mode."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    mode: ScaleMode
    values: np.ndarray

    @field_validator('values', mode='before')
    @classmethod
    def as_array(cls, v):
        arr = np.array(v, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise ValueError('scale vector cannot be empty')
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ValueError('scale factors must be finite and positive')
        return _readonly(arr)

    @model_validator(mode='after')
    def check_length(self):
        if self.mode is ScaleMode.GLOBAL and self.values.size != 1:
            raise ValueError(f'global mode takes 1 scale, got {self.values.size}')
        if self.mode is ScaleMode.FIVE and self.values.size != HAND_FINGERS:
            raise ValueError(f'five mode takes {HAND_FINGERS} scales, got {self.values.size}')
        return self

    @classmethod
    def ones(cls, mode: ScaleMode, tree: KinematicTree) -> 'ScaleVector':
        mode = ScaleMode(mode)
        return cls(mode=mode, values=np.ones(mode.n_params(tree.n_bones)))


class JointSet(BaseModel):
    """3D joint positions in mm, index-aligned with `KinematicTree.joints`."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    positions: np.ndarray

    @field_validator('positions', mode='before')
    @classmethod
    def as_array(cls, v):
        arr = np.array(v, dtype=np.float64)
        if arr.ndim == 1 and arr.size % 3 == 0:
            arr = arr.reshape(-1, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f'joint positions must have shape (n, 3), got {arr.shape}')
        if not np.all(np.isfinite(arr)):
            raise ValueError('joint positions must be finite')
        return _readonly(arr)

    @property
    def flat(self) -> np.ndarray:
        return self.positions.reshape(-1)


def _fail(message: str) -> None:
    raise ValidationError(message, MODULE)


def _validate_lengths(tree: KinematicTree) -> None:
    for b, bone in enumerate(tree.bones):
        if not math.isfinite(bone.length_mm) or bone.length_mm <= 0:
            _fail(f'bones[{b}].length_mm must be positive, got {bone.length_mm}')


def validate_tree(tree: KinematicTree, hand: bool = True) -> KinematicTree:
    """
    Check the structural rules of a skeleton.

    Always enforced: joint 0 is the only root, every other joint has exactly
    one incoming bone consistent with its declared parent, the bones form a
    tree (no cycles), rest lengths are positive, DoF limits are ordered and
    translation DoFs sit on the root. With `hand=True` the 16/15/21 counts and
    the five 3-bone finger chains are enforced as well.

    Raises:
        ValidationError: naming the offending field.
    """
    n = tree.n_joints
    if hand:
        if n != HAND_JOINTS:
            _fail(f'expected {HAND_JOINTS} joints, got {n}')
        if tree.n_bones != HAND_BONES:
            _fail(f'expected {HAND_BONES} bones, got {tree.n_bones}')
        if tree.n_dofs != HAND_DOFS:
            _fail(f'expected {HAND_DOFS} dofs, got {tree.n_dofs}')
    elif tree.n_bones != n - 1:
        _fail(f'expected {n - 1} bones for {n} joints, got {tree.n_bones}')

    names = [j.name for j in tree.joints]
    if len(set(names)) != len(names):
        dupes = sorted({x for x in names if names.count(x) > 1})
        _fail(f'joint names must be unique, duplicated: {dupes}')
    if tree.joints[0].parent is not None:
        _fail('joints[0] must be the root (parent null)')
    for j, joint in enumerate(tree.joints[1:], start=1):
        if joint.parent is None:
            _fail(f'joints[{j}].parent is null; only joint 0 may be the root')
        if not 0 <= joint.parent < n or joint.parent == j:
            _fail(f'joints[{j}].parent {joint.parent} is out of range')

    incoming = [[] for _ in range(n)]
    for b, bone in enumerate(tree.bones):
        if not 0 <= bone.parent < n:
            _fail(f'bones[{b}].parent {bone.parent} is out of range')
        if not 0 < bone.child < n:
            _fail(f'bones[{b}].child {bone.child} is out of range')
        incoming[bone.child].append(b)
        if tree.joints[bone.child].parent != bone.parent:
            _fail(f'bones[{b}] runs {bone.parent}->{bone.child} but joints[{bone.child}].parent '
                  f'is {tree.joints[bone.child].parent}')
    for j in range(1, n):
        if len(incoming[j]) != 1:
            _fail(f'joint {j} must have exactly one parent bone, found {len(incoming[j])}')

    # Walking parents from any joint must reach the root within n steps.
    for j in range(n):
        p, steps = j, 0
        while p != 0:
            p = tree.joints[p].parent
            steps += 1
            if steps > n:
                _fail(f'bones form a cycle through joint {j}')

    _validate_lengths(tree)

    for p, dof in enumerate(tree.dofs):
        if not 0 <= dof.joint < n:
            _fail(f'dofs[{p}].joint {dof.joint} is out of range')
        if dof.kind is DofKind.TRANSLATION and dof.joint != 0:
            _fail(f'dofs[{p}] is a translation on joint {dof.joint}; translations attach only to the root')
    if not 0 < tree.scale_lo < tree.scale_hi:
        _fail(f'scale_bounds must satisfy 0 < lo < hi, got ({tree.scale_lo}, {tree.scale_hi})')

    if hand:
        for f in range(HAND_FINGERS):
            chain = [b for b in tree.bones if b.finger == f]
            if len(chain) != BONES_PER_FINGER:
                _fail(f'finger {f} must have {BONES_PER_FINGER} bones, found {len(chain)}')
            by_parent = {b.parent: b for b in chain}
            if 0 not in by_parent:
                _fail(f'finger {f} must start at the root joint')
            joint, walked = 0, 0
            while joint in by_parent:
                joint = by_parent[joint].child
                walked += 1
            if walked != BONES_PER_FINGER:
                _fail(f'finger {f} bones do not form a single chain from the root')
    return tree


def tree_from_dict(data: dict, hand: bool = True) -> KinematicTree:
    """Build and validate a tree from a decoded config document."""
    schema = json.loads(TREE_SCHEMA_PATH.read_text(encoding='utf-8'))
    try:
        jsonschema.validate(instance=data, schema=schema)
    except jsonschema.ValidationError as e:
        location = '/'.join(str(p) for p in e.absolute_path) or '<document>'
        raise ValidationError(f'config field {location}: {e.message}', MODULE) from e

    bounds = data.get('scale_bounds', {'lo': 0.5, 'hi': 2.0})
    try:
        tree = KinematicTree(
            name=data.get('name', 'hand'),
            joints=tuple(JointSpec(**j) for j in data['joints']),
            bones=tuple(BoneSpec(**b) for b in data['bones']),
            dofs=tuple(DofSpec(**d) for d in data['dofs']),
            scale_lo=bounds['lo'],
            scale_hi=bounds['hi'],
        )
    except PydanticValidationError as e:
        raise ValidationError(f'invalid config: {e.errors()[0]["msg"]}', MODULE) from e
    return validate_tree(tree, hand=hand)


def load_tree(config_text: str, hand: bool = True) -> KinematicTree:
    """
    Parse and validate a skeleton config document.

    Args:
        config_text: JSON text with `joints`, `bones`, `dofs` and optional `scale_bounds`.
        hand: enforce the 16-joint hand layout.

    Raises:
        ParseError: malformed text.
        ValidationError: structurally invalid tree.
    """
    try:
        data = json.loads(config_text)
    except json.JSONDecodeError as e:
        raise ParseError(f'malformed skeleton config at line {e.lineno} column {e.colno}: {e.msg}', MODULE) from e
    tree = tree_from_dict(data, hand=hand)
    logger.debug('Loaded tree %s: %d joints, %d bones, %d dofs', tree.name, tree.n_joints, tree.n_bones, tree.n_dofs)
    return tree


def load_tree_file(path: Union[str, Path], hand: bool = True) -> KinematicTree:
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ValidationError(f'cannot read skeleton config {path}: {e}', MODULE) from e
    return load_tree(text, hand=hand)


def default_tree() -> KinematicTree:
    """The bundled adult-hand skeleton."""
    return load_tree_file(DEFAULT_TREE_PATH)


def dump_tree(tree: KinematicTree) -> str:
    """Serialise a tree back to the config format (stable key order)."""
    doc = {
        'name': tree.name,
        'joints': [{'name': j.name, 'parent': j.parent} for j in tree.joints],
        'bones': [
            {'parent': b.parent, 'child': b.child, 'length_mm': b.length_mm,
             'finger': b.finger, 'splay_deg': b.splay_deg}
            for b in tree.bones
        ],
        'dofs': [
            {'joint': d.joint, 'kind': d.kind.value, 'axis': d.axis, 'lo': d.lo, 'hi': d.hi}
            for d in tree.dofs
        ],
        'scale_bounds': {'lo': tree.scale_lo, 'hi': tree.scale_hi},
    }
    return json.dumps(doc, indent=2) + '\n'


def bone_lengths(joints: Union[JointSet, np.ndarray], tree: KinematicTree) -> np.ndarray:
    """Measured ‖child − parent‖ per bone; accepts (n, 3) or batched (..., n, 3) positions."""
    pos = joints.positions if isinstance(joints, JointSet) else np.asarray(joints, dtype=np.float64)
    parents = [b.parent for b in tree.bones]
    children = [b.child for b in tree.bones]
    return np.linalg.norm(pos[..., children, :] - pos[..., parents, :], axis=-1)


def calibrate_rest_lengths(annotations: Iterable[JointSet], tree: KinematicTree) -> KinematicTree:
    """
    Re-estimate rest bone lengths as the mean measured length over annotations.

    Raises:
        ValidationError: empty list, misaligned or non-finite annotation.
    """
    frames: List[np.ndarray] = []
    for i, ann in enumerate(annotations):
        pos = ann.positions if isinstance(ann, JointSet) else np.asarray(ann, dtype=np.float64)
        if pos.shape != (tree.n_joints, 3):
            _fail(f'annotation {i} has shape {pos.shape}, expected ({tree.n_joints}, 3)')
        if not np.all(np.isfinite(pos)):
            _fail(f'annotation {i} contains non-finite values')
        frames.append(pos)
    if not frames:
        _fail('calibration needs at least one annotation')

    lengths = bone_lengths(np.stack(frames), tree).mean(axis=0)
    logger.info('Calibrated %d bone lengths from %d annotations', tree.n_bones, len(frames))
    return tree.with_lengths(lengths)


def rest_pose_joints(tree: KinematicTree) -> JointSet:
    """Joint positions at the zero pose with unit scales."""
    from .fk_core import forward

    return forward(PoseVector.zeros(tree), ScaleVector.ones(ScaleMode.MULTI, tree), tree).joints
