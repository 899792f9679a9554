"""
Depth-frame preprocessing into the unified 128×128 corpus format.

Pipeline per frame: back-project the annotated joints with the camera
intrinsics, keep the 16 canonical joints, crop a fixed-size cube around the
palm centre in u, v and depth, normalise depth and joints to [-1, 1] and
resample the window to the output size with nearest-neighbour lookup.

Camera convention: x right, y down, z forward, millimetres;
u = fx·x/z + cx, v = fy·y/z + cy.
"""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import BinaryIO, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.io import loadmat
from tqdm import tqdm

from .config import JOINT_MAPS_DIR
from .errors import CorpusFormatError, OutputError, ValidationError
from .skeleton import HAND_JOINTS, JointSet

logger = logging.getLogger(__name__)

MODULE = 'preproc'

CORPUS_MAGIC = b'HSFKCORP'
CORPUS_VERSION = 1
_HEADER = struct.Struct('<8sIQdII')
_TAG_FIELDS = (('dataset', 16), ('frame_id', 48), ('subject_id', 32))
_TAG = struct.Struct('<' + ''.join(f'{width}s' for _, width in _TAG_FIELDS))

DATASET_KINDS = ('nyu', 'icvl', 'msra2015')


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    depth_unit_to_mm: float = Field(1.0, gt=0)


CAMERAS = {
    'nyu': CameraIntrinsics(fx=588.03, fy=587.07, cx=320.0, cy=240.0),
    'icvl': CameraIntrinsics(fx=241.42, fy=241.42, cx=160.0, cy=120.0),
    'msra2015': CameraIntrinsics(fx=241.42, fy=241.42, cx=160.0, cy=120.0),
}


class CropSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    cube_side_mm: float = Field(300.0, gt=0)
    output_size: int = Field(128, gt=0)

    @property
    def half_side(self) -> float:
        return self.cube_side_mm / 2.0


class SourceTag(BaseModel):
    model_config = ConfigDict(frozen=True)

    dataset: str
    frame_id: str
    subject_id: str

    @field_validator('dataset', 'frame_id', 'subject_id')
    @classmethod
    def fits_fixed_width(cls, v, info):
        width = dict(_TAG_FIELDS)[info.field_name]
        if len(v.encode('ascii', errors='replace')) > width:
            raise ValueError(f'{info.field_name} longer than {width} bytes')
        return v


class Sample(BaseModel):
    """One preprocessed frame: normalised depth patch and joints plus provenance."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    depth: np.ndarray
    joints_norm: np.ndarray
    palm_center_mm: np.ndarray
    source: SourceTag

    @field_validator('depth', mode='before')
    @classmethod
    def check_depth(cls, v):
        arr = np.array(v, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f'depth patch must be square, got {arr.shape}')
        if not np.all(np.abs(arr) <= 1.0):
            raise ValueError('depth values must lie in [-1, 1]')
        return arr

    @field_validator('joints_norm', mode='before')
    @classmethod
    def check_joints(cls, v):
        arr = np.array(v, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.abs(arr) <= 1.0):
            raise ValueError('normalised joints must lie in [-1, 1]')
        return arr

    @field_validator('palm_center_mm', mode='before')
    @classmethod
    def check_palm(cls, v):
        arr = np.array(v, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(arr)):
            raise ValueError('palm centre must be finite')
        return arr


class CorpusSummary(BaseModel):
    dataset: str
    frame_count: int = 0
    subject_count: int = 0
    skipped: int = 0

    def as_text(self) -> str:
        return (f'dataset: {self.dataset}\nframes: {self.frame_count}\n'
                f'subjects: {self.subject_count}\nskipped: {self.skipped}\n')


def project(xyz: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-space points (..., 3) in mm to pixel coordinates and depth (..., 3)."""
    xyz = np.asarray(xyz, dtype=np.float64)
    z = xyz[..., 2]
    u = intrinsics.fx * xyz[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * xyz[..., 1] / z + intrinsics.cy
    return np.stack([u, v, z], axis=-1)


def back_project(uvd: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates with depth in mm (..., 3) to camera-space points (..., 3)."""
    uvd = np.asarray(uvd, dtype=np.float64)
    d = uvd[..., 2]
    x = (uvd[..., 0] - intrinsics.cx) * d / intrinsics.fx
    y = (uvd[..., 1] - intrinsics.cy) * d / intrinsics.fy
    return np.stack([x, y, d], axis=-1)


def load_joint_map(kind: str) -> List[int]:
    """Bundled 16-entry mapping table for a dataset kind."""
    path = JOINT_MAPS_DIR / f'{kind}.json'
    if not path.exists():
        raise ValidationError(f'no joint mapping table for dataset kind {kind!r}', MODULE)
    return list(json.loads(path.read_text(encoding='utf-8'))['table'])


def remap_joints(raw_joints: np.ndarray, mapping_table: Sequence[int]) -> JointSet:
    """Select the canonical joints: output i is raw joint mapping_table[i]."""
    raw = np.asarray(raw_joints, dtype=np.float64).reshape(-1, 3)
    table = np.asarray(mapping_table, dtype=np.int64)
    if table.size != HAND_JOINTS:
        raise ValidationError(f'mapping table must cover {HAND_JOINTS} slots, got {table.size}', MODULE)
    bad = np.flatnonzero((table < 0) | (table >= raw.shape[0]))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(
            f'mapping slot {i} references joint {table[i]} of a {raw.shape[0]}-joint frame', MODULE)
    return JointSet(positions=raw[table])


def crop_normalize(depth_image: np.ndarray, intrinsics: CameraIntrinsics, palm_center_mm: np.ndarray,
                   crop: CropSpec, joints: Optional[JointSet] = None,
                   source: Optional[SourceTag] = None) -> Sample:
    """
    Crop the palm-centred cube from a depth frame and normalise it.

    The u, v window is the cube's projection at the palm depth; depth inside
    the cube's slab maps affinely onto [-1, 1] with the palm at 0, and
    everything else (outside the slab, missing depth, outside the image) is
    background +1.

    Raises:
        ValidationError: palm depth missing, zero or non-finite.
    """
    palm = np.asarray(palm_center_mm, dtype=np.float64).reshape(-1)
    if palm.shape != (3,) or not np.all(np.isfinite(palm)) or palm[2] <= 0:
        raise ValidationError(f'palm centre {palm.tolist()} has no usable depth', MODULE)

    half = crop.half_side
    size = crop.output_size
    uc, vc, _ = project(palm, intrinsics)
    half_u = intrinsics.fx * half / palm[2]
    half_v = intrinsics.fy * half / palm[2]
    steps = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    map_x, map_y = np.meshgrid(uc + steps * half_u, vc + steps * half_v)

    depth_mm = np.asarray(depth_image, dtype=np.float64) * intrinsics.depth_unit_to_mm
    patch = cv2.remap(depth_mm.astype(np.float32), map_x.astype(np.float32), map_y.astype(np.float32),
                      interpolation=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    patch = patch.astype(np.float64)
    norm = (patch - palm[2]) / half
    norm[~np.isfinite(patch) | (patch <= 0) | (np.abs(norm) > 1.0)] = 1.0

    if joints is None:
        joints_norm = np.zeros((HAND_JOINTS, 3))
    else:
        joints_norm = np.clip((joints.positions - palm) / half, -1.0, 1.0)
    source = source or SourceTag(dataset='unknown', frame_id='0', subject_id='unknown')
    return Sample(depth=norm.astype(np.float32), joints_norm=joints_norm, palm_center_mm=palm, source=source)


def denormalize(sample: Sample, crop: CropSpec) -> JointSet:
    """Normalised joints back to camera-space millimetres."""
    return JointSet(positions=sample.palm_center_mm + sample.joints_norm * crop.half_side)


class CorpusWriter:
    """
    Streaming corpus writer.

    Layout (little-endian): magic, version (u32), sample count (u64),
    cube side (f64), output size (u32), joint count (u32); then per sample the
    fixed-width source tag, palm centre (3×f64), joints (n×3×f64) and the depth
    patch (size²×f32). The count is patched when the writer closes.
    """

    def __init__(self, path: Union[str, Path], crop: CropSpec, n_joints: int = HAND_JOINTS):
        self.path = Path(path)
        self.crop = crop
        self.n_joints = n_joints
        self.count = 0
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh: BinaryIO = open(self.path, 'wb')
        except OSError as e:
            raise OutputError(f'cannot write corpus {self.path}: {e}', MODULE) from e
        self._write_header()

    def _write_header(self) -> None:
        self._fh.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, self.count, self.crop.cube_side_mm,
                                    self.crop.output_size, self.n_joints))

    def write(self, sample: Sample) -> None:
        size = self.crop.output_size
        if sample.depth.shape != (size, size) or sample.joints_norm.shape != (self.n_joints, 3):
            raise ValidationError(
                f'sample {sample.source.frame_id} does not match corpus layout '
                f'({size}x{size}, {self.n_joints} joints)', MODULE)
        tag = sample.source
        self._fh.write(_TAG.pack(*(getattr(tag, name).encode('ascii', errors='replace')
                                   for name, _ in _TAG_FIELDS)))
        self._fh.write(sample.palm_center_mm.astype('<f8').tobytes())
        self._fh.write(sample.joints_norm.astype('<f8').tobytes())
        self._fh.write(sample.depth.astype('<f4').tobytes())
        self.count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._write_header()
        self._fh.close()

    def __enter__(self) -> 'CorpusWriter':
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_corpus(path: Union[str, Path], samples: Sequence[Sample], crop: CropSpec) -> int:
    n_joints = samples[0].joints_norm.shape[0] if samples else HAND_JOINTS
    with CorpusWriter(path, crop, n_joints) as writer:
        for sample in samples:
            writer.write(sample)
    return len(samples)


def read_corpus(path: Union[str, Path]) -> Tuple[CropSpec, List[Sample]]:
    """
    Read a corpus file written by `CorpusWriter`.

    Raises:
        CorpusFormatError: bad magic, unsupported version or truncated payload.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorpusFormatError(f'{path}: file too short for a corpus header', MODULE)
    magic, version, count, cube, size, n_joints = _HEADER.unpack_from(data, 0)
    if magic != CORPUS_MAGIC:
        raise CorpusFormatError(f'{path}: bad magic {magic!r}', MODULE)
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f'{path}: unsupported corpus version {version}', MODULE)
    crop = CropSpec(cube_side_mm=cube, output_size=size)

    record = _TAG.size + 3 * 8 + n_joints * 3 * 8 + size * size * 4
    if len(data) != _HEADER.size + count * record:
        raise CorpusFormatError(f'{path}: expected {count} samples, payload size does not match', MODULE)

    samples = []
    offset = _HEADER.size
    for _ in range(count):
        fields = [raw.rstrip(b'\x00').decode('ascii') for raw in _TAG.unpack_from(data, offset)]
        offset += _TAG.size
        palm = np.frombuffer(data, dtype='<f8', count=3, offset=offset)
        offset += 3 * 8
        joints = np.frombuffer(data, dtype='<f8', count=n_joints * 3, offset=offset).reshape(n_joints, 3)
        offset += n_joints * 3 * 8
        depth = np.frombuffer(data, dtype='<f4', count=size * size, offset=offset).reshape(size, size)
        offset += size * size * 4
        samples.append(Sample(depth=depth, joints_norm=joints, palm_center_mm=palm,
                              source=SourceTag(**dict(zip((n for n, _ in _TAG_FIELDS), fields)))))
    return crop, samples


# Each frame reference is (source tag, loader); the loader returns the raw
# depth image in camera units and all annotated joints in camera-space mm.
FrameRef = Tuple[SourceTag, Callable[[], Tuple[np.ndarray, np.ndarray]]]


def _read_png_depth(path: Path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_ANYDEPTH)
    if image is None:
        raise ValidationError(f'cannot read depth image {path}', MODULE)
    return image.astype(np.float64)


def _icvl_frames(dataset_dir: Path) -> Iterator[FrameRef]:
    """`labels.txt`: `<png path> u0 v0 d0 ... u15 v15 d15` per line, 16-bit PNG depth in mm."""
    labels = dataset_dir / 'labels.txt'
    if not labels.exists():
        return
    camera = CAMERAS['icvl']
    for line in labels.read_text(encoding='utf-8').splitlines():
        parts = line.split()
        if not parts:
            continue
        rel = Path(parts[0])
        subject = rel.parts[0] if len(rel.parts) > 1 else 'icvl'

        def load(rel=rel, values=parts[1:]):
            uvd = np.array([float(x) for x in values], dtype=np.float64).reshape(-1, 3)
            return _read_png_depth(dataset_dir / rel), back_project(uvd, camera)

        yield SourceTag(dataset='icvl', frame_id=str(rel)[-48:], subject_id=subject[:32]), load


def _nyu_frames(dataset_dir: Path) -> Iterator[FrameRef]:
    """`joint_data.mat` (`joint_uvd`, camera 1) and colour-packed `depth_1_%07d.png` (depth = 256·G + B)."""
    mat_path = dataset_dir / 'joint_data.mat'
    if not mat_path.exists():
        return
    joint_uvd = np.asarray(loadmat(str(mat_path))['joint_uvd'], dtype=np.float64)[0]
    camera = CAMERAS['nyu']
    for i, uvd in enumerate(joint_uvd):
        png = dataset_dir / f'depth_1_{i + 1:07d}.png'

        def load(png=png, uvd=uvd):
            image = cv2.imread(str(png), cv2.IMREAD_COLOR)
            if image is None:
                raise ValidationError(f'cannot read depth image {png}', MODULE)
            depth = 256.0 * image[:, :, 1].astype(np.float64) + image[:, :, 0].astype(np.float64)
            return depth, back_project(uvd, camera)

        yield SourceTag(dataset='nyu', frame_id=png.name, subject_id='nyu'), load


def _msra_frames(dataset_dir: Path) -> Iterator[FrameRef]:
    """`P*/<gesture>/joint.txt` (count, then 21×xyz per line, y up and z negated) with `%06d_depth.bin` boxes."""
    for joint_file in sorted(dataset_dir.glob('P*/*/joint.txt')):
        subject = joint_file.parent.parent.name
        lines = joint_file.read_text(encoding='utf-8').split('\n')
        for i, line in enumerate(lines[1:int(lines[0]) + 1]):
            bin_path = joint_file.parent / f'{i:06d}_depth.bin'

            def load(bin_path=bin_path, line=line):
                xyz = np.array([float(x) for x in line.split()], dtype=np.float64).reshape(-1, 3)
                xyz[:, 1:] *= -1.0
                raw = bin_path.read_bytes()
                width, height, left, top, right, bottom = struct.unpack_from('<6i', raw, 0)
                box = np.frombuffer(raw, dtype='<f4', offset=24).reshape(bottom - top, right - left)
                depth = np.zeros((height, width))
                depth[top:bottom, left:right] = box
                return depth, xyz

            tag = f'{joint_file.parent.name}/{bin_path.name}'
            yield SourceTag(dataset='msra2015', frame_id=tag[-48:], subject_id=subject[:32]), load


_READERS = {'icvl': _icvl_frames, 'nyu': _nyu_frames, 'msra2015': _msra_frames}


def build_corpus(dataset_dir: Union[str, Path], dataset_kind: str, out_path: Union[str, Path],
                 crop: Optional[CropSpec] = None, workers: int = 1) -> CorpusSummary:
    """
    Convert a locally supplied dataset into a corpus file.

    Frames that cannot be read or normalised are skipped and counted. With
    `workers > 1` frames are prepared on a thread pool; output order is the
    dataset's order either way.

    Raises:
        ValidationError: unknown dataset kind.
    """
    if dataset_kind not in _READERS:
        raise ValidationError(f'unknown dataset kind {dataset_kind!r}; expected one of {DATASET_KINDS}', MODULE)
    crop = crop or CropSpec()
    dataset_dir = Path(dataset_dir)
    table = load_joint_map(dataset_kind)
    camera = CAMERAS[dataset_kind]
    frames = list(_READERS[dataset_kind](dataset_dir))
    logger.info('Preprocessing %d %s frames from %s', len(frames), dataset_kind, dataset_dir)

    def prepare(ref: FrameRef) -> Optional[Sample]:
        tag, load = ref
        try:
            depth, raw_joints = load()
            joints = remap_joints(raw_joints, table)
            return crop_normalize(depth, camera, joints.positions[0], crop, joints=joints, source=tag)
        except (OSError, ValueError, struct.error, cv2.error) as e:
            logger.warning('Skipping frame %s: %s', tag.frame_id, e)
            return None

    summary = CorpusSummary(dataset=dataset_kind)
    subjects = set()
    with CorpusWriter(out_path, crop) as writer:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = pool.map(prepare, frames)
            for sample in tqdm(results, total=len(frames), desc=f'preprocess {dataset_kind}', disable=None):
                if sample is None:
                    summary.skipped += 1
                    continue
                writer.write(sample)
                subjects.add(sample.source.subject_id)
    summary.frame_count = writer.count
    summary.subject_count = len(subjects)
    logger.info('Corpus %s: %d frames, %d subjects, %d skipped', out_path, summary.frame_count,
                summary.subject_count, summary.skipped)
    return summary
