"""
Dataset ingestion, landmark based face alignment and the train/validation split.

A dataset root holds one sub-directory per identity; identities are labelled
by their sorted directory names. Landmark files have one record per line:
``relative/path x1 y1 x2 y2 x3 y3 x4 y4 x5 y5`` for the left eye, right eye,
nose and left/right mouth corners, in source image pixels.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import math
import pathlib
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from PIL import Image
from skimage.transform import SimilarityTransform, resize, warp

from .errors import AlignmentError, DatasetIOError, LandmarkParseError
from .tensor import Tensor, derive_seed, make_rng

PathLike = Union[str, pathlib.Path]
Point = Tuple[float, float]

IMAGE_SUFFIXES = (".pgm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
ALIGNED_SIZE = 144
EYE_MOUTH_DISTANCE = 50.0
EYE_ANCHOR = (72.0, 60.0)

TRAIN_SPLIT = "train"
VAL_SPLIT = "val"

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class Landmarks5:
    left_eye: Point
    right_eye: Point
    nose: Point
    mouth_left: Point
    mouth_right: Point

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise AlignmentError("Landmark coordinates must be finite")

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "Landmarks5":
        if len(values) != 10:
            raise AlignmentError(f"Expected 10 landmark values, got {len(values)}")
        points = [(float(values[i]), float(values[i + 1])) for i in range(0, 10, 2)]
        return cls(*points)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.left_eye, self.right_eye, self.nose, self.mouth_left, self.mouth_right],
            dtype=np.float64,
        )

    @property
    def eye_midpoint(self) -> np.ndarray:
        return self.as_array()[:2].mean(axis=0)

    @property
    def mouth_midpoint(self) -> np.ndarray:
        return self.as_array()[3:].mean(axis=0)


@dataclass
class FaceSample:
    path: str
    identity: int
    landmarks: Optional[Landmarks5] = None
    split: str = TRAIN_SPLIT
    root: Optional[pathlib.Path] = field(default=None, repr=False, compare=False)

    @property
    def full_path(self) -> pathlib.Path:
        return (self.root / self.path) if self.root is not None else pathlib.Path(self.path)


@dataclass
class DatasetIndex:
    root: pathlib.Path
    identities: List[str]
    samples: List[FaceSample]
    skipped: List[str] = field(default_factory=list)

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    def by_identity(self) -> Dict[int, List[FaceSample]]:
        groups: Dict[int, List[FaceSample]] = {}
        for sample in self.samples:
            groups.setdefault(sample.identity, []).append(sample)
        return groups

    def train_samples(self) -> List[FaceSample]:
        return [s for s in self.samples if s.split == TRAIN_SPLIT]

    def val_samples(self) -> List[FaceSample]:
        return [s for s in self.samples if s.split == VAL_SPLIT]


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    "Map ``fn`` over ``items`` keeping input order; one thread runs inline"
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, items))


# Image I/O


def read_image(path: PathLike) -> Tensor:
    "Read any Pillow-readable image as a float32 grayscale array [H, W] in 0..255"
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("L"), dtype=np.float32)
    except OSError as ex:
        raise DatasetIOError(f"Could not read image {path}: {ex}")


def write_pgm(path: PathLike, image: Tensor) -> None:
    "Write ``image`` ([H, W] or [1, H, W], 0..255) as an 8-bit binary PGM"
    array = np.asarray(image)
    if array.ndim == 3:
        array = array[0]
    pixels = np.clip(np.rint(array), 0, 255).astype(np.uint8)
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as ex:
        raise DatasetIOError(f"Could not write image {path}: {ex}")


# Landmarks and alignment


def parse_landmarks(path: PathLike) -> Dict[str, Landmarks5]:
    try:
        text = pathlib.Path(path).read_text()
    except (OSError, UnicodeDecodeError) as ex:
        raise DatasetIOError(f"Could not read landmark file {path}: {ex}")
    landmarks = {}
    for line_number, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 11:
            raise LandmarkParseError(
                f"expected a path followed by 10 numbers, got {len(parts)} fields", line_number
            )
        try:
            values = [float(v) for v in parts[1:]]
        except ValueError as ex:
            raise LandmarkParseError(str(ex), line_number)
        try:
            landmarks[parts[0].replace("\\", "/")] = Landmarks5.from_values(values)
        except AlignmentError as ex:
            raise LandmarkParseError(str(ex), line_number)
    return landmarks


def fit_alignment(
    landmarks: Landmarks5,
    size: int = ALIGNED_SIZE,
    eye_mouth: float = EYE_MOUTH_DISTANCE,
    anchor: Optional[Point] = None,
) -> SimilarityTransform:
    """
    Fit the similarity transform from source pixels to the aligned canvas.

    The rotation levels the eye line, the scale sets the eye-midpoint to
    mouth-midpoint distance to ``eye_mouth`` and the translation moves the
    eye midpoint to ``anchor``. The two eye points are taken in order of x,
    whichever of them the landmark record lists first.
    """
    if anchor is None:
        anchor = (size / 2, EYE_ANCHOR[1] * size / ALIGNED_SIZE)
    eye_mid = landmarks.eye_midpoint
    distance = float(np.hypot(*(landmarks.mouth_midpoint - eye_mid)))
    if distance < 1e-6:
        raise AlignmentError("Eye midpoint and mouth midpoint coincide")
    left_eye, right_eye = sorted((landmarks.left_eye, landmarks.right_eye))
    dx, dy = np.subtract(right_eye, left_eye)
    rotation = -math.atan2(dy, dx)
    scale = eye_mouth / distance
    c, s = math.cos(rotation), math.sin(rotation)
    moved = scale * np.array([c * eye_mid[0] - s * eye_mid[1], s * eye_mid[0] + c * eye_mid[1]])
    translation = np.asarray(anchor, dtype=np.float64) - moved
    return SimilarityTransform(scale=scale, rotation=rotation, translation=translation)


def align_face(
    image: Tensor,
    landmarks: Landmarks5,
    size: int = ALIGNED_SIZE,
    eye_mouth: float = EYE_MOUTH_DISTANCE,
    anchor: Optional[Point] = None,
) -> Tensor:
    "Warp a grayscale ``image`` ([H, W] or [1, H, W]) to an aligned [1, size, size] face"
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 3:
        array = array[0]
    tform = fit_alignment(landmarks, size, eye_mouth, anchor)
    warped = warp(
        array,
        tform.inverse,
        output_shape=(size, size),
        order=1,
        mode="constant",
        cval=0.0,
        preserve_range=True,
    )
    return warped[None].astype(np.float32)


# Dataset index


def _list_images(directory: pathlib.Path) -> List[pathlib.Path]:
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def load_dataset(root_dir: PathLike, landmark_file: Optional[PathLike] = None) -> DatasetIndex:
    """
    Index ``root_dir/<identity>/<image>``. With a landmark file, images that
    have no landmark record are skipped and listed in ``DatasetIndex.skipped``.
    """
    root = pathlib.Path(root_dir)
    if not root.is_dir():
        raise DatasetIOError(f"Dataset root is not a readable directory: {root}")
    landmarks = parse_landmarks(landmark_file) if landmark_file is not None else None
    try:
        identity_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        listings = [(d.name, _list_images(d)) for d in identity_dirs]
    except OSError as ex:
        raise DatasetIOError(f"Could not list dataset {root}: {ex}")

    identities: List[str] = []
    samples: List[FaceSample] = []
    skipped: List[str] = []
    for name, files in listings:
        kept = []
        for f in files:
            relative = f"{name}/{f.name}"
            if landmarks is not None and relative not in landmarks:
                skipped.append(relative)
                continue
            kept.append(relative)
        if not kept:
            continue
        label = len(identities)
        identities.append(name)
        for relative in kept:
            samples.append(
                FaceSample(
                    relative,
                    label,
                    landmarks[relative] if landmarks is not None else None,
                    root=root,
                )
            )
    samples.sort(key=lambda s: s.path)
    return DatasetIndex(root, identities, samples, skipped)


def split_train_val(index: DatasetIndex, rng_seed: int) -> DatasetIndex:
    "Tag one seeded sample of every identity with two or more samples as validation"
    rng = make_rng(derive_seed(rng_seed, "split"))
    chosen = set()
    groups = index.by_identity()
    for identity in sorted(groups):
        members = groups[identity]
        if len(members) >= 2:
            chosen.add(members[int(rng.integers(len(members)))].path)
    samples = [
        replace(sample, split=VAL_SPLIT if sample.path in chosen else TRAIN_SPLIT)
        for sample in index.samples
    ]
    return replace(index, samples=samples)


def load_face(path: PathLike, input_size: Tuple[int, int]) -> Tensor:
    "Read one aligned face as float32 [1, H, W] in [0, 1], resized to ``input_size``"
    image = read_image(path)
    if image.shape != tuple(input_size):
        image = resize(image, tuple(input_size), order=1, anti_aliasing=True, preserve_range=True)
    return (np.asarray(image, dtype=np.float32) / 255.0)[None]


def load_images(
    samples: Sequence[FaceSample], input_size: Tuple[int, int], threads: int = 1
) -> Tensor:
    if not samples:
        return np.zeros((0, 1, *input_size), dtype=np.float32)
    faces = parallel_map(lambda sample: load_face(sample.full_path, input_size), samples, threads)
    return np.stack(faces)


@dataclass
class AlignSummary:
    processed: int
    skipped: List[str]


def align_directory(
    input_dir: PathLike, landmark_file: PathLike, output_dir: PathLike, threads: int = 1
) -> AlignSummary:
    """
    Align every image of a dataset tree into ``output_dir``, mirroring the
    ``<identity>/<image>`` layout with ``.pgm`` files. Images without a
    landmark record or with degenerate landmarks are skipped.
    """
    index = load_dataset(input_dir, landmark_file)
    output = pathlib.Path(output_dir)

    def _align(sample: FaceSample) -> bool:
        image = read_image(sample.full_path)
        try:
            aligned = align_face(image, sample.landmarks)
        except AlignmentError:
            return False
        write_pgm(output / pathlib.PurePosixPath(sample.path).with_suffix(".pgm"), aligned)
        return True

    results = parallel_map(_align, index.samples, threads)
    skipped = list(index.skipped)
    skipped.extend(s.path for s, ok in zip(index.samples, results) if not ok)
    return AlignSummary(processed=sum(results), skipped=sorted(skipped))
