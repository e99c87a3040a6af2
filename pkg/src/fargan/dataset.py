#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging
import math
import os

import attr
import numpy as np
from PIL import Image
from PIL import ImageDraw

from fargan import tensor as T
from fargan.errors import DatasetError
from fargan.errors import FarganError
from fargan.landmarks import LandmarkSet
from fargan.landmarks import rasterize

logger = logging.getLogger(__name__)

"""
Paired training triplets (source frame, target frame, target mask).

Frames come either from a procedural generator of flat-shaded synthetic faces
with exact landmarks, or from a directory laid out as
``root/<identity>/<frame>.png`` with a sibling ``<frame>.lms`` landmark file.
Identities are split 8:2 into disjoint train and test sets.
"""

TRAIN_RATIO = 0.8
DEFAULT_FRAMES = 8
MANIFEST_NAME = "manifest.txt"


def _in_range(low, high):
    def validator(instance, attribute, value):
        if not low <= value <= high:
            raise ValueError(f"{attribute.name} must be in [{low}, {high}], got {value!r}")

    return validator


def _color(rng, low, high):
    return tuple(int(c) for c in rng.integers(low, high + 1, size=3))


@attr.s(frozen=True)
class IdentityParams:
    """
    Appearance of one synthetic identity. Sizes are fractions of the image.
    """

    face_width = attr.ib(type=float)
    face_height = attr.ib(type=float)
    eye_spacing = attr.ib(type=float)
    skin_color = attr.ib(type=tuple)
    hair_color = attr.ib(type=tuple)
    background_color = attr.ib(type=tuple)

    @classmethod
    def from_seed(cls, seed, index):
        """
        Return the identity ``index`` of the dataset built with ``seed``.
        """
        rng = np.random.default_rng([seed, index])
        return cls(
            face_width=float(rng.uniform(0.50, 0.62)),
            face_height=float(rng.uniform(0.62, 0.74)),
            eye_spacing=float(rng.uniform(0.38, 0.48)),
            skin_color=_color(rng, 150, 235),
            hair_color=_color(rng, 15, 90),
            background_color=(
                int(rng.integers(20, 110)),
                int(rng.integers(90, 200)),
                int(rng.integers(120, 255)),
            ),
        )


@attr.s(frozen=True)
class ExpressionParams:
    mouth_openness = attr.ib(type=float, default=0.0, validator=_in_range(0, 1))
    eyebrow_raise = attr.ib(type=float, default=0.0, validator=_in_range(-1, 1))
    head_yaw = attr.ib(type=float, default=0.0, validator=_in_range(-1, 1))
    eye_closure = attr.ib(type=float, default=0.0, validator=_in_range(0, 1))

    @classmethod
    def from_seed(cls, seed, index, frame):
        rng = np.random.default_rng([seed, index, frame, 1])
        return cls(
            mouth_openness=float(rng.uniform(0, 1)),
            eyebrow_raise=float(rng.uniform(-1, 1)),
            head_yaw=float(rng.uniform(-1, 1)),
            eye_closure=float(rng.uniform(0, 1) ** 3),
        )


def _ellipse_points(cx, cy, rx, ry, degrees):
    return [
        (cx + rx * math.cos(math.radians(a)), cy - ry * math.sin(math.radians(a))) for a in degrees
    ]


def face_geometry(identity, expression, size):
    """
    Return the 68 landmark positions of a synthetic face in pixel coordinates,
    with the head ellipse (cx, cy, rx, ry).
    """
    s = float(size)
    yaw = expression.head_yaw
    cx = s / 2 + yaw * 0.04 * s
    cy = 0.54 * s
    rx = identity.face_width * s / 2
    ry = identity.face_height * s / 2
    fx = cx + yaw * 0.06 * s

    # jaw runs along the lower half of the head ellipse, image left to right
    jaw = [
        (cx + rx * math.cos(math.pi * (1 - t / 16)), cy + ry * math.sin(math.pi * (1 - t / 16)))
        for t in range(17)
    ]

    eye_y = cy - 0.12 * s
    eye_dx = identity.eye_spacing * rx
    eye_w = 0.16 * rx
    eye_h = max(0.07 * ry * (1 - 0.9 * expression.eye_closure), 0.004 * s)
    eye_angles = (180, 120, 60, 0, 300, 240)
    right_eye = _ellipse_points(fx - eye_dx, eye_y, eye_w, eye_h, eye_angles)
    left_eye = _ellipse_points(fx + eye_dx, eye_y, eye_w, eye_h, eye_angles)

    brow_y = eye_y - 0.08 * s - expression.eyebrow_raise * 0.03 * s
    brows = []
    for center in (fx - eye_dx, fx + eye_dx):
        brows.append(
            [
                (
                    center - 1.2 * eye_w + 2.4 * eye_w * t / 4,
                    brow_y - 0.02 * s * math.sin(math.pi * t / 4),
                )
                for t in range(5)
            ]
        )

    nose_top = eye_y
    nose_bottom = cy + 0.08 * s
    bridge = [(fx, nose_top + (nose_bottom - nose_top) * t / 3) for t in range(4)]
    nostrils = [
        (fx - 0.12 * rx + 0.24 * rx * t / 4, nose_bottom + 0.015 * s * math.sin(math.pi * t / 4))
        for t in range(5)
    ]

    mouth_y = cy + 0.2 * s
    mouth_w = 0.3 * rx
    outer_h = 0.025 * s + expression.mouth_openness * 0.06 * s
    inner_h = expression.mouth_openness * 0.05 * s
    outer = _ellipse_points(fx, mouth_y, mouth_w, outer_h, range(180, -180, -30))
    inner = _ellipse_points(fx, mouth_y, 0.7 * mouth_w, inner_h, range(180, -180, -45))

    points = jaw + brows[0] + brows[1] + bridge + nostrils + right_eye + left_eye + outer + inner
    return np.array(points, dtype=np.float64), (cx, cy, rx, ry)


def synth_render(identity, expression, size):
    """
    Return (image, landmarks) for a synthetic face: an (H, W, 3) uint8 RGB
    image of a flat-shaded head over a solid background and the LandmarkSet
    the drawing is built from.
    """
    if size < 32:
        raise DatasetError(f"synthetic frames need a size of at least 32, got {size}")
    points, (cx, cy, rx, ry) = face_geometry(identity, expression, size)
    points = np.clip(points, 0, size - 1e-6)

    canvas = Image.new("RGB", (size, size), identity.background_color)
    draw = ImageDraw.Draw(canvas)
    draw.ellipse(
        (cx - 1.08 * rx, cy - 1.15 * ry, cx + 1.08 * rx, cy + 0.3 * ry), fill=identity.hair_color
    )
    draw.ellipse((cx - rx, cy - ry, cx + rx, cy + ry), fill=identity.skin_color)

    def polyline(first, last):
        return [tuple(p) for p in points[first : last + 1]]

    line_width = max(1, size // 32)
    nose_color = tuple(int(c * 0.7) for c in identity.skin_color)
    draw.line(polyline(17, 21), fill=identity.hair_color, width=line_width)
    draw.line(polyline(22, 26), fill=identity.hair_color, width=line_width)
    draw.line(polyline(27, 30), fill=nose_color, width=1)
    draw.line(polyline(31, 35), fill=nose_color, width=1)
    for first, last in ((36, 41), (42, 47)):
        draw.polygon(polyline(first, last), fill=(245, 245, 245), outline=(40, 30, 30))
    draw.polygon(polyline(48, 59), fill=(170, 60, 70), outline=(120, 40, 50))
    draw.polygon(polyline(60, 67), fill=(60, 20, 25), outline=(60, 20, 25))

    landmarks = LandmarkSet(np.clip(points / size, 0, 1))
    return np.asarray(canvas, dtype=np.uint8), landmarks


def image_to_array(image):
    """
    Return an (H, W, 3) uint8 image as a (3, H, W) float32 array in [-1, 1].
    """
    return (np.asarray(image, dtype=np.float32) / 127.5 - 1).transpose(2, 0, 1)


def array_to_image(array):
    """
    Return a (3, H, W) array in [-1, 1] as an (H, W, 3) uint8 image.
    """
    scaled = (np.clip(np.asarray(array, dtype=np.float64), -1, 1) + 1) * 127.5
    return np.round(scaled).astype(np.uint8).transpose(1, 2, 0)


def load_image(path, size=None):
    with Image.open(path) as image:
        image = image.convert("RGB")
        if size is not None and image.size != (size, size):
            image = image.resize((size, size), Image.BILINEAR)
        return np.asarray(image, dtype=np.uint8)


def save_image(image, path):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


@attr.s(frozen=True)
class SyntheticFrame:
    identity = attr.ib(type=str)
    frame = attr.ib(type=str)
    seed = attr.ib(type=int)
    identity_index = attr.ib(type=int)
    frame_index = attr.ib(type=int)

    def load(self, size):
        """
        Return the (image, landmarks) of this frame rendered at ``size``.
        """
        identity = IdentityParams.from_seed(self.seed, self.identity_index)
        expression = ExpressionParams.from_seed(self.seed, self.identity_index, self.frame_index)
        return synth_render(identity, expression, size)


@attr.s(frozen=True)
class DiskFrame:
    identity = attr.ib(type=str)
    frame = attr.ib(type=str)
    image_path = attr.ib(type=str)
    landmarks_path = attr.ib(type=str)

    def load(self, size):
        return load_image(self.image_path, size), LandmarkSet.read(self.landmarks_path)


@attr.s(frozen=True)
class DatasetManifest:
    """
    Frames per identity and the disjoint train/test identity split.
    ``frames`` maps an identity name to a tuple of frame records.
    """

    frames = attr.ib(type=dict)
    train = attr.ib(type=tuple, converter=tuple)
    test = attr.ib(type=tuple, converter=tuple)
    seed = attr.ib(type=int, default=0)

    def __attrs_post_init__(self):
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise DatasetError(f"train and test identities overlap: {sorted(overlap)!r}")
        unknown = (set(self.train) | set(self.test)) - set(self.frames)
        if unknown:
            raise DatasetError(f"split names unknown identities: {sorted(unknown)!r}")

    @property
    def identities(self):
        return tuple(sorted(self.frames))

    def split(self, name):
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        raise DatasetError(f"Unknown split: {name!r}")

    def frame_count(self):
        return sum(len(frames) for frames in self.frames.values())

    def frame_keys(self):
        return sorted((f.identity, f.frame) for frames in self.frames.values() for f in frames)

    def with_frames(self, frames):
        return attr.evolve(self, frames=dict(frames))

    def to_text(self, root=None):
        """
        Return the line-oriented manifest: one "path identity" line per frame.
        """
        lines = []
        for identity in self.identities:
            for frame in self.frames[identity]:
                path = getattr(frame, "image_path", None)
                if path is None:
                    path = f"{identity}/{frame.frame}.png"
                elif root is not None:
                    path = os.path.relpath(path, root).replace(os.sep, "/")
                lines.append(f"{path} {identity}\n")
        return "".join(lines)


def split_identities(identities, seed=0):
    """
    Return a DatasetManifest without frames assigning floor(0.8 * n) of the
    ``identities`` (a count or a sequence of names) to train and the rest to
    test, with a shuffle seeded by ``seed``.

    >>> manifest = split_identities(10, seed=3)
    >>> assert (len(manifest.train), len(manifest.test)) == (8, 2)
    """
    if isinstance(identities, int):
        identities = [f"id{i:04d}" for i in range(identities)]
    identities = sorted(identities)
    count = len(identities)
    train_count = int(math.floor(TRAIN_RATIO * count))
    if train_count == 0:
        logger.warning("Only %d identities: the train split is empty", count)
    order = np.random.default_rng(seed).permutation(count)
    train = sorted(identities[i] for i in order[:train_count])
    test = sorted(identities[i] for i in order[train_count:])
    return DatasetManifest(frames={i: () for i in identities}, train=train, test=test, seed=seed)


def make_synthetic_manifest(n_identities, n_frames=DEFAULT_FRAMES, seed=0):
    manifest = split_identities(n_identities, seed)
    frames = {}
    for index, identity in enumerate(manifest.identities):
        frames[identity] = tuple(
            SyntheticFrame(
                identity=identity,
                frame=f"{frame:04d}",
                seed=seed,
                identity_index=index,
                frame_index=frame,
            )
            for frame in range(n_frames)
        )
    return manifest.with_frames(frames)


def write_dataset(manifest, root, size):
    """
    Render or copy every frame of ``manifest`` under ``root`` as
    ``<identity>/<frame>.png`` with a sibling ``.lms`` file and write the
    ``manifest.txt`` index. Return the on-disk manifest.
    """
    os.makedirs(root, exist_ok=True)
    frames = {}
    for identity in manifest.identities:
        directory = os.path.join(root, identity)
        os.makedirs(directory, exist_ok=True)
        written = []
        for frame in manifest.frames[identity]:
            image, landmarks = frame.load(size)
            image_path = os.path.join(directory, f"{frame.frame}.png")
            landmarks_path = os.path.join(directory, f"{frame.frame}.lms")
            save_image(image, image_path)
            landmarks.write(landmarks_path)
            written.append(DiskFrame(identity, frame.frame, image_path, landmarks_path))
        frames[identity] = tuple(written)

    on_disk = manifest.with_frames(frames)
    with open(os.path.join(root, MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as f:
        f.write(on_disk.to_text(root=root))
    logger.info(
        "Wrote %d frames of %d identities to %s", on_disk.frame_count(), len(frames), root
    )
    return on_disk


def _valid_frame(identity, image_path):
    stem = os.path.splitext(image_path)[0]
    landmarks_path = stem + ".lms"
    if not os.path.isfile(landmarks_path):
        logger.warning("Skipping %s: missing landmark file %s", image_path, landmarks_path)
        return None
    try:
        LandmarkSet.read(landmarks_path)
        with Image.open(image_path) as image:
            image.verify()
    except (FarganError, OSError) as e:
        logger.warning("Skipping %s: %s", image_path, e)
        return None
    return DiskFrame(identity, os.path.basename(stem), image_path, landmarks_path)


def ingest_directory(root, seed=0):
    """
    Return a DatasetManifest of every valid frame under ``root``. Frames
    without a landmark sibling or with unreadable files are skipped with a
    warning. Identities are split with ``seed``.
    """
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} is not a directory")
    frames = {}
    for identity in sorted(os.listdir(root)):
        directory = os.path.join(root, identity)
        if not os.path.isdir(directory):
            continue
        records = []
        for name in sorted(os.listdir(directory)):
            if not name.lower().endswith(".png"):
                continue
            record = _valid_frame(identity, os.path.join(directory, name))
            if record is not None:
                records.append(record)
        if records:
            frames[identity] = tuple(records)
        else:
            logger.warning("Skipping identity %s: no valid frames", identity)
    if not frames:
        raise DatasetError(f"no valid frames found under {root!r}")

    manifest = split_identities(list(frames), seed).with_frames(frames)
    logger.info(
        "Ingested %d frames of %d identities from %s", manifest.frame_count(), len(frames), root
    )
    return manifest


def read_manifest_file(root, seed=0):
    """
    Return the DatasetManifest listed in ``root/manifest.txt``.
    """
    try:
        with open(os.path.join(root, MANIFEST_NAME), encoding="utf-8") as f:
            lines = f.read().splitlines()
    except UnicodeDecodeError as e:
        raise DatasetError(f"{MANIFEST_NAME} under {root!r} is not valid UTF-8") from e

    frames = {}
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            path, identity = line.split()
        except ValueError as e:
            raise DatasetError(f"{MANIFEST_NAME} line {line_number}: {line!r}") from e
        image_path = os.path.join(root, path)
        stem = os.path.splitext(image_path)[0]
        record = DiskFrame(identity, os.path.basename(stem), image_path, stem + ".lms")
        frames.setdefault(identity, []).append(record)
    if not frames:
        raise DatasetError(f"{MANIFEST_NAME} under {root!r} lists no frames")
    frames = {identity: tuple(records) for identity, records in frames.items()}
    return split_identities(list(frames), seed).with_frames(frames)


@attr.s(frozen=True)
class SamplePair:
    """
    One training triplet: source and target frames of the same identity as
    (3, S, S) arrays in [-1, 1] and the target landmark mask.
    """

    x_src = attr.ib(repr=False)
    x_tgt = attr.ib(repr=False)
    m_tgt = attr.ib(repr=False)
    identity = attr.ib(type=str)
    t1 = attr.ib(type=str)
    t2 = attr.ib(type=str)

    def __attrs_post_init__(self):
        if self.t1 == self.t2:
            raise DatasetError(f"source and target frames must differ, both are {self.t1!r}")


def sample_pair(manifest, split, rng, size, mask_mode="contour"):
    """
    Return a SamplePair from a uniformly drawn identity of ``split`` with two
    distinct uniformly drawn frames. Identities with fewer than two frames are
    redrawn.
    """
    identities = manifest.split(split)
    if not any(len(manifest.frames[i]) >= 2 for i in identities):
        raise DatasetError(f"no identity of the {split} split has at least two frames")
    while True:
        identity = identities[int(rng.integers(len(identities)))]
        frames = manifest.frames[identity]
        if len(frames) >= 2:
            break
        logger.debug("Redrawing: identity %s has %d frame(s)", identity, len(frames))

    first, second = rng.choice(len(frames), size=2, replace=False)
    source, target = frames[int(first)], frames[int(second)]
    source_image, _ = source.load(size)
    target_image, target_landmarks = target.load(size)
    return SamplePair(
        x_src=image_to_array(source_image),
        x_tgt=image_to_array(target_image),
        m_tgt=rasterize(target_landmarks, size, mask_mode),
        identity=identity,
        t1=source.frame,
        t2=target.frame,
    )


def collate(pairs):
    """
    Return (sources, targets, masks) batch Tensors of a list of SamplePairs.
    """
    sources = np.stack([p.x_src for p in pairs])
    targets = np.stack([p.x_tgt for p in pairs])
    masks = np.stack([p.m_tgt.to_array() for p in pairs])
    return T.Tensor(sources), T.Tensor(targets), T.Tensor(masks)
