"""Seeded stick-figure dataset generator and PPM (P6) image I/O.

Figures are 17-joint humanoids posed by jittered bone lengths and angles,
rendered with anti-aliased limbs and radially shaded joint discs on a noise
background. Occluded joints keep their true coordinates in the annotation
with v=0 and get a flat patch drawn over them. Identical spec + seed produce
byte-identical datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .autodiff import rng_from_seed
from .errors import ConfigurationError
from .evaluate import KeypointAnnotation, save_annotations

# COCO joint order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
BONES = [
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6),
    (5, 7), (6, 8), (7, 9), (8, 10), (0, 1), (0, 2), (1, 3), (2, 4),
]


@dataclass
class SynthSpec:
    num_images: int = 50
    image_size: Tuple[int, int] = (96, 96)   # (H, W)
    # bone lengths as (lo, hi) fractions of the sampled body height
    torso_range: Tuple[float, float] = (0.26, 0.32)
    limb_range: Tuple[float, float] = (0.20, 0.26)     # thigh/shin per segment
    arm_range: Tuple[float, float] = (0.15, 0.20)      # upper arm/forearm per segment
    head_range: Tuple[float, float] = (0.09, 0.12)     # neck to nose
    body_height_range: Tuple[float, float] = (0.72, 0.92)  # fraction of min image side
    limb_thickness: float = 2.0
    noise_level: float = 0.08
    occlusion_prob: float = 0.0
    seed: int = 0


def _sample_pose(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Joint positions [17, 2] in a local frame, y pointing down."""
    s = rng.uniform(*spec.body_height_range) * min(spec.image_size)
    torso = rng.uniform(*spec.torso_range) * s
    thigh = rng.uniform(*spec.limb_range) * s
    shin = rng.uniform(*spec.limb_range) * s
    uarm = rng.uniform(*spec.arm_range) * s
    farm = rng.uniform(*spec.arm_range) * s
    head = rng.uniform(*spec.head_range) * s
    shoulder_hw = 0.11 * s
    hip_hw = 0.07 * s

    def polar(origin, angle, length):
        # angle measured from straight down (positive y)
        return origin + length * np.array([math.sin(angle), math.cos(angle)])

    j = np.zeros((17, 2))
    tilt = rng.uniform(-0.18, 0.18)
    hip_c = np.array([0.0, 0.0])
    neck = polar(hip_c, tilt + math.pi, torso)   # upwards
    j[11] = hip_c + [-hip_hw, 0.0]
    j[12] = hip_c + [hip_hw, 0.0]
    j[5] = neck + [-shoulder_hw, 0.0]
    j[6] = neck + [shoulder_hw, 0.0]
    nose = polar(neck, tilt + math.pi + rng.uniform(-0.2, 0.2), head)
    j[0] = nose
    eye_dx, eye_dy = 0.45 * head, 0.28 * head
    ear_dx, ear_dy = 0.85 * head, 0.05 * head
    j[1] = nose + [-eye_dx, -eye_dy]
    j[2] = nose + [eye_dx, -eye_dy]
    j[3] = nose + [-ear_dx, ear_dy]
    j[4] = nose + [ear_dx, ear_dy]
    for side, sh, hp in ((0, 5, 11), (1, 6, 12)):
        sgn = -1.0 if side == 0 else 1.0
        a_u = rng.uniform(-1.0, 1.0) + sgn * 0.25
        elbow = polar(j[sh], a_u, uarm)
        wrist = polar(elbow, a_u + rng.uniform(-0.9, 0.9), farm)
        j[7 + side] = elbow
        j[9 + side] = wrist
        a_t = rng.uniform(-0.45, 0.45) + sgn * 0.10
        knee = polar(j[hp], a_t, thigh)
        ankle = polar(knee, a_t + rng.uniform(-0.5, 0.5), shin)
        j[13 + side] = knee
        j[15 + side] = ankle
    return j


MIN_JOINT_SEPARATION = 3.0   # px; keeps disc peaks distinct and decodable


def _sample_separated_pose(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Resample until no two joints collide (bounded, deterministic retries)."""
    joints = _sample_pose(spec, rng)
    for _ in range(200):
        d = np.hypot(joints[:, None, 0] - joints[None, :, 0],
                     joints[:, None, 1] - joints[None, :, 1])
        np.fill_diagonal(d, np.inf)
        if d.min() >= MIN_JOINT_SEPARATION:
            return joints
        joints = _sample_pose(spec, rng)
    return joints


def _place_in_frame(joints: np.ndarray, spec: SynthSpec,
                    rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    margin = spec.limb_thickness + 4.0
    lo = joints.min(axis=0)
    hi = joints.max(axis=0)
    span = hi - lo
    free_x = w - 1 - 2 * margin - span[0]
    free_y = h - 1 - 2 * margin - span[1]
    if free_x < 0 or free_y < 0:
        # figure sampled too large for the frame; shrink around its center
        scale = min((w - 1 - 2 * margin) / span[0], (h - 1 - 2 * margin) / span[1])
        center = (lo + hi) / 2.0
        joints = (joints - center) * scale + center
        lo, hi = joints.min(axis=0), joints.max(axis=0)
        span = hi - lo
        free_x = w - 1 - 2 * margin - span[0]
        free_y = h - 1 - 2 * margin - span[1]
    shift = np.array([margin + rng.uniform(0, max(free_x, 0)) - lo[0],
                      margin + rng.uniform(0, max(free_y, 0)) - lo[1]])
    return joints + shift


def _render(joints: np.ndarray, visible: np.ndarray, spec: SynthSpec,
            rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    alpha = np.zeros((h, w))

    def seg_alpha(p, q, thickness, peak):
        d = q - p
        L2 = float(d @ d)
        if L2 == 0:
            dist = np.hypot(xs - p[0], ys - p[1])
        else:
            t = np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / L2, 0.0, 1.0)
            dist = np.hypot(xs - (p[0] + t * d[0]), ys - (p[1] + t * d[1]))
        return peak * np.clip(thickness / 2.0 + 0.8 - dist, 0.0, 1.0)

    for a, b in BONES:
        np.maximum(alpha, seg_alpha(joints[a], joints[b], spec.limb_thickness, 0.8),
                   out=alpha)
    disc_r = max(spec.limb_thickness, 2.0)
    for j in range(17):
        d = np.hypot(xs - joints[j, 0], ys - joints[j, 1])
        # radially shaded disc: unique peak exactly at the joint center
        profile = np.clip(1.0 - 0.25 * (d / disc_r) ** 2, 0.0, 1.0)
        edge = np.clip(disc_r + 0.8 - d, 0.0, 1.0)
        np.maximum(alpha, profile * edge, out=alpha)

    bg = 0.10 + spec.noise_level * rng.random((h, w, 3))
    tint = rng.uniform(0.82, 1.0, size=3)
    img = bg * (1.0 - alpha[:, :, None]) + alpha[:, :, None] * tint[None, None, :]

    # flat occluder patches over invisible joints
    for j in range(17):
        if visible[j]:
            continue
        r = disc_r + 2.0
        x0, x1 = int(max(0, joints[j, 0] - r)), int(min(w, joints[j, 0] + r + 1))
        y0, y1 = int(max(0, joints[j, 1] - r)), int(min(h, joints[j, 1] + r + 1))
        img[y0:y1, x0:x1] = rng.uniform(0.2, 0.5)
    return np.clip(img, 0.0, 1.0)


def write_ppm(path: Path | str, img: np.ndarray):
    """img: [H, W, 3] uint8, written as binary P6."""
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.astype(np.uint8).tobytes())


def read_ppm(path: Path | str) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ConfigurationError(f"{path}: not a binary P6 PPM file")
    fields: List[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1   # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ConfigurationError(f"{path}: unsupported maxval {maxval}")
    arr = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return arr.reshape(h, w, 3).copy()


def image_to_array(img_u8: np.ndarray) -> np.ndarray:
    """[H, W, 3] uint8 -> [3, H, W] float in [0, 1]."""
    return np.ascontiguousarray(img_u8.transpose(2, 0, 1)).astype(np.float64) / 255.0


def synth_generate(spec: SynthSpec, out_dir: Path | str) -> List[KeypointAnnotation]:
    """Render the dataset to out_dir/images plus out_dir/annotations.json."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create dataset directory {out}: {e}") from e
    rng = rng_from_seed(spec.seed, stream=101)
    h, w = spec.image_size
    anns = []
    total_visible = 0
    for i in range(spec.num_images):
        joints = _place_in_frame(_sample_separated_pose(spec, rng), spec, rng)
        visible = rng.random(17) >= spec.occlusion_prob
        img = _render(joints, visible, spec, rng)
        img_u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        name = f"img_{i:05d}.ppm"
        write_ppm(out / "images" / name, img_u8)
        kp = np.zeros((17, 3))
        kp[:, :2] = joints
        kp[:, 2] = np.where(visible, 2.0, 0.0)
        total_visible += int(visible.sum())
        lo, hi = joints.min(axis=0), joints.max(axis=0)
        pad = spec.limb_thickness + 2.0
        area = float((hi[0] - lo[0] + 2 * pad) * (hi[1] - lo[1] + 2 * pad))
        anns.append(KeypointAnnotation(image_id=i, width=w, height=h, area=area,
                                       keypoints=kp, file_name=name))
    meta = {
        "generator": "stick-figure-synth",
        "seed": spec.seed,
        "num_images": spec.num_images,
        "occlusion_prob": spec.occlusion_prob,
        "untrainable": total_visible == 0,
    }
    save_annotations(out / "annotations.json", anns, meta)
    return anns


def load_dataset(data_dir: Path | str):
    """Returns (images as [3, H, W] float arrays, annotations, meta)."""
    from .evaluate import load_annotations
    data_dir = Path(data_dir)
    anns, meta = load_annotations(data_dir / "annotations.json")
    images = [image_to_array(read_ppm(data_dir / "images" / a.file_name)) for a in anns]
    return images, anns, meta
