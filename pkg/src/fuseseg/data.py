"""Synthetic surgical-video benchmark and instrument-overlay augmentation.

Cases are short videos of smoothly deforming colored blobs, one per anatomy
class, over a tissue-toned background with texture noise, optional camera
pan, and optional red bleeding splotches. Labels trace the rendered regions
exactly, so the ground truth is pixel-perfect by construction.

Instrument clips render an elongated dark tool entering from the left frame
edge and sweeping across frames; compositing hard-pastes instrument pixels
over a case frame and relabels occluded anatomy as background.

Class indices: 0 background, 1 SF, 2 TS, 3 IP, 4 CR, 5 OCR, 6 OP.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DimensionError, EligibilityError, ValidationError

ANATOMY_CLASSES = (1, 2, 3, 4, 5, 6)
MAJORITY_CLASSES = (1, 2, 4)  # SF, TS, CR: present in essentially every case
MINORITY_CLASSES = (3, 5, 6)  # IP, OCR, OP: present in a configurable minority

BACKGROUND_COLOR = (172, 120, 112)
CLASS_COLORS = {
    1: (206, 182, 92),   # SF
    2: (92, 170, 204),   # TS
    3: (212, 94, 156),   # IP
    4: (96, 192, 112),   # CR
    5: (142, 92, 204),   # OCR
    6: (228, 228, 224),  # OP
}
_BLEED_COLOR = np.array([198.0, 28.0, 32.0])

# Class anchor positions as (x, y) fractions of the frame.
_ANCHORS = {
    1: (0.50, 0.76),
    2: (0.50, 0.22),
    3: (0.78, 0.50),
    4: (0.50, 0.48),
    5: (0.22, 0.30),
    6: (0.22, 0.70),
}


class InstrumentKind(enum.Enum):
    SUCTION_TUBE = "suction_tube"
    RONGEUR = "rongeur"
    CUTTING_FORCEPS = "cutting_forceps"
    CUP_FORCEPS = "cup_forceps"
    BIPOLAR_ELECTRODE = "bipolar_electrode"
    FREER = "freer"
    SCISSORS = "scissors"


_TIP_STYLES = {
    InstrumentKind.SUCTION_TUBE: "plain",
    InstrumentKind.RONGEUR: "fork",
    InstrumentKind.CUTTING_FORCEPS: "fork",
    InstrumentKind.CUP_FORCEPS: "disc",
    InstrumentKind.BIPOLAR_ELECTRODE: "plain",
    InstrumentKind.FREER: "blade",
    InstrumentKind.SCISSORS: "fork",
}


@dataclass(frozen=True)
class GenConfig:
    """Knobs for synthetic case and instrument-clip generation."""

    size: Tuple[int, int] = (32, 32)
    num_frames: int = 8
    classes: Tuple[int, ...] = ANATOMY_CLASSES
    max_step: float = 3.0
    noise_level: float = 8.0
    pan_amplitude: float = 1.0
    bleed_rate: float = 0.5
    minority_rate: float = 0.25
    clip_frames: Optional[int] = None

    def __post_init__(self):
        if any(c not in ANATOMY_CLASSES for c in self.classes):
            raise ConfigurationError(f"classes must be within 1..6, got {self.classes}")
        if not self.classes:
            raise ConfigurationError("at least one class must be configured")
        if self.num_frames < 1:
            raise ConfigurationError(f"num_frames must be >= 1, got {self.num_frames}")
        if min(self.size) < 16:
            raise ConfigurationError(f"frames must be at least 16x16, got {self.size}")
        if self.max_step <= 0 or self.pan_amplitude < 0:
            raise ConfigurationError("max_step must be positive and pan_amplitude nonnegative")


@dataclass(frozen=True)
class CaseMetadata:
    case_id: str
    present_classes: Tuple[int, ...]
    provenance: str
    seed: int


@dataclass
class VideoSample:
    """A case: ordered RGB frames with per-pixel class labels and metadata."""

    case_id: str
    frames: List[np.ndarray]
    labels: List[np.ndarray]
    metadata: CaseMetadata

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise DimensionError(
                f"case {self.case_id}: {len(self.frames)} frames but {len(self.labels)} labels"
            )
        sizes = {f.shape[:2] for f in self.frames} | {l.shape for l in self.labels}
        if len(sizes) > 1:
            raise DimensionError(f"case {self.case_id}: inconsistent frame/label sizes {sizes}")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> Tuple[int, int]:
        return self.frames[0].shape[:2]


@dataclass
class InstrumentClip:
    """Rendered instrument frames with exact binary masks."""

    frames: List[np.ndarray]
    masks: List[np.ndarray]
    instrument_kind: InstrumentKind

    def __post_init__(self):
        if len(self.frames) != len(self.masks):
            raise DimensionError(
                f"instrument clip has {len(self.frames)} frames but {len(self.masks)} masks"
            )
        if not any(m.any() for m in self.masks):
            raise ValidationError("instrument clip must have a nonempty mask on at least one frame")

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def sample_case_classes(rng: np.random.Generator, minority_rate: float = 0.25) -> Tuple[int, ...]:
    """Majority classes always present; each minority class with the given rate."""
    present = list(MAJORITY_CLASSES)
    for c in MINORITY_CLASSES:
        if rng.random() < minority_rate:
            present.append(c)
    return tuple(sorted(present))


def _blob_mask(
    size: Tuple[int, int],
    center: Tuple[float, float],
    radii: Tuple[float, float],
    wobble_amp: float,
    wobble_freq: int,
    phase: float,
) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    dx = (xs - center[0]) / radii[0]
    dy = (ys - center[1]) / radii[1]
    rho = np.sqrt(dx * dx + dy * dy)
    theta = np.arctan2(dy, dx)
    boundary = 1.0 + wobble_amp * np.sin(wobble_freq * theta + phase)
    return rho <= boundary


def generate_synthetic_case(seed: int, cfg: GenConfig, case_id: Optional[str] = None) -> VideoSample:
    """Deterministic synthetic case; equal seeds produce bitwise-equal output."""
    rng = np.random.default_rng(seed)
    h, w = cfg.size
    scale = min(h, w)

    blobs = {}
    for c in sorted(cfg.classes):
        base_r = scale * rng.uniform(0.10, 0.14)
        aspect = rng.uniform(0.85, 1.18)
        wobble_amp = rng.uniform(0.08, 0.15)
        wobble_freq = int(rng.integers(2, 4))
        phase = rng.uniform(0.0, 2 * np.pi)
        phase_speed = rng.uniform(0.2, 0.5)
        radii = (base_r * aspect, base_r / aspect)
        margin = max(radii) * (1.0 + wobble_amp) + 1.5
        ax, ay = _ANCHORS[c]
        cx = float(np.clip(ax * w + rng.uniform(-1.0, 1.0), margin, w - 1 - margin))
        cy = float(np.clip(ay * h + rng.uniform(-1.0, 1.0), margin, h - 1 - margin))
        blobs[c] = {
            "center": np.array([cx, cy]),
            "radii": radii,
            "wobble_amp": wobble_amp,
            "wobble_freq": wobble_freq,
            "phase": phase,
            "phase_speed": phase_speed,
            "margin": margin,
        }

    # Per-frame motion budget: camera pan plus local drift stays
    # comfortably below max_step so rendered centroids respect it too.
    local_amp = min(1.0, max(0.0, cfg.max_step - cfg.pan_amplitude - 1.0))

    frames: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for t in range(cfg.num_frames):
        if t > 0:
            pan = rng.uniform(-1.0, 1.0, size=2)
            norm = np.linalg.norm(pan)
            if norm > 1e-9:
                pan = pan / norm * rng.uniform(0.0, cfg.pan_amplitude)
            for c in sorted(cfg.classes):
                local = rng.uniform(-1.0, 1.0, size=2)
                lnorm = np.linalg.norm(local)
                if lnorm > 1e-9:
                    local = local / lnorm * rng.uniform(0.0, local_amp)
                b = blobs[c]
                moved = b["center"] + pan + local
                b["center"] = np.array(
                    [
                        np.clip(moved[0], b["margin"], w - 1 - b["margin"]),
                        np.clip(moved[1], b["margin"], h - 1 - b["margin"]),
                    ]
                )

        img = np.empty((h, w, 3), dtype=np.float64)
        img[:] = BACKGROUND_COLOR
        img += rng.normal(0.0, cfg.noise_level, size=(h, w, 3))
        label = np.zeros((h, w), dtype=np.uint8)
        for c in sorted(cfg.classes):
            b = blobs[c]
            mask = _blob_mask(
                cfg.size,
                tuple(b["center"]),
                b["radii"],
                b["wobble_amp"],
                b["wobble_freq"],
                b["phase"] + b["phase_speed"] * t,
            )
            color = np.array(CLASS_COLORS[c], dtype=np.float64)
            img[mask] = color + rng.normal(0.0, cfg.noise_level, size=(int(mask.sum()), 3))
            label[mask] = c

        if rng.random() < cfg.bleed_rate:
            for _ in range(int(rng.integers(1, 3))):
                bx, by = rng.uniform(2, w - 3), rng.uniform(2, h - 3)
                br = rng.uniform(1.5, 3.5)
                ys, xs = np.mgrid[0:h, 0:w]
                splotch = (xs - bx) ** 2 + (ys - by) ** 2 <= br**2
                img[splotch] = 0.65 * img[splotch] + 0.35 * _BLEED_COLOR

        frames.append(np.clip(img, 0, 255).astype(np.uint8))
        labels.append(label)

    present = _present_classes(labels)
    cid = case_id if case_id is not None else f"case_{seed:08x}"
    meta = CaseMetadata(case_id=cid, present_classes=present, provenance="synthetic", seed=seed)
    return VideoSample(case_id=cid, frames=frames, labels=labels, metadata=meta)


def _present_classes(labels: Sequence[np.ndarray]) -> Tuple[int, ...]:
    seen = set()
    for lab in labels:
        seen |= set(np.unique(lab).tolist())
    return tuple(sorted(c for c in seen if c != 0))


def _capsule_dist(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every grid point to segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def generate_instrument_clip(seed: int, cfg: GenConfig) -> InstrumentClip:
    """A dark shaft-plus-tip tool entering from the left edge and sweeping right."""
    rng = np.random.default_rng(seed)
    h, w = cfg.size
    num_frames = cfg.clip_frames if cfg.clip_frames is not None else cfg.num_frames
    kind = InstrumentKind(list(InstrumentKind)[int(rng.integers(0, len(InstrumentKind)))])
    style = _TIP_STYLES[kind]

    anchor = np.array([-1.0, rng.uniform(0.25 * h, 0.75 * h)])
    angle = rng.uniform(-0.4, 0.4)
    half_width = rng.uniform(1.2, 1.8)
    step = rng.uniform(1.0, 1.5)
    tip = anchor + np.array([np.cos(angle), np.sin(angle)]) * rng.uniform(4.0, 6.0)

    ys, xs = np.mgrid[0:h, 0:w]
    points = np.stack([xs, ys], axis=-1).astype(np.float64)

    frames: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    for t in range(num_frames):
        if t > 0:
            angle += rng.uniform(-0.06, 0.06)
            advance = np.array([np.cos(angle), np.sin(angle)]) * step
            tip = tip + advance
            tip[0] = np.clip(tip[0], 3.0, w - 3.0)
            tip[1] = np.clip(tip[1], 2.0, h - 3.0)

        dist = _capsule_dist(points, anchor, tip)
        mask = dist <= half_width
        if style == "fork":
            prong_len = 3.0
            direction = (tip - anchor) / max(np.linalg.norm(tip - anchor), 1e-9)
            for sign in (-1.0, 1.0):
                rot = np.array(
                    [
                        [np.cos(sign * 0.45), -np.sin(sign * 0.45)],
                        [np.sin(sign * 0.45), np.cos(sign * 0.45)],
                    ]
                )
                prong_end = tip + rot @ direction * prong_len
                mask |= _capsule_dist(points, tip, prong_end) <= half_width * 0.6
        elif style == "disc":
            mask |= np.linalg.norm(points - tip, axis=-1) <= half_width + 1.2
        elif style == "blade":
            direction = (tip - anchor) / max(np.linalg.norm(tip - anchor), 1e-9)
            blade_end = tip + direction * 2.5
            mask |= _capsule_dist(points, tip, blade_end) <= half_width * 1.4

        axial = np.clip((points[..., 0] - anchor[0]) / max(w, 1), 0.0, 1.0)
        img = np.zeros((h, w, 3), dtype=np.float64)
        base = np.array([68.0, 72.0, 86.0])
        shade = base[None, None, :] * (0.8 + 0.5 * axial[..., None])
        shade += rng.normal(0.0, 3.0, size=(h, w, 3))
        img[mask] = shade[mask]
        frames.append(np.clip(img, 0, 255).astype(np.uint8))
        masks.append(mask)

    return InstrumentClip(frames=frames, masks=masks, instrument_kind=kind)


def composite_instrument(
    frame: np.ndarray, label: np.ndarray, inst_frame: np.ndarray, inst_mask: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Hard-paste instrument pixels over the frame; occluded labels become background."""
    if frame.shape[:2] != label.shape:
        raise DimensionError(f"frame {frame.shape} does not match label {label.shape}")
    if inst_frame.shape != frame.shape or inst_mask.shape != label.shape:
        raise DimensionError(
            f"instrument arrays {inst_frame.shape}/{inst_mask.shape} do not match "
            f"target {frame.shape}/{label.shape}"
        )
    mask = inst_mask.astype(bool)
    out_frame = frame.copy()
    out_label = label.copy()
    out_frame[mask] = inst_frame[mask]
    out_label[mask] = 0
    return out_frame, out_label


def clip_frame_indices(clip_len: int, target_len: int) -> List[int]:
    """Chronological linear index resampling of a clip onto a target frame count."""
    if target_len == 1:
        return [0]
    return [int(np.round(t * (clip_len - 1) / (target_len - 1))) for t in range(target_len)]


def overlay_clip(
    target: VideoSample,
    clip: InstrumentClip,
    case_id: Optional[str] = None,
    provenance: Optional[str] = None,
) -> VideoSample:
    """Composite an aligned instrument clip over every frame of a case."""
    indices = clip_frame_indices(clip.num_frames, target.num_frames)
    frames, labels = [], []
    for t, ci in enumerate(indices):
        f, l = composite_instrument(
            target.frames[t], target.labels[t], clip.frames[ci], clip.masks[ci]
        )
        frames.append(f)
        labels.append(l)
    cid = case_id if case_id is not None else target.case_id
    prov = provenance if provenance is not None else target.metadata.provenance
    meta = CaseMetadata(
        case_id=cid,
        present_classes=_present_classes(labels),
        provenance=prov,
        seed=target.metadata.seed,
    )
    return VideoSample(case_id=cid, frames=frames, labels=labels, metadata=meta)


def augment_case(target: VideoSample, clip: InstrumentClip) -> VideoSample:
    """Instrument-occlusion duplicate of a case that contains IP or OCR."""
    if not ({3, 5} & set(target.metadata.present_classes)):
        raise EligibilityError(
            f"case {target.case_id} contains neither IP (3) nor OCR (5); not eligible for augmentation"
        )
    if clip.num_frames < 1:
        raise ValidationError("instrument clip is empty")
    return overlay_clip(
        target,
        clip,
        case_id=f"{target.case_id}_aug",
        provenance=f"augmented:{target.case_id}:{clip.instrument_kind.value}",
    )


def class_distribution(dataset: Sequence[VideoSample]) -> Dict[int, float]:
    """Fraction of cases whose labels contain each class, verified against metadata."""
    if not dataset:
        raise ValidationError("class distribution of an empty dataset is undefined")
    counts = {c: 0 for c in ANATOMY_CLASSES}
    for case in dataset:
        actual = _present_classes(case.labels)
        if set(actual) != set(case.metadata.present_classes):
            raise ValidationError(
                f"case {case.case_id}: metadata claims classes {case.metadata.present_classes} "
                f"but labels contain {actual}"
            )
        for c in actual:
            counts[c] += 1
    return {c: counts[c] / len(dataset) for c in ANATOMY_CLASSES}


# ---------------------------------------------------------------------------
# On-disk layout: one directory per case (numbered frame/label PNGs plus
# meta.json), and a top-level manifest.json recording split assignment.
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")


def split_cases(num_cases: int, ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)) -> List[str]:
    """Largest-remainder assignment of case indices to train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {ratios}")
    # Quantize quotas so float noise cannot flip remainder ties.
    quotas = [round(num_cases * r, 9) for r in ratios]
    base = [int(np.floor(q)) for q in quotas]
    leftover = num_cases - sum(base)
    remainders = sorted(
        range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i)
    )
    for i in remainders[:leftover]:
        base[i] += 1
    assignment = []
    for split, count in zip(SPLITS, base):
        assignment.extend([split] * count)
    return assignment


def save_case(case: VideoSample, root: Path):
    case_dir = Path(root) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for t, (frame, label) in enumerate(zip(case.frames, case.labels)):
        Image.fromarray(frame, mode="RGB").save(case_dir / f"frame_{t:03d}.png")
        Image.fromarray(label, mode="L").save(case_dir / f"label_{t:03d}.png")
    meta = {
        "case_id": case.metadata.case_id,
        "present_classes": list(case.metadata.present_classes),
        "provenance": case.metadata.provenance,
        "seed": case.metadata.seed,
        "num_frames": case.num_frames,
        "size": list(case.size),
    }
    (case_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_case(case_dir: Path) -> VideoSample:
    case_dir = Path(case_dir)
    meta_raw = json.loads((case_dir / "meta.json").read_text())
    frames, labels = [], []
    for t in range(meta_raw["num_frames"]):
        frames.append(np.asarray(Image.open(case_dir / f"frame_{t:03d}.png").convert("RGB")))
        labels.append(np.asarray(Image.open(case_dir / f"label_{t:03d}.png")))
    meta = CaseMetadata(
        case_id=meta_raw["case_id"],
        present_classes=tuple(meta_raw["present_classes"]),
        provenance=meta_raw["provenance"],
        seed=meta_raw["seed"],
    )
    return VideoSample(case_id=meta_raw["case_id"], frames=frames, labels=labels, metadata=meta)


def save_manifest(entries: List[Dict[str, str]], root: Path):
    payload = {"format_version": 1, "cases": entries}
    (Path(root) / MANIFEST_NAME).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_manifest(root: Path) -> List[Dict[str, str]]:
    payload = json.loads((Path(root) / MANIFEST_NAME).read_text())
    if payload.get("format_version") != 1:
        raise ValidationError(f"unsupported manifest format version {payload.get('format_version')}")
    return payload["cases"]


def load_split(root: Path, split: str) -> List[VideoSample]:
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}; expected one of {SPLITS}")
    entries = load_manifest(root)
    return [load_case(Path(root) / e["case_id"]) for e in entries if e["split"] == split]
