"""Turns raw run frames into network-ready input sets.

Covers the on-disk dataset layout (one directory per concrete with
``mix.txt``, ``references.csv`` and per-run frame directories), paddle
masking, optical-flow channel construction, the assembly and skip rules,
brightness/contrast/offset augmentation, and per-category normalization
fitted on the training split only.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import protocol
from .exceptions import (EmptySurfaceError, InputError, LedDecodeError, NormalizationError,
                         ProtocolError)
from .flow import FlowParams, farneback_flow

FRAME_MAGIC = b"RHF1"
CHANNEL_NAMES = ("O", "D", "OFx", "OFy")

# normalization categories of Eq.-style per-category standardization;
# the mix vector is exempt (already scaled into [0, 2])
NORM_CATEGORIES = ("O", "D", "OF", "delta_t", "delta", "tau0", "mu")
TARGET_CATEGORIES = ("delta", "tau0", "mu")


# -- frame files ----------------------------------------------------------------

def write_frame_channel(path, grid: np.ndarray, tag: str) -> None:
    """RHF1 frame file: magic, u32 H, u32 W, channel tag byte, float32 payload."""
    if tag not in ("O", "D"):
        raise InputError(f"frame channel tag must be 'O' or 'D', got {tag!r}")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(FRAME_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(tag.encode("ascii"))
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_frame_channel(path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FRAME_MAGIC:
            raise InputError(f"{path}: bad frame magic {magic!r}")
        h, w = struct.unpack("<II", f.read(8))
        tag = f.read(1).decode("ascii")
        payload = f.read(4 * h * w)
        if len(payload) != 4 * h * w:
            raise InputError(f"{path}: truncated frame payload")
        grid = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
    return grid, tag


@dataclass
class Frame:
    """One time step of a run: orthophoto grid, depth grid, acquisition time."""

    ortho: np.ndarray      # H x W intensity in [0, 1]
    depth: np.ndarray      # H x W height in mm
    index: int
    timestamp_s: float     # seconds since run start


@dataclass
class RunData:
    run_id: str
    fps: float
    paddle_velocity: float   # m/s
    t_central_min: float     # minutes since water addition, shared by all frames
    frames: list


def write_run_meta(path, fps: float, paddle_velocity: float, t_central_min: float) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"fps = {fps!r}\n")
        f.write(f"paddle_velocity_mps = {paddle_velocity!r}\n")
        f.write(f"t_central_min = {t_central_min!r}\n")


def _read_keyvalue(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_run(run_dir) -> RunData:
    run_dir = Path(run_dir)
    meta = _read_keyvalue(run_dir / "run.txt")
    fps = float(meta["fps"])
    frames = []
    for ortho_path in sorted(run_dir.glob("f*_O.rhf")):
        index = int(ortho_path.name[1:-6])
        depth_path = run_dir / f"f{index:05d}_D.rhf"
        if not depth_path.exists():
            continue
        ortho, _ = read_frame_channel(ortho_path)
        depth, _ = read_frame_channel(depth_path)
        frames.append(Frame(ortho=ortho, depth=depth, index=index, timestamp_s=index / fps))
    return RunData(run_id=run_dir.name, fps=fps,
                   paddle_velocity=float(meta["paddle_velocity_mps"]),
                   t_central_min=float(meta["t_central_min"]), frames=frames)


@dataclass
class CampaignData:
    root: Path
    concrete_ids: list
    recycled: dict
    mask_threshold_mm: float
    image_size: tuple
    seed: int


def load_campaign(root) -> CampaignData:
    root = Path(root)
    meta = _read_keyvalue(root / "campaign.txt")
    ids = sorted(d.name for d in root.iterdir() if d.is_dir() and d.name.startswith("concrete_"))
    recycled = {cid: meta.get(f"recycled.{cid}", "0") == "1" for cid in ids}
    return CampaignData(root=root, concrete_ids=ids, recycled=recycled,
                        mask_threshold_mm=float(meta["mask_threshold_mm"]),
                        image_size=(int(meta["image_h"]), int(meta["image_w"])),
                        seed=int(meta.get("seed", "0")))


def concrete_summaries(campaign: CampaignData) -> list:
    """Fold-plan inputs: first slump flow diameter and recycled flag per concrete."""
    out = []
    for cid in campaign.concrete_ids:
        refs = protocol.read_references_csv(campaign.root / cid / "references.csv")
        slumps = sorted((r for r in refs if r.kind == "slump"), key=lambda r: r.timestamp_min)
        if not slumps:
            raise ProtocolError(f"{cid}: no slump measurement, cannot determine delta1")
        out.append(protocol.ConcreteSummary(cid, slumps[0].values[0], campaign.recycled[cid]))
    return out


# -- paddle masking --------------------------------------------------------------

def mask_paddle(depth: np.ndarray, threshold_mm: float) -> tuple[np.ndarray, np.ndarray]:
    """Replace cells above the height threshold by the mean of the valid cells.

    Returns the masked grid and the validity mask. Idempotent: replacement
    values are themselves below the threshold.
    """
    if not np.isfinite(threshold_mm):
        raise InputError("mask threshold must be finite")
    valid = depth <= threshold_mm
    if not valid.any():
        raise EmptySurfaceError("every depth cell is above the paddle threshold")
    if valid.all():
        return depth.copy(), valid
    fill = depth[valid].mean(dtype=np.float64)
    masked = np.where(valid, depth, depth.dtype.type(fill))
    return masked, valid


# -- LED synchronization strip ----------------------------------------------------

LED_CELLS = 20
LED_ON = 0.9
LED_OFF = 0.1
LED_DEAD_LOW = 0.4
LED_DEAD_HIGH = 0.6
LED_PERIOD_MS = 2 ** LED_CELLS


def led_geometry(width: int) -> tuple[int, int, int]:
    """(cell width px, strip height px, column offset) of the 20-cell strip."""
    cell = max(1, width // 24)
    return cell, cell, 1


def embed_led_code(ortho: np.ndarray, timestamp_ms: int) -> None:
    """Write the 20-bit binary counter of ``timestamp_ms`` mod 2^20 (MSB first)."""
    cell, height, x0 = led_geometry(ortho.shape[1])
    code = timestamp_ms % LED_PERIOD_MS
    for k in range(LED_CELLS):
        bit = (code >> (LED_CELLS - 1 - k)) & 1
        x = x0 + k * cell
        ortho[0:height, x:x + cell] = LED_ON if bit else LED_OFF


def extract_led_code(ortho: np.ndarray) -> np.ndarray:
    """Mean intensity of each of the 20 strip cells."""
    cell, height, x0 = led_geometry(ortho.shape[1])
    return np.array([ortho[0:height, x0 + k * cell: x0 + (k + 1) * cell].mean()
                     for k in range(LED_CELLS)])


def decode_led_code(intensities: np.ndarray) -> int:
    """Timestamp in ms from cell intensities; dead-zone cells are unreadable."""
    if len(intensities) != LED_CELLS:
        raise LedDecodeError(f"expected {LED_CELLS} cells, got {len(intensities)}")
    value = 0
    for k, intensity in enumerate(intensities):
        if LED_DEAD_LOW <= intensity <= LED_DEAD_HIGH:
            raise LedDecodeError(f"cell {k} unreadable: intensity {intensity:.3f} "
                                 f"inside dead zone [{LED_DEAD_LOW}, {LED_DEAD_HIGH}]")
        bit = 1 if intensity > LED_DEAD_HIGH else 0
        value = (value << 1) | bit
    return value


@dataclass
class SyncResult:
    synchronized: bool
    left_ms: int
    right_ms: int


def verify_sync(left_code: np.ndarray, right_code: np.ndarray) -> SyncResult:
    """Decode both 20-cell codes and compare the millisecond timestamps."""
    left_ms = decode_led_code(left_code)
    right_ms = decode_led_code(right_code)
    return SyncResult(synchronized=left_ms == right_ms, left_ms=left_ms, right_ms=right_ms)


# -- input sets --------------------------------------------------------------------

@dataclass
class InputSet:
    """One network sample: channel stack, time offsets, mix vector, targets."""

    image: np.ndarray          # (C, H, W) float32, not yet normalized
    channels: tuple            # names of the stacked channels, subset of CHANNEL_NAMES
    delta_t: np.ndarray        # (2,) minutes
    mix: np.ndarray            # (18,) scaled mix vector
    targets: np.ndarray        # (3,) raw units (cm, Pa, Pa*s)
    target_mask: np.ndarray    # (3,) bool; [0] always True
    concrete_id: str
    run_id: str
    frame_index: int
    slump_ref_id: int
    rheo_ref_id: int


DEFAULT_SKIP_HEAD = 20


def assemble_input_sets(frames, combos, mix: protocol.MixDesign, *, t_central_min: float,
                        mask_threshold_mm: float, fps: float, paddle_velocity: float,
                        concrete_id: str = "", run_id: str = "",
                        skip_head: int = DEFAULT_SKIP_HEAD,
                        channels=CHANNEL_NAMES, flow_params: FlowParams = FlowParams(),
                        seed: int = 0) -> list[InputSet]:
    """Build one input set per consecutive frame pair, after the skip rule.

    A set is only generated when frame i+1 exists (gaps from frame drops
    break pairs), the first ``skip_head`` eligible sets of the run are
    dropped, and every set carries the run's central timestamp. ``combos``
    may be a single reference combination or a sequence; sequences are
    assigned round-robin over the frame index with a seeded phase.
    """
    if isinstance(combos, protocol.ReferenceCombination):
        combos = [combos]
    combos = list(combos)
    if not combos:
        raise ProtocolError("need at least one reference combination")

    by_index = {f.index: f for f in frames}
    eligible = [i for i in sorted(by_index) if i + 1 in by_index]
    if len(eligible) <= skip_head:
        warnings.warn(f"run {run_id or '?'} too short: {len(eligible)} eligible pairs "
                      f"<= skip_head {skip_head}; no input sets generated", stacklevel=2)
        return []

    offset = protocol.combination_offset(seed, concrete_id, run_id, len(combos))
    mix_vec = mix.with_run_tags(paddle_velocity, fps).astype(np.float32)
    need_flow = any(ch.startswith("OF") for ch in channels)

    sets = []
    for i in eligible[skip_head:]:
        frame, nxt = by_index[i], by_index[i + 1]
        combo = combos[(i + offset) % len(combos)]
        planes = {}
        if "O" in channels:
            planes["O"] = frame.ortho.astype(np.float32)
        if "D" in channels:
            masked, _ = mask_paddle(frame.depth, mask_threshold_mm)
            planes["D"] = masked.astype(np.float32)
        if need_flow:
            of = farneback_flow(frame.ortho, nxt.ortho, flow_params)
            planes["OFx"] = of[0].astype(np.float32)
            planes["OFy"] = of[1].astype(np.float32)
        image = np.stack([planes[ch] for ch in channels])
        sets.append(InputSet(
            image=image, channels=tuple(channels),
            delta_t=protocol.compute_delta_t(t_central_min, combo).astype(np.float32),
            mix=mix_vec.copy(), targets=combo.targets.astype(np.float32),
            target_mask=combo.target_mask.copy(),
            concrete_id=concrete_id, run_id=run_id, frame_index=i,
            slump_ref_id=combo.slump_id, rheo_ref_id=combo.rheo_id))
    return sets


def build_concrete_sets(campaign: CampaignData, concrete_id: str, *,
                        channels=CHANNEL_NAMES, skip_head: int = DEFAULT_SKIP_HEAD,
                        flow_params: FlowParams = FlowParams(), seed: int = 0) -> list[InputSet]:
    """All input sets of one concrete across its runs."""
    cdir = campaign.root / concrete_id
    mix = protocol.read_mix_file(cdir / "mix.txt")
    refs = protocol.read_references_csv(cdir / "references.csv")
    combos = protocol.enumerate_combinations(refs)
    sets = []
    for run_dir in sorted(d for d in cdir.iterdir() if d.is_dir() and d.name.startswith("run_")):
        run = load_run(run_dir)
        sets.extend(assemble_input_sets(
            run.frames, combos, mix, t_central_min=run.t_central_min,
            mask_threshold_mm=campaign.mask_threshold_mm, fps=run.fps,
            paddle_velocity=run.paddle_velocity, concrete_id=concrete_id,
            run_id=run.run_id, skip_head=skip_head, channels=channels,
            flow_params=flow_params, seed=seed))
    return sets


def build_dataset(campaign: CampaignData, concrete_ids, **kwargs) -> list[InputSet]:
    sets = []
    for cid in concrete_ids:
        sets.extend(build_concrete_sets(campaign, cid, **kwargs))
    return sets


def select_channels(sets, channels) -> list[InputSet]:
    """Input sets restricted to a channel subset (e.g. one ablation column)."""
    channels = tuple(channels)
    out = []
    for s in sets:
        if s.channels == channels:
            out.append(s)
            continue
        try:
            idx = [s.channels.index(ch) for ch in channels]
        except ValueError as exc:
            raise InputError(f"set has channels {s.channels}, cannot select {channels}") from exc
        out.append(replace(s, image=s.image[idx], channels=channels))
    return out


# -- augmentation -------------------------------------------------------------------

BRIGHTNESS_RANGE = (0.85, 1.15)
CONTRAST_RANGE = (0.75, 1.25)
OFFSET_RANGE = (-0.07, 0.07)


def augment(input_set: InputSet, rng: np.random.Generator,
            stats: "NormStats") -> InputSet:
    """Randomized brightness/contrast on O and std-scaled offsets on D and OF.

    Applied to un-normalized channels, training mode only. Five draws are
    consumed per call in a fixed order (brightness, contrast, D offset,
    OFx offset, OFy offset) regardless of which channels are present, so rng
    consumption does not depend on the input combination.
    """
    brightness = rng.uniform(*BRIGHTNESS_RANGE)
    contrast = rng.uniform(*CONTRAST_RANGE)
    offsets = rng.uniform(*OFFSET_RANGE, size=3)

    image = input_set.image.copy()
    chans = input_set.channels
    if "O" in chans:
        o = image[chans.index("O")]
        mean = o.mean(dtype=np.float64)
        o[:] = np.clip(contrast * (o - mean) + mean + (brightness - 1.0) * mean, 0.0, 1.0)
    if "D" in chans:
        image[chans.index("D")] += offsets[0] * stats.std["D"]
    if "OFx" in chans:
        image[chans.index("OFx")] += offsets[1] * stats.std["OF"]
    if "OFy" in chans:
        image[chans.index("OFy")] += offsets[2] * stats.std["OF"]
    return replace(input_set, image=image)


# -- normalization ---------------------------------------------------------------

@dataclass
class NormStats:
    """Per-category mean and standard deviation fitted on a training split."""

    mean: dict
    std: dict

    def to_arrays(self) -> dict:
        return {f"norm.{cat}": np.array([self.mean[cat], self.std[cat]], dtype=np.float64)
                for cat in self.mean}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "NormStats":
        mean, std = {}, {}
        for key, arr in arrays.items():
            if key.startswith("norm."):
                cat = key[5:]
                mean[cat] = float(arr[0])
                std[cat] = float(arr[1])
        if not mean:
            raise NormalizationError("no normalization statistics found")
        return cls(mean=mean, std=std)

    def to_meta(self) -> dict:
        """Full-precision text form (checkpoint tensors are only 4-byte reals)."""
        return {f"norm.{cat}": f"{self.mean[cat]!r},{self.std[cat]!r}" for cat in self.mean}

    @classmethod
    def from_meta(cls, meta: dict) -> "NormStats":
        mean, std = {}, {}
        for key, value in meta.items():
            if key.startswith("norm."):
                m, _, s = value.partition(",")
                mean[key[5:]] = float(m)
                std[key[5:]] = float(s)
        if not mean:
            raise NormalizationError("no normalization statistics found")
        return cls(mean=mean, std=std)


def _category_of_channel(name: str) -> str:
    return "OF" if name.startswith("OF") else name


def fit_norm_stats(train_sets) -> NormStats:
    """Fit per-category statistics over a training split, in a fixed order.

    Pixel categories pool every pixel of the category's channels; delta_t
    pools both components; target categories use supervised entries only.
    The mix vector is exempt.
    """
    if not train_sets:
        raise NormalizationError("cannot fit statistics on an empty training split")
    sums = {cat: 0.0 for cat in NORM_CATEGORIES}
    sqs = {cat: 0.0 for cat in NORM_CATEGORIES}
    counts = {cat: 0 for cat in NORM_CATEGORIES}

    def accumulate(cat, values):
        v = values.astype(np.float64, copy=False)
        sums[cat] += v.sum()
        sqs[cat] += np.square(v).sum()
        counts[cat] += v.size

    for s in train_sets:
        for ci, ch in enumerate(s.channels):
            accumulate(_category_of_channel(ch), s.image[ci])
        accumulate("delta_t", s.delta_t)
        for k, cat in enumerate(TARGET_CATEGORIES):
            if s.target_mask[k]:
                accumulate(cat, s.targets[k:k + 1])

    mean, std = {}, {}
    for cat in NORM_CATEGORIES:
        if counts[cat] == 0:
            continue
        m = sums[cat] / counts[cat]
        var = max(sqs[cat] / counts[cat] - m * m, 0.0)
        sd = np.sqrt(var)
        if sd <= 1e-12:
            raise NormalizationError(f"category '{cat}' has zero variance on the training split")
        mean[cat] = float(m)
        std[cat] = float(sd)
    return NormStats(mean=mean, std=std)


def apply_norm(x, stats: NormStats, category: str):
    return (x - stats.mean[category]) / stats.std[category]


def denorm(x, stats: NormStats, category: str):
    return x * stats.std[category] + stats.mean[category]


def normalize_batch(sets, stats: NormStats):
    """Stack input sets into normalized model-ready arrays.

    Returns (images, delta_t, mix, targets, mask) where targets are
    normalized per category and mix is passed through unscaled.
    """
    channels = sets[0].channels
    images = np.stack([s.image for s in sets]).astype(np.float32)
    for ci, ch in enumerate(channels):
        cat = _category_of_channel(ch)
        images[:, ci] = (images[:, ci] - stats.mean[cat]) / stats.std[cat]
    delta_t = np.stack([apply_norm(s.delta_t, stats, "delta_t") for s in sets]).astype(np.float32)
    mix = np.stack([s.mix for s in sets]).astype(np.float32)
    targets = np.stack([s.targets for s in sets]).astype(np.float64)
    for k, cat in enumerate(TARGET_CATEGORIES):
        targets[:, k] = apply_norm(targets[:, k], stats, cat)
    mask = np.stack([s.target_mask for s in sets])
    return images, delta_t, mix, targets.astype(np.float32), mask
