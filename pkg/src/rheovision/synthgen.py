"""Deterministic synthetic surrogate-mixer campaign generator.

Produces the full on-disk dataset layout (frames, mix designs, reference
measurements) plus a ground-truth record of the latent property curves, so
end-to-end behaviour can be verified against known answers. The latent-to-
image mapping is a test-fixture construction: the depth channel carries a
yield-stress proxy (trough depth), the speckle texture translates at a rate
proportional to paddle speed and inversely to the viscosity proxy so the
optical flow is informative, and the orthophoto adds only weak shading on
top of the speckle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import datapipe, protocol
from .exceptions import InputError

# calibration ranges for the generated reference values (min, max)
VALUE_RANGES = {
    "delta": (30.0, 63.50),
    "tau0": (65.84, 585.40),
    "mu": (19.76, 121.91),
}

SLUMP_PRECISION_CM = 2.46          # flow-table test precision constant
SLUMP_NOISE_SD = SLUMP_PRECISION_CM / 2
RHEO_NOISE_FRAC = 0.03

FILL_HEIGHT_MM = 100.0
PADDLE_RIDGE_MM = 180.0
DEFAULT_MASK_THRESHOLD_MM = 140.0

RUN_SLOW = (30.0, 0.2)    # fps, paddle velocity m/s for the first half of the runs
RUN_FAST = (60.0, 0.45)

REFERENCE_TIMES_MIN = (9.0, 39.0, 69.0)
TIME_JITTER_MIN = 2.0


@dataclass(frozen=True)
class LatentCurves:
    """Per-concrete ground-truth property curves over sample age t (minutes)."""

    delta0: float
    a: float
    b: float
    tau0_0: float
    c: float
    mu0: float
    d: float

    def delta(self, t):
        return self.delta0 - self.a * np.log1p(self.b * np.asarray(t, dtype=np.float64))

    def tau0(self, t):
        return self.tau0_0 + self.c * np.asarray(t, dtype=np.float64)

    def mu(self, t):
        return self.mu0 + self.d * np.sqrt(np.asarray(t, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"delta0": self.delta0, "a": self.a, "b": self.b,
                "tau0_0": self.tau0_0, "c": self.c, "mu0": self.mu0, "d": self.d}


@dataclass(frozen=True)
class CampaignSpec:
    n_concretes: int = 45
    runs_per_concrete: int = 14
    frames_per_run: int = 120
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    recycled_fraction: float = 5 / 45
    implausible_ids: tuple | None = None   # default: two concretes picked by the seed
    noise_scale: float = 1.0
    residual_scale: float = 1.0            # image-only latent component strength
    shading_strength: float = 0.08         # depth-slope shading mixed into the orthophoto
    mask_threshold_mm: float = DEFAULT_MASK_THRESHOLD_MM

    @classmethod
    def desk(cls, seed: int = 0, **overrides) -> "CampaignSpec":
        """12 concretes x 14 runs x 120 frames at 64x64; 5 recycled so folds work."""
        defaults = dict(n_concretes=12, recycled_fraction=5 / 12, seed=seed)
        defaults.update(overrides)
        return cls(**defaults)

    @classmethod
    def full_scale(cls, seed: int = 0, **overrides) -> "CampaignSpec":
        defaults = dict(n_concretes=45, frames_per_run=1300, image_size=(512, 512), seed=seed)
        defaults.update(overrides)
        return cls(**defaults)

    def run_tags(self, run_number: int) -> tuple[float, float]:
        """(fps, velocity) per run number (1-based); first half slow, second fast."""
        half = (self.runs_per_concrete + 1) // 2
        return RUN_SLOW if run_number <= half else RUN_FAST

    def n_recycled(self) -> int:
        return int(round(self.recycled_fraction * self.n_concretes))


def _concrete_rng(spec: CampaignSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, 1000 + index]))


def _mix_strata(spec: CampaignSpec, index: int) -> np.ndarray:
    """Stratum assignment of the three main mix factors for one concrete.

    The factors are sampled Latin-hypercube style across the campaign so any
    train/test split covers the mix space instead of leaving whole corners
    to extrapolation (every concrete still gets a unique design).
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 5]))
    n = spec.n_concretes
    strata = np.stack([rng.permutation(n) for _ in range(3)])
    return strata[:, index]


@dataclass
class ConcreteRecord:
    concrete_id: str
    mix: protocol.MixDesign
    references: list
    latents: LatentCurves
    recycled: bool
    implausible: bool
    session_start_min: float
    run_gap_min: float


def campaign_flags(spec: CampaignSpec) -> tuple[set, set]:
    """(recycled ids, implausible-rheology ids), both drawn from the campaign seed."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    ids = [f"concrete_{i:03d}" for i in range(spec.n_concretes)]
    recycled = set(rng.choice(ids, size=spec.n_recycled(), replace=False).tolist())
    if spec.implausible_ids is not None:
        implausible = set(spec.implausible_ids)
    else:
        implausible = set(rng.choice(ids, size=min(2, spec.n_concretes), replace=False).tolist())
    return recycled, implausible


def generate_concrete(spec: CampaignSpec, index: int, *, recycled: bool,
                      implausible: bool) -> ConcreteRecord:
    """Mix design, latent curves and reference measurements for one concrete.

    The predictable part of each curve is a smooth function of the mix
    entries; the residual parts (scaled by ``residual_scale``) never enter
    the mix vector and are only observable through the rendered imagery.
    """
    rng = _concrete_rng(spec, index)
    strata = _mix_strata(spec, index)
    u_wcr, u_paste, u_admix = (strata + rng.uniform(0.0, 1.0, 3)) / spec.n_concretes
    r_tau, r_mu = rng.uniform(0.0, 1.0, 2)
    rs = spec.residual_scale

    # the spread residual rides on the yield-stress residual (stiffer mixes
    # spread less), so it is observable through the rendered trough depth
    delta0 = 44.0 + 17.0 * u_wcr - 1.5 * (2 * r_tau - 1.0) * rs
    delta0 = float(np.clip(delta0, 42.0, 62.0))
    b = float(0.03 + 0.05 * u_paste)
    a_raw = 2.0 + 4.0 * u_paste
    a_max = (delta0 - VALUE_RANGES["delta"][0] - 0.5) / np.log1p(b * 92.0)
    a = float(np.clip(a_raw, 1.0, a_max))
    tau0_0 = 75.0 + 160.0 * (1.0 - u_wcr) + 30.0 * r_tau * rs
    c = 0.8 + 1.6 * u_admix
    mu0 = 24.0 + 28.0 * u_paste + 8.0 * r_mu * rs
    d = 0.6 + 3.4 * u_admix
    latents = LatentCurves(delta0=delta0, a=a, b=b, tau0_0=float(tau0_0), c=float(c),
                           mu0=float(mu0), d=float(d))

    session_start = float(rng.uniform(10.0, 14.0))
    run_gap = float(rng.uniform(2.0, 2.5))

    entries = {
        "water_cement_ratio": 0.8 + 0.8 * u_wcr,
        "paste_content": 0.5 + 1.0 * u_paste,
        "admixture_content": 0.2 + 1.6 * u_admix,
        "time_since_water_addition": session_start / 30.0,
        "paddle_velocity": RUN_SLOW[1] / protocol.VELOCITY_DIVISOR,
        "frame_rate": RUN_SLOW[0] / protocol.FRAME_RATE_DIVISOR,
    }
    increments = rng.uniform(0.2, 1.0, 12)
    grading = np.cumsum(increments)
    grading = grading / grading[-1] * (1.2 + 0.6 * u_paste)
    for i, key in enumerate(protocol.MIX_KEYS[protocol.GRADING_SLICE]):
        entries[key] = float(grading[i])
    mix = protocol.MixDesign.from_dict(entries)

    references = []
    for t_nominal in REFERENCE_TIMES_MIN:
        t = t_nominal + rng.uniform(-TIME_JITTER_MIN, TIME_JITTER_MIN)
        value = latents.delta(t) + rng.normal(0.0, SLUMP_NOISE_SD * spec.noise_scale)
        value = float(np.clip(value, *VALUE_RANGES["delta"]))
        references.append(protocol.ReferenceMeasurement("slump", float(t), (value,)))
    for t_nominal in REFERENCE_TIMES_MIN:
        t = t_nominal + 1.0 + rng.uniform(-TIME_JITTER_MIN, TIME_JITTER_MIN)
        tau = latents.tau0(t) * (1.0 + rng.normal(0.0, RHEO_NOISE_FRAC * spec.noise_scale))
        mu = latents.mu(t) * (1.0 + rng.normal(0.0, RHEO_NOISE_FRAC * spec.noise_scale))
        references.append(protocol.ReferenceMeasurement(
            "rheometer", float(t),
            (float(np.clip(tau, *VALUE_RANGES["tau0"])),
             float(np.clip(mu, *VALUE_RANGES["mu"]))),
            plausible=not implausible))

    return ConcreteRecord(concrete_id=f"concrete_{index:03d}", mix=mix,
                          references=references, latents=latents, recycled=recycled,
                          implausible=implausible, session_start_min=session_start,
                          run_gap_min=run_gap)


@dataclass
class RenderedFrame:
    ortho: np.ndarray
    depth: np.ndarray
    depth_pre_paddle: np.ndarray
    index: int
    timestamp_s: float


def _normalized_proxy(value: float, category: str) -> float:
    lo, hi = VALUE_RANGES[category]
    return float(np.clip((value - lo) / (hi - lo), 0.0, 1.0))


def render_run(spec: CampaignSpec, record: ConcreteRecord, run_number: int):
    """Render one run as a sequence of frames (a generator; frame i+1 depends on i).

    The trough carved by the paddle is deeper for stiffer concrete (yield
    stress proxy) and relaxes back toward the fill level at a rate inversely
    proportional to the viscosity proxy; the speckle texture translates at
    paddle-speed/viscosity so two runs differing only in viscosity produce
    measurably different optical flow.
    """
    h, w = spec.image_size
    fps, velocity = spec.run_tags(run_number)
    t_central = record.session_start_min + (run_number - 1) * record.run_gap_min

    tau_proxy = _normalized_proxy(float(record.latents.tau0(t_central)), "tau0")
    mu_proxy = _normalized_proxy(float(record.latents.mu(t_central)), "mu")
    delta_proxy = _normalized_proxy(float(record.latents.delta(t_central)), "delta")
    trough_depth = 6.0 + 18.0 * tau_proxy
    relax = float(np.clip(0.06 / (0.05 + mu_proxy), 0.02, 0.5))
    texture_speed = 3.0 * velocity / (0.2 + mu_proxy)   # px per frame

    # one campaign-wide speckle/roughness pair: per-run random fields would
    # hand the network a concrete-identity shortcut; the only cross-concrete
    # image differences should be the physically rendered property proxies
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2000]))
    texture = ndimage.gaussian_filter(rng.random((h, w)), 1.2, mode="wrap")
    texture = (texture - texture.min()) / max(float(np.ptp(texture)), 1e-9)
    roughness = 1.5 * ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.0, mode="wrap")

    surface = np.full((h, w), FILL_HEIGHT_MM, dtype=np.float64) + roughness
    cols = np.arange(w, dtype=np.float64)
    margin = max(3.0, w / 12.0)
    span = w - 2 * margin
    # runnier concrete spreads into a wider, shallower trough
    trough_width = max(2.0, w / 16.0 * (0.5 + 2.0 * delta_proxy))
    paddle_half = max(1, int(round(w / 24.0)))

    offset = 0.0
    for i in range(spec.frames_per_run):
        # six round trips per run
        phase = (i / max(spec.frames_per_run - 1, 1)) * 6.0
        tri = abs(2.0 * (phase % 1.0) - 1.0)
        paddle_x = margin + span * (1.0 - tri)

        surface += relax * (FILL_HEIGHT_MM + roughness - surface)
        trough = FILL_HEIGHT_MM - trough_depth * np.exp(
            -((cols - paddle_x) / trough_width) ** 2)
        surface = np.minimum(surface, trough[None, :] + roughness * 0.3)

        depth_pre = surface.astype(np.float32)
        depth = depth_pre.copy()
        band = np.abs(cols - paddle_x) <= paddle_half
        depth[:, band] = PADDLE_RIDGE_MM

        offset += texture_speed
        i0 = int(np.floor(offset))
        frac = offset - i0
        tex = ((1.0 - frac) * np.roll(texture, i0, axis=1)
               + frac * np.roll(texture, i0 + 1, axis=1))
        shade = np.gradient(surface, axis=1)
        shade = shade / (np.abs(shade).max() + 1e-9)
        ortho = 0.5 + 0.4 * (tex - 0.5) * 2.0 - spec.shading_strength * shade
        ortho = np.clip(ortho, 0.02, 0.98).astype(np.float32)
        ortho[:, band] = 0.12
        datapipe.embed_led_code(ortho, int(round(i * 1000.0 / fps)))

        yield RenderedFrame(ortho=ortho, depth=depth, depth_pre_paddle=depth_pre,
                            index=i, timestamp_s=i / fps)


def generate_campaign(spec: CampaignSpec, out_dir, force: bool = False) -> str:
    """Write the full campaign to disk; returns the manifest digest."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise InputError(f"output directory {out} is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)

    recycled_ids, implausible_ids = campaign_flags(spec)
    h, w = spec.image_size

    campaign_lines = [
        f"seed = {spec.seed}",
        f"image_h = {h}",
        f"image_w = {w}",
        f"mask_threshold_mm = {spec.mask_threshold_mm!r}",
        f"n_concretes = {spec.n_concretes}",
        f"runs_per_concrete = {spec.runs_per_concrete}",
        f"frames_per_run = {spec.frames_per_run}",
    ]
    truth_lines = []
    files: list[Path] = []

    for index in range(spec.n_concretes):
        cid = f"concrete_{index:03d}"
        record = generate_concrete(spec, index, recycled=cid in recycled_ids,
                                   implausible=cid in implausible_ids)
        cdir = out / cid
        cdir.mkdir(exist_ok=True)
        protocol.write_mix_file(cdir / "mix.txt", record.mix)
        protocol.write_references_csv(cdir / "references.csv", record.references)
        files.extend([cdir / "mix.txt", cdir / "references.csv"])

        campaign_lines.append(f"recycled.{cid} = {int(record.recycled)}")
        for key, value in record.latents.to_dict().items():
            truth_lines.append(f"{cid}.{key} = {value!r}")
        truth_lines.append(f"{cid}.implausible = {int(record.implausible)}")
        truth_lines.append(f"{cid}.session_start_min = {record.session_start_min!r}")
        truth_lines.append(f"{cid}.run_gap_min = {record.run_gap_min!r}")

        for run_number in range(1, spec.runs_per_concrete + 1):
            rdir = cdir / f"run_{run_number:02d}"
            rdir.mkdir(exist_ok=True)
            fps, velocity = spec.run_tags(run_number)
            t_central = record.session_start_min + (run_number - 1) * record.run_gap_min
            datapipe.write_run_meta(rdir / "run.txt", fps, velocity, t_central)
            files.append(rdir / "run.txt")
            for frame in render_run(spec, record, run_number):
                o_path = rdir / f"f{frame.index:05d}_O.rhf"
                d_path = rdir / f"f{frame.index:05d}_D.rhf"
                datapipe.write_frame_channel(o_path, frame.ortho, "O")
                datapipe.write_frame_channel(d_path, frame.depth, "D")
                files.extend([o_path, d_path])

    (out / "campaign.txt").write_text("\n".join(campaign_lines) + "\n", encoding="utf-8")
    (out / "truth.txt").write_text("\n".join(truth_lines) + "\n", encoding="utf-8")
    files.extend([out / "campaign.txt", out / "truth.txt"])

    manifest_lines = []
    for path in sorted(files):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        manifest_lines.append(f"{path.relative_to(out).as_posix()} {digest}")
    manifest_body = "\n".join(manifest_lines) + "\n"
    (out / "manifest.txt").write_text(manifest_body, encoding="utf-8")
    return hashlib.sha256(manifest_body.encode()).hexdigest()


def load_truth(root) -> dict:
    """Ground-truth latent curves and flags per concrete, for test oracles."""
    out: dict[str, dict] = {}
    for line in (Path(root) / "truth.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        cid, _, name = key.strip().partition(".")
        out.setdefault(cid, {})[name] = float(value)
    result = {}
    for cid, entries in out.items():
        curve_keys = {"delta0", "a", "b", "tau0_0", "c", "mu0", "d"}
        curves = LatentCurves(**{k: entries[k] for k in curve_keys})
        result[cid] = {
            "curves": curves,
            "implausible": bool(entries["implausible"]),
            "session_start_min": entries["session_start_min"],
            "run_gap_min": entries["run_gap_min"],
        }
    return result
