"""Experiment bookkeeping: mix vectors, reference combinations, time offsets
and the constrained 5-fold cross-validation split."""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from itertools import product

import numpy as np

from .exceptions import ProtocolError

# 18 mix-vector entries, each scaled into [0, 2]
MIX_KEYS = (
    "water_cement_ratio",
    "paste_content",
    "admixture_content",
    "time_since_water_addition",
) + tuple(f"grading_curve_{i:02d}" for i in range(1, 13)) + (
    "paddle_velocity",
    "frame_rate",
)

# dropping m from the input removes only the material description; the
# acquisition-side entries (timing, paddle speed, frame rate) stay
NON_MATERIAL_KEYS = ("time_since_water_addition", "paddle_velocity", "frame_rate")
GRADING_SLICE = slice(4, 16)

# raw-unit divisors that land both acquisition presets inside [0, 2]
VELOCITY_DIVISOR = 0.3   # m/s: 0.2 -> 0.667, 0.45 -> 1.5
FRAME_RATE_DIVISOR = 40.0  # fps: 30 -> 0.75, 60 -> 1.5

OUTPUT_NAMES = ("delta", "tau0", "mu")


def mix_indices(use_materials: bool) -> np.ndarray:
    if use_materials:
        return np.arange(len(MIX_KEYS))
    return np.array([MIX_KEYS.index(k) for k in NON_MATERIAL_KEYS])


@dataclass
class MixDesign:
    """The 18-entry scaled mix vector, ordered as MIX_KEYS."""

    values: np.ndarray

    def validate(self) -> None:
        if self.values.shape != (len(MIX_KEYS),):
            raise ProtocolError(f"mix vector must have {len(MIX_KEYS)} entries, "
                                f"got shape {self.values.shape}")
        if np.any(self.values < 0.0) or np.any(self.values > 2.0):
            bad = MIX_KEYS[int(np.argmax((self.values < 0) | (self.values > 2)))]
            raise ProtocolError(f"mix entry '{bad}' outside [0, 2]")
        grading = self.values[GRADING_SLICE]
        if np.any(np.diff(grading) < -1e-9):
            raise ProtocolError("grading curve must be nondecreasing")

    def with_run_tags(self, velocity_mps: float, fps: float) -> np.ndarray:
        """Mix vector with the per-run paddle velocity and frame rate filled in."""
        v = self.values.copy()
        v[MIX_KEYS.index("paddle_velocity")] = velocity_mps / VELOCITY_DIVISOR
        v[MIX_KEYS.index("frame_rate")] = fps / FRAME_RATE_DIVISOR
        return v

    def to_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in zip(MIX_KEYS, self.values)}

    @classmethod
    def from_dict(cls, entries: dict[str, float]) -> "MixDesign":
        missing = set(MIX_KEYS) - set(entries)
        if missing:
            raise ProtocolError(f"mix design missing keys: {sorted(missing)[:3]}")
        unknown = set(entries) - set(MIX_KEYS)
        if unknown:
            raise ProtocolError(f"mix design has unknown keys: {sorted(unknown)[:3]}")
        design = cls(np.array([entries[k] for k in MIX_KEYS], dtype=np.float64))
        design.validate()
        return design


def write_mix_file(path, design: MixDesign) -> None:
    lines = [f"{k} = {v!r}" for k, v in design.to_dict().items()]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_mix_file(path) -> MixDesign:
    entries: dict[str, float] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = float(value)
    return MixDesign.from_dict(entries)


@dataclass
class ReferenceMeasurement:
    kind: str                 # "slump" or "rheometer"
    timestamp_min: float      # minutes since water addition
    values: tuple             # (delta,) or (tau0, mu)
    plausible: bool = True

    def validate(self) -> None:
        if self.kind == "slump":
            if len(self.values) != 1:
                raise ProtocolError("slump measurement carries exactly 1 value")
        elif self.kind == "rheometer":
            if len(self.values) != 2:
                raise ProtocolError("rheometer measurement carries exactly 2 values")
        else:
            raise ProtocolError(f"unknown measurement kind '{self.kind}'")


def write_references_csv(path, measurements) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("kind,timestamp_min,v1,v2,plausible\n")
        for ref in measurements:
            v1 = repr(ref.values[0])
            v2 = repr(ref.values[1]) if len(ref.values) > 1 else ""
            f.write(f"{ref.kind},{ref.timestamp_min!r},{v1},{v2},{int(ref.plausible)}\n")


def read_references_csv(path) -> list[ReferenceMeasurement]:
    out = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "kind,timestamp_min,v1,v2,plausible":
            raise ProtocolError(f"unexpected references.csv header: {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            kind, ts, v1, v2, plausible = line.split(",")
            values = (float(v1),) if v2 == "" else (float(v1), float(v2))
            ref = ReferenceMeasurement(kind, float(ts), values, bool(int(plausible)))
            ref.validate()
            out.append(ref)
    return out


@dataclass
class ReferenceCombination:
    """One slump measurement paired with one rheometer measurement."""

    slump: ReferenceMeasurement
    rheo: ReferenceMeasurement
    slump_id: int
    rheo_id: int

    @property
    def targets(self) -> np.ndarray:
        return np.array([self.slump.values[0], self.rheo.values[0], self.rheo.values[1]])

    @property
    def target_mask(self) -> np.ndarray:
        # the slump flow diameter is always supervised
        return np.array([True, self.rheo.plausible, self.rheo.plausible])


def compute_delta_t(image_ts_min: float, combo: ReferenceCombination) -> np.ndarray:
    """(slump time - image time, rheometer time - image time); negatives allowed."""
    return np.array([combo.slump.timestamp_min - image_ts_min,
                     combo.rheo.timestamp_min - image_ts_min])


def enumerate_combinations(references) -> list[ReferenceCombination]:
    slumps = [r for r in references if r.kind == "slump"]
    rheos = [r for r in references if r.kind == "rheometer"]
    if not slumps or not rheos:
        raise ProtocolError("need at least one slump and one rheometer measurement")
    slumps.sort(key=lambda r: r.timestamp_min)
    rheos.sort(key=lambda r: r.timestamp_min)
    return [ReferenceCombination(s, r, si, ri)
            for (si, s), (ri, r) in product(enumerate(slumps), enumerate(rheos))]


def combination_offset(seed: int, concrete_id: str, run_id: str, n_combos: int) -> int:
    """Deterministic round-robin phase for assigning input sets to combinations."""
    material = f"{seed}:{concrete_id}:{run_id}".encode()
    return zlib.crc32(material) % n_combos


# -- input combinations (ablation columns) ------------------------------------

CHANNEL_ORDER = ("O", "D", "OFx", "OFy")
COMBINATION_NAMES = ("O+D+m", "O+D+m+OF", "O+D", "O+m", "D+m", "D+m+OF")


@dataclass(frozen=True)
class InputCombination:
    name: str
    channels: tuple[str, ...]
    use_mix: bool

    @property
    def mix_dim(self) -> int:
        return len(MIX_KEYS) if self.use_mix else len(NON_MATERIAL_KEYS)

    def mix_indices(self) -> np.ndarray:
        return mix_indices(self.use_mix)


def parse_combination(name: str) -> InputCombination:
    if name not in COMBINATION_NAMES:
        raise ProtocolError(
            f"unknown input combination '{name}'; valid names: {', '.join(COMBINATION_NAMES)}")
    tokens = name.split("+")
    channels = []
    for ch in CHANNEL_ORDER:
        base = "OF" if ch.startswith("OF") else ch
        if base in tokens:
            channels.append(ch)
    return InputCombination(name=name, channels=tuple(channels), use_mix="m" in tokens)


# -- cross-validation folds ----------------------------------------------------

@dataclass
class ConcreteSummary:
    concrete_id: str
    delta1: float          # first slump flow diameter, measured right after mixing
    recycled: bool


@dataclass
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass
class FoldPlan:
    folds: list[Fold]

    def validate(self, summaries) -> None:
        info = {s.concrete_id: s for s in summaries}
        all_ids = set(info)
        n_sets = len(self.folds)
        sizes = sorted(len(part) for part in np.array_split(np.arange(len(info)), n_sets))
        val_n = validation_size(len(info))
        test_union: set[str] = set()
        for i, fold in enumerate(self.folds):
            train, val, test = set(fold.train), set(fold.val), set(fold.test)
            if train & val or train & test or val & test:
                raise ProtocolError(f"fold {i}: train/val/test overlap")
            if train | val | test != all_ids:
                raise ProtocolError(f"fold {i}: does not cover all concretes")
            if len(test) not in sizes:
                raise ProtocolError(f"fold {i}: test set size {len(test)} is not an "
                                    f"even split of {len(info)} into {n_sets}")
            if len(val) != val_n:
                raise ProtocolError(f"fold {i}: validation set must have {val_n} concretes, "
                                    f"got {len(val)}")
            if sum(info[c].recycled for c in test) != 1:
                raise ProtocolError(f"fold {i}: test set must contain exactly one "
                                    "recycled-aggregate concrete")
            if sum(info[c].recycled for c in val) != 1:
                raise ProtocolError(f"fold {i}: validation set must contain exactly one "
                                    "recycled-aggregate concrete")
            if test & test_union:
                raise ProtocolError(f"fold {i}: test sets overlap across folds")
            test_union |= test
        if test_union != all_ids:
            raise ProtocolError("test sets across folds must partition the concretes")

    def to_text(self) -> str:
        lines = []
        for i, fold in enumerate(self.folds):
            lines.append(f"fold {i}")
            lines.append("  train: " + " ".join(fold.train))
            lines.append("  val: " + " ".join(fold.val))
            lines.append("  test: " + " ".join(fold.test))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FoldPlan":
        folds = []
        current: dict[str, tuple] = {}
        for line in text.splitlines():
            line = line.strip()
            if line.startswith("fold"):
                if current:
                    folds.append(Fold(**current))
                current = {}
            elif line:
                key, _, rest = line.partition(":")
                current[key.strip()] = tuple(rest.split())
        if current:
            folds.append(Fold(**current))
        return cls(folds)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def validation_size(n_concretes: int) -> int:
    # 5 of 45 at full scale; at least one concrete per tertile otherwise
    return max(3, round(n_concretes * 5 / 45))


def make_folds(summaries, seed: int, n_sets: int = 5,
               expected_total: int | None = 45) -> FoldPlan:
    """Build the constrained cross-validation plan.

    Concretes are sorted by their first slump flow diameter (descending,
    ties broken by id), split into three tertile groups, and distributed so
    every test set draws evenly from each group and contains exactly one
    recycled-aggregate concrete. Validation sets take one concrete per
    tertile, exactly one of them recycled. Deterministic given the seed.
    """
    summaries = list(summaries)
    n = len(summaries)
    if expected_total is not None and n != expected_total:
        raise ProtocolError(f"expected {expected_total} concretes, got {n}")
    recycled = [s for s in summaries if s.recycled]
    if len(recycled) != n_sets:
        raise ProtocolError(f"need exactly {n_sets} recycled-aggregate concretes "
                            f"(one per set), got {len(recycled)}")
    if n < n_sets + validation_size(n) + 1:
        raise ProtocolError(f"{n} concretes cannot fill {n_sets} sets plus a "
                            "validation and training split")

    ordered = sorted(summaries, key=lambda s: (-s.delta1, s.concrete_id))
    tertiles = [list(part) for part in np.array_split(np.arange(n), 3)]
    tertile_of = {}
    for t, part in enumerate(tertiles):
        for idx in part:
            tertile_of[ordered[idx].concrete_id] = t

    set_sizes = [len(part) for part in np.array_split(np.arange(n), n_sets)]

    for attempt in range(1000):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        sets: list[list[str]] = [[] for _ in range(n_sets)]
        counts = np.zeros((n_sets, 3), dtype=int)

        rec_ids = [s.concrete_id for s in recycled]
        rng.shuffle(rec_ids)
        for set_idx, cid in enumerate(rec_ids):
            sets[set_idx].append(cid)
            counts[set_idx, tertile_of[cid]] += 1

        ok = True
        for t in range(3):
            members = [ordered[i].concrete_id for i in tertiles[t]
                       if not any(ordered[i].concrete_id == r for r in rec_ids)]
            rng.shuffle(members)
            for cid in members:
                candidates = [k for k in range(n_sets) if len(sets[k]) < set_sizes[k]]
                if not candidates:
                    ok = False
                    break
                best = min(counts[k, t] for k in candidates)
                pool = [k for k in candidates if counts[k, t] == best]
                k = pool[rng.integers(len(pool))]
                sets[k].append(cid)
                counts[k, t] += 1
            if not ok:
                break
        if not ok or any(len(s) != size for s, size in zip(sets, set_sizes)):
            continue

        val_n = validation_size(n)
        folds = []
        feasible = True
        for k in range(n_sets):
            test = tuple(sorted(sets[k]))
            remaining = [cid for j, s in enumerate(sets) if j != k for cid in s]
            rec_remaining = [c for c in remaining if c in rec_ids]
            val = [rec_remaining[rng.integers(len(rec_remaining))]]
            covered = {tertile_of[val[0]]}
            for t in range(3):
                if t in covered:
                    continue
                pool = [c for c in remaining
                        if tertile_of[c] == t and c not in val and c not in rec_ids]
                if not pool:
                    feasible = False
                    break
                val.append(pool[rng.integers(len(pool))])
                covered.add(t)
            if not feasible:
                break
            pool = [c for c in remaining if c not in val and c not in rec_ids]
            while len(val) < val_n:
                if not pool:
                    feasible = False
                    break
                pick = pool.pop(rng.integers(len(pool)))
                val.append(pick)
            if not feasible:
                break
            train = tuple(sorted(c for c in remaining if c not in val))
            folds.append(Fold(train=train, val=tuple(sorted(val)), test=test))
        if not feasible:
            continue

        plan = FoldPlan(folds)
        try:
            plan.validate(summaries)
        except ProtocolError:
            continue
        return plan
    raise ProtocolError("could not satisfy fold constraints after 1000 attempts")
