"""Flight records: synthetic rotating-frame generation, CSV ingestion, splits and windows.

Every record is stored with its columns in canonical order: the nine triad
components ``B_xyz, C_xyz, D_xyz`` first, then the remaining scalar channels
(telemetry and the target) in schema order.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InvalidFraction, InvalidSpec, ParseError, SchemaMismatch, TooShort
from .features import N_TRIAD, TriadWindow
from .linalg3 import axis_angle_rotation

TRIAD_ROLES = ("triad_B", "triad_C", "triad_D")
ROLES = TRIAD_ROLES + ("telemetry", "target")
SPLIT_FRACTIONS = (0.6, 0.8)
STD_FLOOR = 1e-12


# ---------------------------------------------------------------- schema


@dataclass(frozen=True)
class Schema:
    """Ordered column names with their roles."""

    names: tuple
    roles: tuple

    def __post_init__(self):
        if len(self.names) != len(self.roles):
            raise SchemaMismatch("schema names and roles differ in length")
        if len(set(self.names)) != len(self.names):
            raise SchemaMismatch("duplicate column names in schema")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise SchemaMismatch(f"unknown roles {sorted(bad)}; expected {ROLES}")
        for role in TRIAD_ROLES:
            if self.roles.count(role) != 3:
                raise SchemaMismatch(f"role {role} must tag exactly 3 columns")
        if self.roles.count("target") != 1:
            raise SchemaMismatch("schema must tag exactly one target column")

    @classmethod
    def from_mapping(cls, mapping):
        """From ``{"columns": [{"name": .., "role": ..}, ..]}`` or an ordered ``{name: role}``."""
        if "columns" in mapping:
            cols = mapping["columns"]
            return cls(tuple(c["name"] for c in cols), tuple(c["role"] for c in cols))
        return cls(tuple(mapping), tuple(mapping.values()))

    def to_mapping(self):
        return {"columns": [{"name": n, "role": r} for n, r in zip(self.names, self.roles)]}

    @property
    def canonical_order(self):
        """Column positions reordered triads-first (B, C, D), then scalars in file order."""
        order = []
        for role in TRIAD_ROLES:
            order += [i for i, r in enumerate(self.roles) if r == role]
        order += [i for i, r in enumerate(self.roles) if r not in TRIAD_ROLES]
        return order

    @property
    def canonical_names(self):
        return tuple(self.names[i] for i in self.canonical_order)

    @property
    def target_channel(self):
        return self.canonical_order.index(self.roles.index("target"))


def default_schema(n_telemetry=16):
    names = [f"{t}_{a}" for t in "BCD" for a in "xyz"]
    roles = [f"triad_{t}" for t in "BCD" for _ in range(3)]
    names += [f"tel_{i:02d}" for i in range(n_telemetry)] + ["igrf_total"]
    roles += ["telemetry"] * n_telemetry + ["target"]
    return Schema(tuple(names), tuple(roles))


def load_schema(path):
    with open(path) as fh:
        return Schema.from_mapping(json.load(fh))


def save_schema(schema, path):
    with open(path, "w") as fh:
        json.dump(schema.to_mapping(), fh, indent=2)


# ---------------------------------------------------------------- records


@dataclass
class FlightRecord:
    name: str
    rows: np.ndarray  # (T, D0) canonical column order
    sample_rate: float
    column_names: tuple
    target_channel: int

    @property
    def length(self):
        return self.rows.shape[0]

    @property
    def n_channels(self):
        return self.rows.shape[1]

    @property
    def triads(self):
        return self.rows[:, :N_TRIAD]

    @property
    def target(self):
        return self.rows[:, self.target_channel]


def ingest_csv(path, schema, name=None, sample_rate=10.0):
    """Parse a headered CSV of 64-bit decimal reals into a :class:`FlightRecord`.

    Blank lines are skipped. Errors report the 1-based line number in the file.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = None
        values = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if header is None:
                header = [c.strip() for c in row]
                missing = [n for n in schema.names if n not in header]
                extra = [n for n in header if n not in schema.names]
                if missing or extra or len(header) != len(schema.names):
                    raise SchemaMismatch(f"header missing {missing}, unexpected {extra}")
                col_of = [header.index(n) for n in schema.names]
                continue
            if len(row) != len(header):
                raise ParseError(line, f"expected {len(header)} fields, got {len(row)}")
            try:
                parsed = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(line, str(exc)) from None
            if not all(math.isfinite(v) for v in parsed):
                raise ParseError(line, "non-finite value")
            values.append([parsed[j] for j in col_of])
    if header is None:
        raise SchemaMismatch(f"{path} has no header row")
    rows = np.array(values, dtype=np.float64).reshape(-1, len(schema.names))
    return FlightRecord(
        name or str(path), rows[:, schema.canonical_order], float(sample_rate),
        schema.canonical_names, schema.target_channel,
    )


def write_csv(record, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(record.column_names)
        for row in record.rows:
            writer.writerow([repr(float(v)) for v in row])


def record_schema(record):
    roles = [f"triad_{t}" for t in "BCD" for _ in range(3)]
    roles += ["target" if i == record.target_channel else "telemetry"
              for i in range(N_TRIAD, record.n_channels)]
    return Schema(tuple(record.column_names), tuple(roles))


# ---------------------------------------------------------------- synthetic flights


@dataclass
class SyntheticSpec:
    """Rotating-frame flight: world-frame field processes seen through piecewise-constant attitude.

    Amplitudes are in nT, periods and knot spacing in seconds, lengths in rows.
    """

    duration: int = 6000
    sample_rate: float = 10.0
    seed: int = 0
    segment_length: int = 300
    window_length: int = 30
    rotation: str = "random"  # "random" or "identity"
    max_angle_deg: float = 180.0
    extra_rotation: list = None  # optional fixed 3x3 applied after each segment rotation
    n_telemetry: int = 16
    field_strength: float = 50000.0
    field_direction: tuple = (0.3, -0.05, 0.95)
    direction_wobble: float = 0.02
    target_amplitudes: tuple = (30.0, 15.0, 8.0)
    target_periods: tuple = (60.0, 23.0, 9.0)
    drift_amplitude: float = 20.0
    drift_knot_spacing: float = 40.0
    interference: tuple = (0.3, 0.1)  # C and D interference, relative to field_strength
    triad_noise: float = 1.0
    telemetry_noise: float = 0.01
    target_noise: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.duration < 2 or self.sample_rate <= 0:
            raise InvalidSpec("duration must be >= 2 rows and sample_rate positive")
        if self.segment_length < self.window_length or self.window_length < 1:
            raise InvalidSpec(
                f"segment_length {self.segment_length} must be >= window_length {self.window_length}"
            )
        if self.rotation not in ("random", "identity"):
            raise InvalidSpec(f"rotation must be 'random' or 'identity', got {self.rotation!r}")
        if self.n_telemetry < 2:
            raise InvalidSpec("at least 2 telemetry channels are required")
        if len(self.target_amplitudes) != len(self.target_periods):
            raise InvalidSpec("target_amplitudes and target_periods differ in length")
        if min(self.target_periods, default=1.0) <= 0 or self.drift_knot_spacing <= 0:
            raise InvalidSpec("periods and knot spacing must be positive")
        if len(self.interference) != 2:
            raise InvalidSpec("interference needs two amplitudes (C, D)")
        if min(self.triad_noise, self.telemetry_noise, self.target_noise) < 0:
            raise InvalidSpec("noise levels must be non-negative")
        if self.extra_rotation is not None:
            R = np.asarray(self.extra_rotation, dtype=np.float64)
            if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9) \
                    or np.linalg.det(R) < 0:
                raise InvalidSpec("extra_rotation must be a 3x3 proper rotation")

    @classmethod
    def from_mapping(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_mapping(self):
        return asdict(self)


def load_synthetic_spec(path):
    with open(path) as fh:
        return SyntheticSpec.from_mapping(json.load(fh))


def _smooth_processes(rng, t, n, periods=(5.0, 120.0)):
    """``n`` smooth unit-scale processes as sums of three random sinusoids."""
    lo, hi = np.log(periods[0]), np.log(periods[1])
    P = np.exp(rng.uniform(lo, hi, (n, 3)))
    amp = rng.uniform(0.3, 1.0, (n, 3))
    phase = rng.uniform(0, 2 * np.pi, (n, 3))
    arg = 2 * np.pi * t[:, None, None] / P[None] + phase[None]
    return np.sum(amp[None] * np.sin(arg), axis=-1)


def _segment_rotations(spec, rng, n_segments):
    if spec.rotation == "identity":
        return np.broadcast_to(np.eye(3), (n_segments, 3, 3)).copy()
    out = np.empty((n_segments, 3, 3))
    for k in range(n_segments):
        axis = rng.standard_normal(3)
        angle = np.radians(spec.max_angle_deg) * rng.uniform()
        out[k] = axis_angle_rotation(axis, angle)
    return out


def generate_synthetic(spec) -> FlightRecord:
    """Generate a flight whose triads are segment rotations of world-frame vectors.

    The target (scalar field intensity anomaly) and telemetry are drawn from
    random streams independent of the attitude plan, so changing rotations
    never changes them.
    """
    spec.validate()
    ss = np.random.SeedSequence(spec.seed)
    rng_target, rng_tel, rng_rot, rng_noise = (np.random.default_rng(s) for s in ss.spawn(4))
    T = spec.duration
    t = np.arange(T) / spec.sample_rate

    phases = rng_target.uniform(0, 2 * np.pi, len(spec.target_periods))
    y = np.zeros(T)
    for a, P, ph in zip(spec.target_amplitudes, spec.target_periods, phases):
        y += a * np.sin(2 * np.pi * t / P + ph)
    knots = np.arange(0.0, t[-1] + 2 * spec.drift_knot_spacing, spec.drift_knot_spacing)
    y += CubicSpline(knots, spec.drift_amplitude * rng_target.standard_normal(knots.size))(t)
    wobble = _smooth_processes(rng_target, t, 3, periods=(30.0, 300.0))

    tel = _smooth_processes(rng_tel, t, spec.n_telemetry)
    tel += spec.telemetry_noise * rng_tel.standard_normal(tel.shape)

    direction = np.asarray(spec.field_direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    fhat = direction[None, :] + spec.direction_wobble * wobble
    fhat /= np.linalg.norm(fhat, axis=1, keepdims=True)
    F = (spec.field_strength + y)[:, None] * fhat

    # Interference axes orthogonal to the main field direction.
    e_c = np.cross(direction, [0.0, 0.0, 1.0] if abs(direction[2]) < 0.9 else [1.0, 0.0, 0.0])
    e_c /= np.linalg.norm(e_c)
    e_d = np.cross(direction, e_c)
    p = 1.0 + 0.5 * np.tanh(tel[:, 0])
    q = 1.0 + 0.5 * np.tanh(tel[:, 1])
    amp_c, amp_d = (a * spec.field_strength for a in spec.interference)
    B = F.copy()
    C = F + (amp_c * p)[:, None] * e_c
    D = F + (amp_d * q)[:, None] * e_d
    world = np.concatenate([B, C, D], axis=1)
    world += spec.triad_noise * rng_noise.standard_normal(world.shape)
    y_obs = y + spec.target_noise * rng_noise.standard_normal(T)

    n_seg = -(-T // spec.segment_length)
    rots = _segment_rotations(spec, rng_rot, n_seg)
    if spec.extra_rotation is not None:
        rots = np.asarray(spec.extra_rotation, dtype=np.float64)[None] @ rots
    if spec.rotation == "identity" and spec.extra_rotation is None:
        triads = world
    else:
        seg = np.arange(T) // spec.segment_length
        vecs = world.reshape(T, 3, 3)
        triads = np.einsum("tij,tkj->tki", rots[seg], vecs).reshape(T, 9)

    schema = default_schema(spec.n_telemetry)
    rows = np.concatenate([triads, tel, y_obs[:, None]], axis=1)
    return FlightRecord(f"synthetic-{spec.seed}", rows, float(spec.sample_rate),
                        schema.canonical_names, schema.target_channel)


# ---------------------------------------------------------------- normalization


@dataclass
class Normalization:
    """Per-channel affine scaling fitted on the training block.

    Scalar channels are z-scored. Triad channels share one scale and are not
    centred (``triad_mode="shared"``) so that scaling commutes with rotations;
    ``triad_mode="channel"`` z-scores them like any other channel.
    """

    mean: np.ndarray
    std: np.ndarray
    target_channel: int
    triad_mode: str = "shared"

    @classmethod
    def fit(cls, rows, target_channel, triad_mode="shared"):
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        if triad_mode == "shared":
            tri = rows[:, :N_TRIAD]
            mean[:N_TRIAD] = 0.0
            std[:N_TRIAD] = np.sqrt(np.mean(tri * tri))
        elif triad_mode != "channel":
            raise ValueError(f"triad_mode must be 'shared' or 'channel', got {triad_mode!r}")
        std = np.where(std < STD_FLOOR, 1.0, std)
        return cls(mean, std, target_channel, triad_mode)

    def normalize(self, rows):
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, rows):
        return np.asarray(rows, dtype=np.float64) * self.std + self.mean

    def normalize_target(self, y):
        return (np.asarray(y) - self.mean[self.target_channel]) / self.std[self.target_channel]

    def denormalize_target(self, y):
        return np.asarray(y) * self.std[self.target_channel] + self.mean[self.target_channel]

    def to_mapping(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "target_channel": self.target_channel, "triad_mode": self.triad_mode}

    @classmethod
    def from_mapping(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   int(d["target_channel"]), d.get("triad_mode", "shared"))


# ---------------------------------------------------------------- windows


@dataclass
class WindowSet:
    """Windows of one split, in normalized units.

    ``inputs`` is ``(N, L, D0)``, ``future`` is ``(N, L_pred, D0)`` (all channels
    over the horizon), ``starts`` the record row of each window's first step.
    """

    inputs: np.ndarray
    future: np.ndarray
    starts: np.ndarray
    split: str
    normalization: Normalization
    sample_rate: float = 10.0
    source: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def target_channel(self):
        return self.normalization.target_channel

    @property
    def y(self):
        return self.future[:, :, self.target_channel]

    @property
    def seq_len(self):
        return self.inputs.shape[1]

    @property
    def pred_len(self):
        return self.future.shape[1]

    @property
    def row_span(self):
        """(first, last) record rows touched by any window, inclusive."""
        if not len(self):
            return (None, None)
        return int(self.starts.min()), int(self.starts.max() + self.seq_len + self.pred_len - 1)

    def window(self, i):
        return TriadWindow.from_matrix(self.inputs[i], self.y[i], self.sample_rate)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return WindowSet(self.inputs[idx], self.future[idx], self.starts[idx], self.split,
                         self.normalization, self.sample_rate, self.source)


def _block_windows(lo, hi, L, L_pred, stride):
    span = L + L_pred
    if hi - lo < span:
        return np.zeros(0, dtype=np.intp)
    return np.arange(lo, hi - span + 1, stride, dtype=np.intp)


def split_bounds(T):
    return int(math.floor(SPLIT_FRACTIONS[0] * T)), int(math.floor(SPLIT_FRACTIONS[1] * T))


def split_and_window(record, L, L_pred, stride=1, normalization=None, triad_mode="shared"):
    """Contiguous 60/20/20 blocks, windows inside each block, train-block normalization.

    Pass ``normalization`` to reuse statistics fitted elsewhere (zero-shot
    transfer); otherwise they are fitted on the training block.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    T = record.length
    n1, n2 = split_bounds(T)
    blocks = {"train": (0, n1), "val": (n1, n2), "test": (n2, T)}
    starts = {k: _block_windows(lo, hi, L, L_pred, stride) for k, (lo, hi) in blocks.items()}
    empty = [k for k, s in starts.items() if s.size == 0]
    if empty:
        raise TooShort(
            f"record of {T} rows gives no {L}+{L_pred} windows in block(s) {empty}"
        )
    norm = normalization or Normalization.fit(record.rows[:n1], record.target_channel, triad_mode)
    rows = norm.normalize(record.rows)
    out = []
    for split in ("train", "val", "test"):
        s = starts[split]
        inputs = rows[s[:, None] + np.arange(L)[None, :]]
        future = rows[s[:, None] + L + np.arange(L_pred)[None, :]]
        out.append(WindowSet(inputs, future, s, split, norm, record.sample_rate, record.name))
    return tuple(out)


def subsample_fewshot(train, fraction, seed):
    """Keep ``max(1, floor(fraction * N))`` windows drawn without replacement, in time order."""
    if not 0 < fraction <= 1:
        raise InvalidFraction(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return train
    n = len(train)
    k = max(1, int(math.floor(fraction * n)))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return train.subset(idx)
