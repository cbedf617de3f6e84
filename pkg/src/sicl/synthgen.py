"""Synthetic multi-subject, two-modality activity dataset.

Every activity has a latent waveform (three band-limited periodic channels).  A
session renders that latent through a fixed per-modality mixing matrix and then
through its subject's nuisance transform: per-channel gain, DC offset, a rotation
of every channel triplet and a playback-speed factor.  The nuisance deviates from
identity in proportion to ``subject_nuisance_strength``, which makes subject
identity a dial-able confound.

Session-level variation (amplitude and a small time shift) is indexed by
``(activity, repetition)`` and shared across subjects, so with the nuisance and
noise switched off all subjects emit byte-identical windows.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ContractError

WINDOW_LENGTH = 100
LATENT_DIM = 3
NUM_HARMONICS = 3
MAX_FREQ = 5  # cycles per window

MAGIC = b"SICL"
FORMAT_VERSION = 1


class Modality(str, Enum):
    INERTIAL = "inertial"
    SECONDARY = "secondary"


CHANNELS = {Modality.INERTIAL: 6, Modality.SECONDARY: 9}
_MODALITY_CODE = {Modality.INERTIAL: 0, Modality.SECONDARY: 1}
_CODE_MODALITY = {v: k for k, v in _MODALITY_CODE.items()}


@dataclass(frozen=True)
class SensorWindow:
    values: np.ndarray  # (channels, T)
    subject_id: int
    activity_id: int
    modality: Modality = Modality.INERTIAL
    session_id: int = -1

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def replace(self, values: np.ndarray) -> "SensorWindow":
        return SensorWindow(values, self.subject_id, self.activity_id, self.modality, self.session_id)


@dataclass(frozen=True)
class WorldSpec:
    num_subjects: int = 12
    num_activities: int = 6
    windows_per_pair: int = 10
    subject_nuisance_strength: float = 0.8
    noise_sigma: float = 0.1
    rng_seed: int = 0

    def validate(self) -> None:
        if self.num_subjects < 2 or self.num_activities < 2:
            raise ContractError("need at least 2 subjects and 2 activities")
        if self.windows_per_pair < 1:
            raise ContractError("windows_per_pair must be >= 1")
        if not 0.0 <= self.subject_nuisance_strength <= 1.0:
            raise ContractError("subject_nuisance_strength must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(**d)


@dataclass(frozen=True)
class SubjectNuisance:
    gain: dict  # modality -> (channels,)
    offset: dict  # modality -> (channels,)
    rotation: dict  # modality -> (3, 3)
    speed: float


def _rng(spec: WorldSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.rng_seed, spawn_key=(stream,)))


def activity_templates(spec: WorldSpec):
    """Per-activity harmonic parameters: frequencies, amplitudes, phases, each (A, LATENT_DIM, NUM_HARMONICS)."""
    rng = _rng(spec, 1)
    shape = (spec.num_activities, LATENT_DIM, NUM_HARMONICS)
    freqs = rng.integers(1, MAX_FREQ + 1, size=shape)
    amps = rng.uniform(0.5, 1.0, size=shape)
    phases = rng.uniform(0.0, 2 * np.pi, size=shape)
    return freqs, amps, phases


def mixing_matrices(spec: WorldSpec) -> dict:
    rng = _rng(spec, 2)
    return {m: rng.standard_normal((CHANNELS[m], LATENT_DIM)) / np.sqrt(LATENT_DIM)
            for m in (Modality.INERTIAL, Modality.SECONDARY)}


def subject_nuisances(spec: WorldSpec) -> list[SubjectNuisance]:
    """Per-subject transforms, drawn once from the world seed."""
    rng = _rng(spec, 3)
    s = spec.subject_nuisance_strength
    out = []
    for _ in range(spec.num_subjects):
        gain, offset, rot = {}, {}, {}
        for m in (Modality.INERTIAL, Modality.SECONDARY):
            c = CHANNELS[m]
            gain[m] = np.exp(s * rng.uniform(-0.7, 0.7, size=c))
            offset[m] = s * rng.normal(0.0, 1.0, size=c)
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            angle = s * rng.uniform(0.0, np.pi / 2)
            rot[m] = Rotation.from_rotvec(axis * angle).as_matrix()
        speed = 1.0 + s * rng.uniform(-0.3, 0.3)
        out.append(SubjectNuisance(gain, offset, rot, speed))
    return out


def _session_variation(spec: WorldSpec):
    rng = _rng(spec, 4)
    shape = (spec.num_activities, spec.windows_per_pair)
    return rng.uniform(0.8, 1.2, size=shape), rng.uniform(-0.05, 0.05, size=shape)


def _latent(freqs, amps, phases, speed, shift) -> np.ndarray:
    t = (np.arange(WINDOW_LENGTH) / WINDOW_LENGTH) * speed + shift
    arg = 2 * np.pi * freqs[..., None] * t + phases[..., None]  # (L, H, T)
    lat = (amps[..., None] * np.sin(arg)).sum(axis=1)
    return lat / np.sqrt((lat ** 2).mean(axis=1, keepdims=True))


def _rotate_triplets(x: np.ndarray, rot: np.ndarray) -> np.ndarray:
    c, t = x.shape
    if c % 3:
        return x
    return np.einsum("ij,gjt->git", rot, x.reshape(c // 3, 3, t)).reshape(c, t)


def generate(spec: WorldSpec) -> list[SensorWindow]:
    """Render every session; windows come in session order, inertial then secondary."""
    spec.validate()
    freqs, amps, phases = activity_templates(spec)
    mix = mixing_matrices(spec)
    subjects = subject_nuisances(spec)
    sess_amp, sess_shift = _session_variation(spec)
    noise_rng = _rng(spec, 5)

    windows = []
    session = 0
    for sid, nz in enumerate(subjects):
        for act in range(spec.num_activities):
            for rep in range(spec.windows_per_pair):
                lat = sess_amp[act, rep] * _latent(freqs[act], amps[act], phases[act],
                                                   nz.speed, sess_shift[act, rep])
                for m in (Modality.INERTIAL, Modality.SECONDARY):
                    x = mix[m] @ lat
                    x = _rotate_triplets(x, nz.rotation[m])
                    x = nz.gain[m][:, None] * x + nz.offset[m][:, None]
                    if spec.noise_sigma > 0:
                        x = x + noise_rng.normal(0.0, spec.noise_sigma, size=x.shape)
                    windows.append(SensorWindow(x, sid, act, m, session))
                session += 1
    return windows


def by_modality(windows: Iterable[SensorWindow], modality: Modality) -> list[SensorWindow]:
    return [w for w in windows if w.modality == modality]


def split(windows, train_subjects, test_subjects):
    """Cross-subject partition.  Windows of subjects in neither set are dropped."""
    train_subjects, test_subjects = set(train_subjects), set(test_subjects)
    overlap = train_subjects & test_subjects
    if overlap:
        raise ContractError(f"train and test subjects overlap: {sorted(overlap)}")
    train = [w for w in windows if w.subject_id in train_subjects]
    test = [w for w in windows if w.subject_id in test_subjects]
    return train, test


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------
#
# header : b"SICL" | version u16 | num_windows u32 | num_sessions u32
# record : modality u8 | subject u16 | activity u16 | channels u16 | T*channels f64
# all little-endian; records are written in session order and the loader pairs
# modalities by order of appearance.

_HEADER = struct.Struct("<4sHII")
_RECORD = struct.Struct("<BHHH")


def save_dataset(path, windows: list[SensorWindow], spec: WorldSpec | None = None,
                 splits: dict | None = None) -> Path:
    path = Path(path)
    sessions = len({w.session_id for w in windows})
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(windows), sessions))
        for w in windows:
            if w.values.shape[1] != WINDOW_LENGTH:
                raise ContractError(f"window length must be {WINDOW_LENGTH}")
            fh.write(_RECORD.pack(_MODALITY_CODE[w.modality], w.subject_id, w.activity_id, w.channels))
            fh.write(np.ascontiguousarray(w.values, dtype="<f8").tobytes())
    counts = {m.value: sum(w.modality == m for w in windows) for m in Modality}
    manifest = {
        "format": "SICL",
        "version": FORMAT_VERSION,
        "num_windows": len(windows),
        "num_sessions": sessions,
        "windows_per_modality": counts,
        "world": spec.to_dict() if spec else None,
        "splits": {k: sorted(v) for k, v in (splits or {}).items()},
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2))
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def load_dataset(path) -> list[SensorWindow]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractError(f"{path}: truncated header")
    magic, version, count, _sessions = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    seen = {m: 0 for m in Modality}
    windows = []
    for _ in range(count):
        code, subj, act, ch = _RECORD.unpack_from(raw, pos)
        pos += _RECORD.size
        nbytes = 8 * ch * WINDOW_LENGTH
        if pos + nbytes > len(raw):
            raise ContractError(f"{path}: truncated record")
        values = np.frombuffer(raw, dtype="<f8", count=ch * WINDOW_LENGTH, offset=pos)
        values = values.astype(np.float64).reshape(ch, WINDOW_LENGTH)
        pos += nbytes
        m = _CODE_MODALITY[code]
        windows.append(SensorWindow(values, subj, act, m, seen[m]))
        seen[m] += 1
    return windows


def load_manifest(path) -> dict:
    return json.loads(manifest_path(path).read_text())
