"""Seeded synthetic kinematic recordings with a weakened paretic side.

Channels are split into a left-arm group, a mirrored right-arm group and a
trunk group. Every action drives all channels with its own oscillation
template (dominant frequency 1.0, 1.5, ..., Hz plus a per-channel amplitude,
phase and second harmonic). The paretic-side group is attenuated by a
per-subject factor and gets extra phase jitter.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .windowing import ACTIONS, PARETIC_SIDES, Recording, SubjectMeta, write_recording

BASE_FREQ_HZ = 1.0
FREQ_STEP_HZ = 0.5
# subject factor above the first cut is Mild, above the second Moderate, else Severe
IMPAIRMENT_CUTS = (0.55, 0.4)
UE_FMA_RANGES = {"Mild": (48, 66), "Moderate": (29, 47), "Severe": (0, 28)}


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 30
    recordings_per_subject: int = 9
    length: int = 400
    channels: int = 75
    sample_rate_hz: float = 100.0
    asymmetry_factor: float = 0.5
    noise_sigma: float = 0.1
    actions: tuple[str, ...] = field(default=ACTIONS)
    seed: int = 0
    # spread of the per-action channel phase offsets (rad); small values leave
    # dominant frequency as the main action cue
    action_signature: float = 0.3
    recording_phase_sd: float = 0.3
    frequency_jitter_hz: float = 0.1

    def __post_init__(self):
        if self.channels < 3:
            raise ValueError("need at least 3 channels (one per left/right/trunk group)")
        if not 0 < self.asymmetry_factor <= 1:
            raise ValueError(f"asymmetry_factor must be in (0, 1], got {self.asymmetry_factor}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_subjects < 0 or self.recordings_per_subject < 0 or self.length < 1:
            raise ValueError("subject/recording counts must be >= 0 and length >= 1")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        unknown = set(self.actions) - set(ACTIONS)
        if unknown or not self.actions:
            raise ValueError(f"unknown actions {sorted(unknown)}")


def channel_groups(n_channels: int) -> dict[str, np.ndarray]:
    side = n_channels // 3
    return {"left": np.arange(side), "right": np.arange(side, 2 * side),
            "trunk": np.arange(2 * side, n_channels)}


def channel_names(n_channels: int) -> list[str]:
    names = []
    for group, idx in channel_groups(n_channels).items():
        names += [f"{group}_{i:02d}" for i in range(len(idx))]
    return names


def action_frequency(action: str) -> float:
    return BASE_FREQ_HZ + FREQ_STEP_HZ * ACTIONS.index(action)


def impairment_for(factor: float) -> str:
    if factor > IMPAIRMENT_CUTS[0]:
        return "Mild"
    if factor > IMPAIRMENT_CUTS[1]:
        return "Moderate"
    return "Severe"


def _templates(rng, n_side, n_trunk, signature):
    """Per-channel base shape shared by all actions plus a small per-action phase offset."""
    n_act = len(ACTIONS)

    def block(n, scale):
        return {"amp": np.broadcast_to(scale * rng.uniform(0.5, 1.5, n), (n_act, n)),
                "phase": rng.uniform(0, 2 * np.pi, n) + rng.normal(0.0, signature, (n_act, n)),
                "harm": np.broadcast_to(rng.uniform(0.0, 0.4, n), (n_act, n)),
                "phase2": rng.uniform(0, 2 * np.pi, n) + rng.normal(0.0, signature, (n_act, n))}

    return block(n_side, 1.0), block(n_trunk, 0.5)


def _drive(t, freq, tpl, a, theta, amp_scale):
    """Oscillation for every channel of a template block; theta is [L, n]."""
    w = 2 * np.pi * freq * t[:, None]
    return amp_scale * tpl["amp"][a] * (np.sin(w + tpl["phase"][a] + theta)
                                        + tpl["harm"][a] * np.sin(2 * w + tpl["phase2"][a] + 2 * theta))


def _subjects(spec: SynthSpec, rng):
    n = spec.n_subjects
    sides = rng.permutation(np.array(PARETIC_SIDES * ((n + 1) // 2))[:n])
    out = []
    for s in range(n):
        age = int(np.clip(np.round(rng.normal(62, 12)), 25, 95))
        sex = str(rng.choice(["F", "M"]))
        days = float(np.round(np.exp(rng.normal(5.0, 1.0)), 1))
        recovery = 1.15 if days < 90 else (1.0 if days < 365 else 0.85)
        factor = float(spec.asymmetry_factor ** (np.exp(rng.normal(0.0, 0.25)) * recovery))
        impairment = impairment_for(factor)
        lo, hi = UE_FMA_RANGES[impairment]
        ue = int(rng.integers(lo, hi + 1))
        out.append((str(sides[s]), factor, SubjectMeta(age, sex, impairment, days, ue)))
    return out


def generate(spec: SynthSpec | None = None):
    """Return ``(recordings, sidecars)``; identical output for identical specs."""
    spec = spec or SynthSpec()
    root = np.random.SeedSequence(spec.seed)
    tpl_seed, subj_seed, rec_seed = root.spawn(3)
    groups = channel_groups(spec.channels)
    n_side, n_trunk = len(groups["left"]), len(groups["trunk"])
    side_tpl, trunk_tpl = _templates(np.random.default_rng(tpl_seed), n_side, n_trunk,
                                     spec.action_signature)
    subjects = _subjects(spec, np.random.default_rng(subj_seed))
    names = channel_names(spec.channels)
    t = np.arange(spec.length) / spec.sample_rate_hz
    rec_seeds = rec_seed.spawn(spec.n_subjects * spec.recordings_per_subject)
    recordings = []
    for s, (side, factor, meta) in enumerate(subjects):
        for k in range(spec.recordings_per_subject):
            rng = np.random.default_rng(rec_seeds[s * spec.recordings_per_subject + k])
            action = spec.actions[(k + s) % len(spec.actions)]
            a = ACTIONS.index(action)
            freq = action_frequency(action) + rng.uniform(-spec.frequency_jitter_hz, spec.frequency_jitter_hz)
            theta = rng.uniform(0, 2 * np.pi)
            gain = rng.uniform(0.9, 1.1)
            base_jitter = 0.005
            extra_jitter = 0.03 * (1.0 - factor)
            # per-recording channel variation, mirrored across the two arms
            side_amp = gain * rng.uniform(0.8, 1.2, n_side)
            side_phase = theta + rng.normal(0.0, spec.recording_phase_sd, n_side)
            x = np.empty((spec.length, spec.channels))
            for grp in ("left", "right"):
                paretic = grp == side.lower()
                sd = base_jitter + (extra_jitter if paretic else 0.0)
                walk = side_phase + np.cumsum(rng.normal(0.0, sd, (spec.length, n_side)), axis=0)
                sig = _drive(t, freq, side_tpl, a, walk, side_amp)
                x[:, groups[grp]] = sig * (factor if paretic else 1.0)
            trunk_amp = gain * rng.uniform(0.8, 1.2, n_trunk)
            walk = (theta + rng.normal(0.0, spec.recording_phase_sd, n_trunk)
                    + np.cumsum(rng.normal(0.0, base_jitter, (spec.length, n_trunk)), axis=0))
            x[:, groups["trunk"]] = _drive(t, freq, trunk_tpl, a, walk, trunk_amp)
            x += rng.uniform(-1.0, 1.0, spec.channels)
            x += rng.normal(0.0, spec.noise_sigma, x.shape)
            recordings.append(Recording(
                id=f"s{s:03d}_r{k:02d}", channels=list(names), samples=x,
                sample_rate_hz=spec.sample_rate_hz, paretic_side=side, action=action, meta=meta))
    return recordings, [r.sidecar() for r in recordings]


def export(recordings, directory, spec: SynthSpec | None = None, format: str = "csv") -> Path:
    """Write each recording plus sidecar and a ``manifest.json`` listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in recordings:
        write_recording(rec, directory, format)
    manifest = {"recordings": [r.id for r in recordings], "format": format,
                "spec": asdict(spec) if spec is not None else None}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def group_rms(rec: Recording) -> dict[str, float]:
    """Root-mean-square of each de-meaned channel group."""
    x = rec.samples - rec.samples.mean(axis=0)
    return {g: float(np.sqrt(np.mean(x[:, idx] ** 2)))
            for g, idx in channel_groups(x.shape[1]).items() if len(idx)}


def energy_ratio_predict(rec: Recording) -> str:
    """Baseline: the side with lower movement energy is called paretic."""
    rms = group_rms(rec)
    return "Left" if rms["left"] < rms["right"] else "Right"
