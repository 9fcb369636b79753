"""Synthetic seed cohort with planted physiological profiles.

Rows are generated directly in z-space: each profile fixes a mean z (and a
spread) for its signature markers, every other marker is drawn around 0.
"""
from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import BiomarkerDescriptor, BiomarkerPanel
from .errors import SpecInvalid
from .profiling import PhysiologicalState, SignatureRule, classify_one, default_rules

NAMED_MARKERS = (
    "CK", "LDH", "CRP", "Cortisol", "Testosterone", "SpO2",
    "HeartRate", "BloodPressure", "Insulin", "Homocysteine",
)
DEFAULT_MARKERS = NAMED_MARKERS + tuple(f"marker_{i}" for i in range(len(NAMED_MARKERS) + 1, 33))

SIGNATURE_STD = 0.2
BACKGROUND_STD = 0.15
SEED_SIZE = 15

# Exemplar centroids and population shares per state.
EXEMPLARS: dict[PhysiologicalState, dict[str, float]] = {
    PhysiologicalState.HOMEOSTASIS: {},
    PhysiologicalState.ANABOLIC_POWER: {"Testosterone": 1.2, "Cortisol": -0.8},
    PhysiologicalState.METABOLIC_STRESS: {"Cortisol": 1.8, "CK": 0.0},
    PhysiologicalState.MECHANICAL_DAMAGE: {"CK": 2.4, "LDH": 2.1},
    PhysiologicalState.SILENT_RISK: {"Homocysteine": 2.0, "Insulin": 1.5},
}
PREVALENCE_SHARES: dict[PhysiologicalState, float] = {
    PhysiologicalState.HOMEOSTASIS: 114 / 290,
    PhysiologicalState.ANABOLIC_POWER: 67 / 290,
    PhysiologicalState.METABOLIC_STRESS: 59 / 290,
    PhysiologicalState.MECHANICAL_DAMAGE: 37 / 290,
    PhysiologicalState.SILENT_RISK: 13 / 290,
}


@dataclass(frozen=True)
class ProfileSpec:
    state: PhysiologicalState
    count: int
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SeedSpec:
    profiles: tuple[ProfileSpec, ...]
    biomarker_names: tuple[str, ...] = DEFAULT_MARKERS
    seed: int = 0
    signature_std: float = SIGNATURE_STD
    background_std: float = BACKGROUND_STD

    def mean_matrix(self) -> np.ndarray:
        index = {n: j for j, n in enumerate(self.biomarker_names)}
        out = np.zeros((len(self.profiles), len(self.biomarker_names)))
        for p, prof in enumerate(self.profiles):
            for name, mu in prof.means.items():
                out[p, index[name]] = mu
        return out

    def std_matrix(self) -> np.ndarray:
        index = {n: j for j, n in enumerate(self.biomarker_names)}
        out = np.full((len(self.profiles), len(self.biomarker_names)), float(self.background_std))
        for p, prof in enumerate(self.profiles):
            for name in prof.means:
                out[p, index[name]] = self.signature_std
            for name, sd in prof.stds.items():
                out[p, index[name]] = sd
        return out

    @property
    def total(self) -> int:
        return sum(p.count for p in self.profiles)


def validate_spec(spec: SeedSpec, rules: Sequence[SignatureRule] | None = None) -> None:
    names = spec.biomarker_names
    if len(set(names)) != len(names) or not names:
        raise SpecInvalid("biomarker names must be unique and non-empty")
    if len(spec.profiles) != 5:
        raise SpecInvalid(f"exactly 5 profiles required, got {len(spec.profiles)}")
    if any(p.count < 1 for p in spec.profiles) or spec.total < 2:
        raise SpecInvalid("every profile needs at least one subject")
    if spec.signature_std < 0 or spec.background_std < 0:
        raise SpecInvalid("standard deviations must be >= 0")
    known = set(names)
    for p in spec.profiles:
        unknown = (set(p.means) | set(p.stds)) - known
        if unknown:
            raise SpecInvalid(f"profile {p.state.value} references unknown markers {sorted(unknown)}")
        if any(not math.isfinite(v) for v in p.means.values()) or any(
            not (math.isfinite(v) and v >= 0) for v in p.stds.values()
        ):
            raise SpecInvalid(f"profile {p.state.value} has invalid mean or std values")
    rules = default_rules() if rules is None else rules
    schema = [BiomarkerDescriptor(n) for n in names]
    for p, mu in zip(spec.profiles, spec.mean_matrix()):
        got, _ = classify_one(mu, rules, schema)
        if got is not p.state:
            raise SpecInvalid(f"profile declared {p.state.value} but its mean vector classifies as {got.value}")


def prevalence_counts(total: int = SEED_SIZE) -> dict[PhysiologicalState, int]:
    """Largest-remainder apportionment of ``total`` by the published shares."""
    raw = {s: total * share for s, share in PREVALENCE_SHARES.items()}
    counts = {s: int(math.floor(v)) for s, v in raw.items()}
    order = sorted(raw, key=lambda s: (-(raw[s] - counts[s]), list(raw).index(s)))
    for s in order[: total - sum(counts.values())]:
        counts[s] += 1
    return counts


def default_spec(seed: int = 0, weighting: str = "equal", total: int = SEED_SIZE) -> SeedSpec:
    """The five exemplar profiles, split equally or by published shares."""
    if weighting == "equal":
        base, extra = divmod(total, len(EXEMPLARS))
        counts = {s: base + (i < extra) for i, s in enumerate(EXEMPLARS)}
    elif weighting == "prevalence":
        counts = prevalence_counts(total)
    else:
        raise SpecInvalid(f"unknown weighting {weighting!r} (expected equal or prevalence)")
    profiles = tuple(ProfileSpec(s, counts[s], dict(m)) for s, m in EXEMPLARS.items())
    return SeedSpec(profiles, DEFAULT_MARKERS, seed)


@dataclass(frozen=True)
class GeneratedSeed:
    panel: BiomarkerPanel
    states: tuple[PhysiologicalState, ...]

    def labels_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        for line in (comment or "").splitlines():
            buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "true_state"])
        for subject, state in zip(self.panel.subjects, self.states):
            writer.writerow([subject, state.value])
        return buf.getvalue()


def generate_seed(spec: SeedSpec, rules: Sequence[SignatureRule] | None = None) -> GeneratedSeed:
    """Draw every profile's rows from independent normals, profile by profile."""
    validate_spec(spec, rules)
    rng = np.random.default_rng(spec.seed)
    means, stds = spec.mean_matrix(), spec.std_matrix()
    blocks, states = [], []
    for p, prof in enumerate(spec.profiles):
        noise = rng.standard_normal((prof.count, len(spec.biomarker_names)))
        blocks.append(means[p] + stds[p] * noise)
        states += [prof.state] * prof.count
    width = max(2, len(str(spec.total)))
    subjects = tuple(f"A{i:0{width}d}" for i in range(1, spec.total + 1))
    schema = tuple(BiomarkerDescriptor(n) for n in spec.biomarker_names)
    return GeneratedSeed(BiomarkerPanel(subjects, schema, np.vstack(blocks)), tuple(states))


def parse_seed_spec(text: str) -> SeedSpec:
    """Read the declarative seed config.

    ::

        seed = 0
        signature_std = 0.2
        background_std = 0.15
        markers = CK, LDH, ...            # optional, defaults to 32 markers
        profile HOMEOSTASIS count=3
        profile MECHANICAL_DAMAGE count=3 CK=2.4 LDH=2.1:0.3

    Marker entries are ``NAME=mean`` or ``NAME=mean:std``.
    """
    settings: dict[str, str] = {}
    profiles = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower().startswith("profile "):
            tokens = line.split()[1:]
            if not tokens:
                raise SpecInvalid(f"profile line without a state: {raw!r}")
            try:
                state = PhysiologicalState.parse(tokens[0])
            except ValueError as exc:
                raise SpecInvalid(str(exc)) from None
            count, means, stds = None, {}, {}
            for tok in tokens[1:]:
                key, sep, value = tok.partition("=")
                if not sep:
                    raise SpecInvalid(f"expected key=value, got {tok!r}")
                try:
                    if key.lower() == "count":
                        count = int(value)
                        continue
                    mu, _, sd = value.partition(":")
                    means[key] = float(mu)
                    if sd:
                        stds[key] = float(sd)
                except ValueError:
                    raise SpecInvalid(f"bad number in {tok!r}") from None
            if count is None:
                raise SpecInvalid(f"profile {tokens[0]} has no count")
            profiles.append(ProfileSpec(state, count, means, stds))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SpecInvalid(f"cannot parse line {raw!r}")
        settings[key.strip().lower()] = value.strip()
    markers = DEFAULT_MARKERS
    if "markers" in settings:
        markers = tuple(m.strip() for m in settings["markers"].split(",") if m.strip())
    try:
        return SeedSpec(
            tuple(profiles),
            markers,
            int(settings.get("seed", 0)),
            float(settings.get("signature_std", SIGNATURE_STD)),
            float(settings.get("background_std", BACKGROUND_STD)),
        )
    except ValueError as exc:
        raise SpecInvalid(str(exc)) from None


def format_seed_spec(spec: SeedSpec) -> str:
    lines = [
        f"seed = {spec.seed}",
        f"signature_std = {spec.signature_std!r}",
        f"background_std = {spec.background_std!r}",
    ]
    if spec.biomarker_names != DEFAULT_MARKERS:
        lines.append("markers = " + ", ".join(spec.biomarker_names))
    for p in spec.profiles:
        parts = [f"profile {p.state.name}", f"count={p.count}"]
        for name, mu in p.means.items():
            parts.append(f"{name}={mu!r}" + (f":{p.stds[name]!r}" if name in p.stds else ""))
        for name, sd in p.stds.items():
            if name not in p.means:
                parts.append(f"{name}=0.0:{sd!r}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
