"""Centroid signatures, rule-based physiological labelling, and heatmaps."""
from __future__ import annotations

import enum
import json
import re
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from . import svg
from .clustering import ClusterModel
from .dataset import BiomarkerDescriptor, NormalizedPanel
from .errors import RuleSyntaxError, StaleModel


class PhysiologicalState(str, enum.Enum):
    HOMEOSTASIS = "Homeostasis"
    ANABOLIC_POWER = "AnabolicPower"
    METABOLIC_STRESS = "MetabolicStress"
    MECHANICAL_DAMAGE = "MechanicalDamage"
    SILENT_RISK = "SilentRisk"
    UNCLASSIFIED = "Unclassified"

    @classmethod
    def parse(cls, text: str) -> "PhysiologicalState":
        key = re.sub(r"[^a-z0-9]", "", text.lower())
        for state in cls:
            if re.sub(r"[^a-z0-9]", "", state.value.lower()) == key:
                return state
        raise RuleSyntaxError(f"unknown physiological state {text!r}")

    @property
    def title(self) -> str:
        return re.sub(r"(?<!^)([A-Z])", r" \1", self.value)


# SilentRisk leads because its normality constraints on CK and cortisol
# would otherwise be shadowed by broader rules.
PRIORITY = (
    PhysiologicalState.SILENT_RISK,
    PhysiologicalState.MECHANICAL_DAMAGE,
    PhysiologicalState.METABOLIC_STRESS,
    PhysiologicalState.ANABOLIC_POWER,
    PhysiologicalState.HOMEOSTASIS,
)


class Comparator(str, enum.Enum):
    GE = ">="
    LE = "<="
    ABS_LE = "abs<="


@dataclass(frozen=True)
class Condition:
    marker: str
    comparator: Comparator
    threshold: float

    def holds(self, z: float) -> bool:
        if self.comparator is Comparator.GE:
            return z >= self.threshold
        if self.comparator is Comparator.LE:
            return z <= self.threshold
        return abs(z) <= self.threshold

    def __str__(self) -> str:
        if self.comparator is Comparator.ABS_LE:
            return f"abs({self.marker}) <= {self.threshold:g}"
        return f"{self.marker} {self.comparator.value} {self.threshold:g}"


@dataclass(frozen=True)
class SignatureRule:
    state: PhysiologicalState
    conditions: tuple[Condition, ...] = ()
    all_markers_abs: float | None = None  # "all abs <= t" scope

    def __post_init__(self):
        if self.state is PhysiologicalState.UNCLASSIFIED:
            raise RuleSyntaxError("Unclassified is the fallback and cannot carry a rule")
        if not self.conditions and self.all_markers_abs is None:
            raise RuleSyntaxError(f"rule for {self.state.value} has no conditions")
        for c in self.conditions:
            if not np.isfinite(c.threshold):
                raise RuleSyntaxError(f"non-finite threshold in {c}")

    def __str__(self) -> str:
        parts = [str(c) for c in self.conditions]
        if self.all_markers_abs is not None:
            parts.insert(0, f"all abs <= {self.all_markers_abs:g}")
        return f"{self.state.name}: " + " & ".join(parts)


_COND = re.compile(
    r"^(?:abs\(\s*(?P<absname>[^()\s]+)\s*\)\s*<=|(?P<name>[^<>=\s]+)\s*(?P<op><=|>=))\s*(?P<value>\S+)$",
    re.IGNORECASE,
)
_ALL = re.compile(r"^all\s+abs\s*<=\s*(?P<value>\S+)$", re.IGNORECASE)


def _number(text: str, line: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise RuleSyntaxError(f"bad threshold {text!r} in rule {line!r}") from None
    if not np.isfinite(value):
        raise RuleSyntaxError(f"non-finite threshold in rule {line!r}")
    return value


def parse_rules(text: str) -> list[SignatureRule]:
    """Parse the rule file format.

    One rule per line::

        STATE: NAME >= z & NAME <= z & abs(NAME) <= z
        HOMEOSTASIS: all abs <= 0.5

    ``NAME`` is a biomarker name (matched case-insensitively, averaged over
    its acquisition windows) or a single column ``NAME@WINDOW``.
    """
    rules = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, sep, body = line.partition(":")
        if not sep or not body.strip():
            raise RuleSyntaxError(f"expected 'STATE: conditions' in {raw!r}")
        state = PhysiologicalState.parse(head.strip())
        conditions = []
        all_abs = None
        for part in body.split("&"):
            part = part.strip()
            m_all = _ALL.match(part)
            if m_all:
                all_abs = _number(m_all["value"], raw)
                continue
            m = _COND.match(part)
            if not m:
                raise RuleSyntaxError(f"cannot parse condition {part!r} in {raw!r}")
            if m["absname"]:
                conditions.append(Condition(m["absname"], Comparator.ABS_LE, _number(m["value"], raw)))
            else:
                conditions.append(Condition(m["name"], Comparator(m["op"]), _number(m["value"], raw)))
        rules.append(SignatureRule(state, tuple(conditions), all_abs))
    return rules


def default_rules_text() -> str:
    return resources.files("biostate").joinpath("default.rules").read_text(encoding="utf-8")


def default_rules() -> list[SignatureRule]:
    return parse_rules(default_rules_text())


def load_rules(path) -> list[SignatureRule]:
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh.read())


# --------------------------------------------------------------------------
# Classification


def _marker_columns(schema: Sequence[BiomarkerDescriptor], marker: str) -> list[int]:
    name, sep, window = marker.partition("@")
    name = name.lower()
    cols = []
    for j, d in enumerate(schema):
        if d.name.lower() != name:
            continue
        if sep and d.window.value.lower() != window.lower():
            continue
        cols.append(j)
    return cols


def _as_schema(schema) -> tuple[BiomarkerDescriptor, ...]:
    return tuple(d if isinstance(d, BiomarkerDescriptor) else BiomarkerDescriptor.from_header(d) for d in schema)


def rule_matches(rule: SignatureRule, signature: np.ndarray, schema) -> bool | None:
    """True/False, or None when the rule names a marker absent from the schema."""
    schema = _as_schema(schema)
    if rule.all_markers_abs is not None and not np.all(np.abs(signature) <= rule.all_markers_abs):
        return False
    for cond in rule.conditions:
        cols = _marker_columns(schema, cond.marker)
        if not cols:
            return None
        if not cond.holds(float(np.mean(signature[cols]))):
            return False
    return True


def _ordered(rules: Sequence[SignatureRule]) -> list[SignatureRule]:
    rank = {s: i for i, s in enumerate(PRIORITY)}
    return sorted(rules, key=lambda r: rank[r.state])  # stable within a state


def classify_one(signature, rules: Sequence[SignatureRule], schema) -> tuple[PhysiologicalState, SignatureRule | None]:
    signature = np.asarray(signature, dtype=float)
    for rule in _ordered(rules):
        hit = rule_matches(rule, signature, schema)
        if hit:
            return rule.state, rule
    return PhysiologicalState.UNCLASSIFIED, None


def classify(signatures, rules: Sequence[SignatureRule], schema) -> list[PhysiologicalState]:
    """Assign each centroid row the first state (by priority) whose rule matches."""
    signatures = np.atleast_2d(np.asarray(signatures, dtype=float))
    schema = _as_schema(schema)
    for rule in rules:
        missing = [c.marker for c in rule.conditions if not _marker_columns(schema, c.marker)]
        if missing:
            warnings.warn(
                f"rule {rule.state.name} skipped: marker(s) {', '.join(missing)} not in schema",
                stacklevel=2,
            )
    return [classify_one(row, rules, schema)[0] for row in signatures]


def centroid_signatures(panel: NormalizedPanel, model: ClusterModel) -> np.ndarray:
    """k x b matrix whose row r is the mean z-vector of cluster r."""
    n = len(panel.subjects)
    if len(model.assignments) != n or (model.subjects and tuple(model.subjects) != panel.subjects):
        raise StaleModel("cluster model was not fitted on this panel")
    out = np.zeros((model.k, panel.z.shape[1]))
    for r in range(model.k):
        out[r] = panel.z[model.assignments == r].mean(axis=0)
    return out


# --------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class ClusterProfile:
    cluster: int
    state: PhysiologicalState
    count: int
    share: float
    centroid: tuple[float, ...]
    signature: str


@dataclass(frozen=True)
class ProfileReport:
    clusters: tuple[ClusterProfile, ...]
    markers: tuple[str, ...]

    @property
    def states(self) -> dict[int, PhysiologicalState]:
        return {c.cluster: c.state for c in self.clusters}

    def to_dict(self) -> dict:
        return {
            "markers": list(self.markers),
            "clusters": [
                {
                    "cluster": c.cluster,
                    "state": c.state.value,
                    "count": c.count,
                    "share": c.share,
                    "signature": c.signature,
                    "centroid": list(c.centroid),
                }
                for c in self.clusters
            ],
            "unclassified": [c.cluster for c in self.clusters if c.state is PhysiologicalState.UNCLASSIFIED],
        }

    def to_json(self, meta: dict | None = None) -> str:
        d = self.to_dict()
        if meta:
            d["meta"] = meta
        return json.dumps(d, indent=2) + "\n"

    def to_text(self) -> str:
        header = ("Cluster ID", "Physiological Classification", "Number of Athletes", "Population (%)", "Biological Signature (Mean Z-Score)")
        rows = [
            (str(c.cluster), c.state.title, str(c.count), f"{100 * c.share:.1f}%", c.signature)
            for c in self.clusters
        ]
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*r) for r in rows]
        unclassified = [c.cluster for c in self.clusters if c.state is PhysiologicalState.UNCLASSIFIED]
        if unclassified:
            lines.append("")
            lines.append(
                "WARNING: cluster(s) " + ", ".join(map(str, unclassified)) + " match no signature rule (Unclassified)"
            )
        return "\n".join(line.rstrip() for line in lines) + "\n"


def _fmt_z(z: float) -> str:
    s = f"{z:+.1f}"
    return "0.0" if s in ("+0.0", "-0.0") else s


def describe_signature(signature, rule: SignatureRule | None, schema) -> str:
    schema = _as_schema(schema)
    if rule is not None and rule.conditions:
        names = list(dict.fromkeys(c.marker for c in rule.conditions))
        return "; ".join(
            f"{name}: {_fmt_z(float(np.mean(signature[_marker_columns(schema, name)])))}" for name in names
        )
    if rule is not None:
        return f"all markers within +/-{rule.all_markers_abs:g} sd"
    top = np.argsort(-np.abs(signature), kind="stable")[:2]
    return "; ".join(f"{schema[j].name}: {_fmt_z(signature[j])}" for j in top)


def profile_report(panel: NormalizedPanel, model: ClusterModel, rules: Sequence[SignatureRule] | None = None) -> ProfileReport:
    rules = default_rules() if rules is None else list(rules)
    sigs = centroid_signatures(panel, model)
    states = classify(sigs, rules, panel.schema)
    counts = np.bincount(model.assignments, minlength=model.k)
    total = int(counts.sum())
    profiles = []
    for r in range(model.k):
        _, rule = classify_one(sigs[r], rules, panel.schema)
        profiles.append(
            ClusterProfile(
                r,
                states[r],
                int(counts[r]),
                counts[r] / total,
                tuple(float(v) for v in sigs[r]),
                describe_signature(sigs[r], rule, panel.schema),
            )
        )
    profiles.sort(key=lambda p: (-p.count, p.cluster))
    return ProfileReport(tuple(profiles), tuple(panel.labels))


def render_heatmap(
    signatures,
    schema,
    row_labels: Sequence[str] | None = None,
    comment: str | None = None,
) -> str:
    """Cluster x biomarker heatmap on a diverging scale centred at z = 0.

    Colours saturate at |z| = 3 (warm above the mean, cool below); each
    cell is annotated with its z-score to one decimal.
    """
    sigs = np.atleast_2d(np.asarray(signatures, dtype=float))
    if sigs.size == 0:
        raise ValueError("empty signature matrix")
    schema = _as_schema(schema)
    k, b = sigs.shape
    if len(schema) != b:
        raise StaleModel("schema length does not match signature columns")
    row_labels = list(row_labels) if row_labels is not None else [f"Cluster {r}" for r in range(k)]
    cell_w, cell_h = 34.0, 26.0
    left, top = 160.0, 110.0
    doc = svg.Document(left + cell_w * b + 20, top + cell_h * k + 20, comment)
    for j, d in enumerate(schema):
        x = left + cell_w * (j + 0.5)
        doc.text(x, top - 6, d.label if d.window.value != "Pre" else d.name, size=9, rotate=-60)
    for r in range(k):
        y = top + cell_h * r
        doc.text(left - 6, y + cell_h * 0.65, row_labels[r], size=10, anchor="end")
        for j in range(b):
            z = float(sigs[r, j])
            doc.rect(left + cell_w * j, y, cell_w, cell_h, svg.diverging_color(z), stroke="#ffffff")
            label = f"{z:.1f}"
            doc.text(left + cell_w * (j + 0.5), y + cell_h * 0.65, "0.0" if label == "-0.0" else label, size=8, anchor="middle")
    return doc.render()
