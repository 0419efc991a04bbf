"""Ensemble layers, mean aggregation, the asymmetric COVID rule and the cascade."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from wisdomnet._io import atomic_write_text
from wisdomnet.errors import ManifestError, WeightFormatError
from wisdomnet.member_network import MemberNetwork, ProbabilityPair, load_weights, save_weights
from wisdomnet.trainer import TrainConfig, select_members, train_candidate_pool

MANIFEST_NAME = "ensemble.json"
MANIFEST_FORMAT = 1


class Role(str, Enum):
    COVID = "covid"
    ARDS = "ards"


class Decision(str, Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"


class EnsembleLayer:
    """An ordered set of member networks sharing one architecture and input size."""

    def __init__(self, members, role: Role | str = Role.COVID):
        members = list(members)
        if not members:
            raise ValueError("an ensemble layer needs at least one member")
        side = members[0].input_side
        fingerprint = members[0].fingerprint()
        for m in members:
            if m.input_side != side or m.fingerprint() != fingerprint:
                raise ValueError(f"member seed {m.seed} does not match the layer architecture")
        self.members: list[MemberNetwork] = members
        self.role = Role(role)

    @property
    def size(self) -> int:
        return len(self.members)

    def __len__(self):
        return len(self.members)

    @property
    def input_side(self) -> int:
        return self.members[0].input_side

    @property
    def evaluations(self) -> int:
        """Single-image member predictions made so far through this layer."""
        return sum(m.evaluations for m in self.members)

    def __repr__(self):
        return f"EnsembleLayer(role={self.role.value}, size={self.size}, input_side={self.input_side})"


@dataclass(frozen=True)
class DecisionPolicy:
    negative_threshold: float = 0.70
    positive_threshold: float = 0.50
    strict: bool = False

    def __post_init__(self):
        if not 0.5 <= self.negative_threshold <= 1:
            raise ValueError("negative_threshold must lie in [0.5, 1]")
        if not 0 <= self.positive_threshold <= self.negative_threshold:
            raise ValueError("positive_threshold must lie in [0, negative_threshold]")


def train_layer(dataset, config: TrainConfig, role: Role | str, validation_set=None) -> EnsembleLayer:
    """Train a candidate pool and keep ``config.selected_count`` members.

    Selection is scored on ``validation_set``, or on the training data itself
    when none is given.
    """
    pool = train_candidate_pool(dataset, config)
    chosen = select_members(pool, validation_set if validation_set is not None else dataset,
                            config.selected_count, config.selection, seed=config.seed)
    return EnsembleLayer([m.net for m in chosen], role)


def aggregate_mean(member_outputs) -> ProbabilityPair:
    """Elementwise mean of the member probability pairs."""
    outputs = list(member_outputs)
    if not outputs:
        raise ValueError("cannot aggregate an empty list of outputs")
    stacked = np.array([o.as_array() if isinstance(o, ProbabilityPair) else o for o in outputs],
                       dtype=np.float64)
    mean = stacked.sum(axis=0) / len(outputs)
    return ProbabilityPair(float(mean[0]), float(mean[1]))


def decide_covid(aggregated: ProbabilityPair, policy: DecisionPolicy = DecisionPolicy()) -> Decision:
    """Negative only when the negative probability reaches the negative threshold.

    The comparison is inclusive (``>=``) unless ``policy.strict`` is set.
    Everything below the threshold, including the band where negative is the
    majority class, is called Positive.
    """
    p_neg = aggregated.p_negative
    is_negative = p_neg > policy.negative_threshold if policy.strict else p_neg >= policy.negative_threshold
    return Decision.NEGATIVE if is_negative else Decision.POSITIVE


def predict_layer(layer: EnsembleLayer, image: np.ndarray):
    """Run every member on ``image``; return ``(aggregate, per_member_pairs)``."""
    image = np.asarray(image)
    side = layer.input_side
    if image.shape != (side, side, 3):
        raise ValueError(f"image shape {image.shape} does not match layer input {side}x{side}x3")
    outputs = [m.predict(image) for m in layer.members]
    return aggregate_mean(outputs), outputs


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


@dataclass
class DecisionReport:
    subject_id: str
    covid: ProbabilityPair
    decision: Decision
    covid_members: list[ProbabilityPair]
    ards_probability: float | None = None
    ards_members: list[ProbabilityPair] = field(default_factory=list)
    dispersion: dict = field(default_factory=dict)

    def __post_init__(self):
        self.decision = Decision(self.decision)
        if (self.ards_probability is None) != (self.decision is Decision.NEGATIVE):
            raise ValueError("ards_probability must be present exactly for Positive decisions")
        if not self.dispersion:
            self.dispersion = dispersion_summary(self.covid_members)

    def to_dict(self) -> dict:
        out = {
            "subject_id": self.subject_id,
            "covid": {"p_positive": self.covid.p_positive, "p_negative": self.covid.p_negative},
            "decision": self.decision.value,
            "covid_members": [[p.p_class0, p.p_class1] for p in self.covid_members],
            "dispersion": self.dispersion,
        }
        if self.ards_probability is not None:
            out["ards_probability"] = self.ards_probability
            out["ards_members"] = [[p.p_class0, p.p_class1] for p in self.ards_members]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionReport":
        return cls(
            subject_id=d["subject_id"],
            covid=ProbabilityPair(d["covid"]["p_positive"], d["covid"]["p_negative"]),
            decision=Decision(d["decision"]),
            covid_members=[ProbabilityPair(*p) for p in d["covid_members"]],
            ards_probability=d.get("ards_probability"),
            ards_members=[ProbabilityPair(*p) for p in d.get("ards_members", [])],
            dispersion=d.get("dispersion", {}),
        )


def dispersion_summary(pairs) -> dict:
    """Mean and sample std of each class column over the member outputs."""
    if not pairs:
        return {}
    arr = np.array([p.as_array() for p in pairs])
    return {"class0": _stats(arr[:, 0]), "class1": _stats(arr[:, 1])}


def cascade_predict(covid_layer: EnsembleLayer, ards_layer: EnsembleLayer, policy: DecisionPolicy,
                    image: np.ndarray, subject_id: str) -> DecisionReport:
    """COVID layer on every image; ARDS layer only when the decision is Positive."""
    if covid_layer.input_side != ards_layer.input_side:
        raise ValueError(
            f"layer input sides differ: covid {covid_layer.input_side}, ards {ards_layer.input_side}"
        )
    covid, covid_members = predict_layer(covid_layer, image)
    decision = decide_covid(covid, policy)
    ards_probability = None
    ards_members: list[ProbabilityPair] = []
    if decision is Decision.POSITIVE:
        ards, ards_members = predict_layer(ards_layer, image)
        ards_probability = ards.p_ards
    return DecisionReport(subject_id, covid, decision, covid_members, ards_probability, ards_members)


def cascade_batch(covid_layer, ards_layer, policy, images, subject_ids) -> list[DecisionReport]:
    if len(images) != len(subject_ids):
        raise ValueError("need one subject id per image")
    return [cascade_predict(covid_layer, ards_layer, policy, img, sid)
            for img, sid in zip(images, subject_ids)]


# --- persistence ---------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_ensemble(layer: EnsembleLayer, directory) -> Path:
    """One weight file per member plus an ``ensemble.json`` manifest with checksums."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(layer.size - 1)))
    entries = []
    for i, member in enumerate(layer.members):
        name = f"member_{i:0{width}d}.wnw"
        save_weights(member, directory / name)
        entries.append({"file": name, "seed": member.seed, "sha256": _sha256(directory / name)})
    manifest = {
        "format": MANIFEST_FORMAT,
        "role": layer.role.value,
        "lambda": layer.size,
        "input_side": layer.input_side,
        "members": entries,
    }
    atomic_write_text(directory / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_ensemble(directory) -> EnsembleLayer:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"{manifest_path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: not valid JSON ({exc.msg})") from exc
    try:
        if manifest["format"] != MANIFEST_FORMAT:
            raise ManifestError(f"{manifest_path}: unsupported manifest format {manifest['format']}")
        role = Role(manifest["role"])
        count = int(manifest["lambda"])
        side = int(manifest["input_side"])
        entries = list(manifest["members"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{manifest_path}: malformed manifest ({exc})") from exc
    if count != len(entries):
        raise ManifestError(f"{manifest_path}: lambda is {count} but {len(entries)} member files are listed")
    members = []
    for entry in entries:
        path = directory / entry["file"]
        if not path.is_file():
            raise ManifestError(f"{manifest_path}: member file {entry['file']} is missing")
        if _sha256(path) != entry["sha256"]:
            raise ManifestError(f"{manifest_path}: checksum mismatch for {entry['file']}")
        try:
            net = load_weights(path)
        except WeightFormatError as exc:
            raise ManifestError(str(exc)) from exc
        if net.input_side != side or net.seed != entry["seed"]:
            raise ManifestError(f"{manifest_path}: {entry['file']} does not match its manifest entry")
        members.append(net)
    if not members:
        raise ManifestError(f"{manifest_path}: ensemble has no members")
    return EnsembleLayer(members, role)
