"""Plain-text key-value run configuration.

Keys at the top of the file (before any ``[section]``) apply to both
ensemble layers; ``[covid]`` and ``[ards]`` sections override them per layer
and ``[policy]`` holds the decision and reporting keys::

    learning_rate = 1e-4
    pool_size = 16
    selected_count = 8

    [ards]
    epochs_min = 10
    epochs_max = 15

    [policy]
    negative_threshold = 0.7
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from wisdomnet.ensemble import DecisionPolicy
from wisdomnet.member_network import DEFAULT_INPUT_SIDE
from wisdomnet.report import HIGH_VARIANCE_THRESHOLD
from wisdomnet.trainer import TrainConfig, coerce_value

TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
POLICY_KEYS = {"negative_threshold", "positive_threshold", "strict", "high_variance_threshold"}
RUN_KEYS = {"input_side"}
SECTIONS = {"covid", "ards", "policy"}


@dataclass
class RunConfig:
    covid: TrainConfig = field(default_factory=TrainConfig)
    ards: TrainConfig = field(default_factory=lambda: TrainConfig.for_ards(seed=1))
    policy: DecisionPolicy = field(default_factory=DecisionPolicy)
    high_variance_threshold: float = HIGH_VARIANCE_THRESHOLD
    input_side: int = DEFAULT_INPUT_SIDE
    input_side_set: bool = False

    def with_overrides(self, *, seed=None, selected_count=None, negative_threshold=None,
                       input_side=None, pool_size=None, workers=None) -> "RunConfig":
        """Apply command-line overrides; the ARDS layer gets ``seed + 1``."""
        covid, ards, policy = self.covid, self.ards, self.policy
        changes = {}
        if selected_count is not None:
            changes["selected_count"] = selected_count
        if pool_size is not None:
            changes["pool_size"] = pool_size
        if workers is not None:
            changes["workers"] = workers
        if changes:
            covid, ards = covid.replace(**changes), ards.replace(**changes)
        if seed is not None:
            covid, ards = covid.replace(seed=seed), ards.replace(seed=seed + 1)
        if negative_threshold is not None:
            policy = dataclasses.replace(policy, negative_threshold=negative_threshold)
        if input_side is None:
            return dataclasses.replace(self, covid=covid, ards=ards, policy=policy)
        return dataclasses.replace(self, covid=covid, ards=ards, policy=policy,
                                   input_side=input_side, input_side_set=True)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string("[DEFAULT]\n" + text, source=source)
    except configparser.Error as exc:
        raise ValueError(f"{source}: {exc}") from exc
    unknown_sections = set(parser.sections()) - SECTIONS
    if unknown_sections:
        raise ValueError(f"{source}: unknown section(s) {sorted(unknown_sections)}")
    known = TRAIN_KEYS | POLICY_KEYS | RUN_KEYS
    for section in ["DEFAULT", *parser.sections()]:
        for key in parser[section]:
            if key not in known:
                raise ValueError(f"{source}: unknown key {key!r} in [{section}]")

    def layer(name, factory):
        section = parser[name] if parser.has_section(name) else parser["DEFAULT"]
        values = {k: v for k, v in section.items() if k in TRAIN_KEYS}
        base = dataclasses.asdict(factory())
        base.update(values)
        return TrainConfig.from_mapping(base)

    policy_section = parser["policy"] if parser.has_section("policy") else parser["DEFAULT"]
    try:
        policy = DecisionPolicy(
            negative_threshold=float(policy_section.get("negative_threshold", 0.70)),
            positive_threshold=float(policy_section.get("positive_threshold", 0.50)),
            strict=coerce_value("bool", policy_section.get("strict", "false")),
        )
        hv = float(policy_section.get("high_variance_threshold", HIGH_VARIANCE_THRESHOLD))
        defaults = parser["DEFAULT"]
        input_side = int(defaults.get("input_side", DEFAULT_INPUT_SIDE))
        covid = layer("covid", TrainConfig)
        ards = layer("ards", TrainConfig.for_ards)
        # section values inherit top-level keys, so an ARDS seed only counts as
        # explicit when it differs from the shared one
        explicit_seed = parser.has_section("ards") and parser["ards"].get("seed") != defaults.get("seed")
        if not explicit_seed:
            ards = ards.replace(seed=covid.seed + 1)
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from exc
    return RunConfig(covid, ards, policy, hv, input_side, "input_side" in defaults)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))
