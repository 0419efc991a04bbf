"""Evaluation, dispersion diagnostics and report files."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wisdomnet._io import atomic_write_text
from wisdomnet.data_pipeline import Dataset, split_dataset
from wisdomnet.ensemble import (
    Decision,
    DecisionPolicy,
    DecisionReport,
    EnsembleLayer,
    Role,
    aggregate_mean,
    cascade_predict,
    decide_covid,
    predict_layer,
    train_layer,
)
from wisdomnet.member_network import ProbabilityPair
from wisdomnet.trainer import TrainConfig

log = logging.getLogger(__name__)

HIGH_VARIANCE_THRESHOLD = 0.15
TABLE1_FRACTIONS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)

REPORTS_FILE = "reports.jsonl"
PLOT_DATA_FILE = "member_probabilities.dat"
DISPERSION_FILE = "dispersion.csv"


@dataclass(frozen=True)
class DispersionStats:
    """Spread of the member probabilities for one subject.

    ``means``/``stds`` are indexed by class; the normal fit is the
    method-of-moments fit, so ``normal_fit[c] == (means[c], stds[c])``.
    """

    means: tuple[float, float]
    stds: tuple[float, float]
    count: int
    threshold: float = HIGH_VARIANCE_THRESHOLD

    @property
    def normal_fit(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return ((self.means[0], self.stds[0]), (self.means[1], self.stds[1]))

    @property
    def high_variance(self) -> bool:
        return max(self.stds) > self.threshold

    def pdf(self, x, cls: int) -> np.ndarray:
        from scipy.stats import norm

        mu, sigma = self.normal_fit[cls]
        if sigma == 0:
            return np.where(np.isclose(x, mu), np.inf, 0.0)
        return norm.pdf(x, loc=mu, scale=sigma)


def diagnose(per_member_probs, threshold: float = HIGH_VARIANCE_THRESHOLD) -> DispersionStats:
    """Sample mean and unbiased sample std of each class over the members."""
    pairs = [p if isinstance(p, ProbabilityPair) else ProbabilityPair.from_array(p) for p in per_member_probs]
    if len(pairs) < 2:
        raise ValueError("dispersion needs at least two member outputs")
    arr = np.array([p.as_array() for p in pairs])
    agg = aggregate_mean(pairs)
    stds = arr.std(axis=0, ddof=1)
    return DispersionStats((agg.p_class0, agg.p_class1), (float(stds[0]), float(stds[1])),
                           len(pairs), threshold)


@dataclass
class EvaluationResult:
    """Confusion matrix with rows = true class, columns = decision, both ordered
    (positive, negative)."""

    confusion: np.ndarray
    reports: list[DecisionReport] = field(default_factory=list, repr=False)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion)) / self.total

    @property
    def false_negatives(self) -> int:
        return int(self.confusion[0, 1])

    @property
    def false_positives(self) -> int:
        return int(self.confusion[1, 0])

    def as_row(self) -> dict:
        c = self.confusion
        return {"n": self.total, "accuracy": self.accuracy, "true_positive": int(c[0, 0]),
                "false_negative": int(c[0, 1]), "false_positive": int(c[1, 0]),
                "true_negative": int(c[1, 1])}


@dataclass
class SplitRow:
    train_fraction: float
    test_fraction: float
    n_train: int
    n_test: int
    result: EvaluationResult

    @property
    def accuracy(self) -> float:
        return self.result.accuracy


def _decision_index(decision: Decision) -> int:
    return 0 if decision is Decision.POSITIVE else 1


def evaluate(covid_layer: EnsembleLayer, ards_layer: EnsembleLayer | None, policy: DecisionPolicy,
             test_set: Dataset) -> EvaluationResult:
    """Run the cascade over ``test_set`` (COVID-layer samples) and tally decisions.

    Without an ARDS layer only the COVID decision is computed.
    """
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    confusion = np.zeros((2, 2), dtype=np.int64)
    reports = []
    for sample in test_set:
        if ards_layer is not None:
            report = cascade_predict(covid_layer, ards_layer, policy, sample.image, sample.source_id)
            reports.append(report)
            decision = report.decision
        else:
            agg, _ = predict_layer(covid_layer, sample.image)
            decision = decide_covid(agg, policy)
        confusion[sample.label, _decision_index(decision)] += 1
    return EvaluationResult(confusion, reports)


def evaluate_splits(dataset: Dataset, fractions, covid_config: TrainConfig,
                    ards_config: TrainConfig | None = None, policy: DecisionPolicy = DecisionPolicy(),
                    seed=0) -> list[SplitRow]:
    """Train and evaluate the ensemble once per train fraction, in input order.

    COVID-tagged samples drive the accuracy; when ``ards_config`` is given and
    the dataset holds ARDS-tagged samples an ARDS layer is trained on the same
    fraction and the full cascade is evaluated.
    """
    covid_data = dataset.for_layer("covid")
    ards_data = dataset.for_layer("ards")
    rows = []
    for fraction in fractions:
        train, test = split_dataset(covid_data, fraction, seed)
        if len(train) == 0 or len(test) == 0:
            raise ValueError(f"train fraction {fraction} leaves an empty split")
        covid_layer = train_layer(train, covid_config, Role.COVID)
        ards_layer = None
        if ards_config is not None and len(ards_data):
            ards_train, _ = split_dataset(ards_data, fraction, seed)
            ards_layer = train_layer(ards_train, ards_config, Role.ARDS)
        result = evaluate(covid_layer, ards_layer, policy, test)
        log.info("train fraction %.2f: accuracy %.4f (%d test samples)", fraction, result.accuracy, len(test))
        rows.append(SplitRow(fraction, 1 - fraction, len(train), len(test), result))
    return rows


# --- files -------------------------------------------------------------------------

def csv_text(fieldnames, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_evaluation_csv(path, result: EvaluationResult) -> Path:
    row = result.as_row()
    atomic_write_text(path, csv_text(list(row), [row]))
    return Path(path)


def write_splits_csv(path, rows: list[SplitRow]) -> Path:
    records = []
    for r in rows:
        rec = {"train_fraction": r.train_fraction, "test_fraction": round(r.test_fraction, 12),
               "n_train": r.n_train}
        rec.update(r.result.as_row())
        rec["n_test"] = rec.pop("n")
        records.append(rec)
    fields = ["train_fraction", "test_fraction", "n_train", "n_test", "accuracy", "true_positive",
              "false_negative", "false_positive", "true_negative"]
    atomic_write_text(path, csv_text(fields, records))
    return Path(path)


def read_splits_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def plot_data_text(reports) -> str:
    """Member index vs COVID-negative probability, one block per subject.

    Blocks are separated by two blank lines and headed by a comment, so
    gnuplot's ``index`` and most CSV/whitespace readers can consume them.
    """
    blocks = []
    for r in reports:
        lines = [f"# subject {r.subject_id} decision {r.decision.value}", "# member_index p_negative"]
        lines += [f"{i} {p.p_negative!r}" for i, p in enumerate(r.covid_members)]
        blocks.append("\n".join(lines))
    return "\n\n\n".join(blocks) + "\n"


def parse_plot_data(text: str) -> dict[str, list[tuple[int, float]]]:
    out: dict[str, list[tuple[int, float]]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("# subject "):
            current = line.split()[2]
            out[current] = []
        elif line and not line.startswith("#"):
            idx, prob = line.split()
            out[current].append((int(idx), float(prob)))
    return out


def dispersion_rows(reports, threshold: float = HIGH_VARIANCE_THRESHOLD) -> list[dict]:
    rows = []
    for r in reports:
        if len(r.covid_members) < 2:
            continue
        d = diagnose(r.covid_members, threshold)
        rows.append({"subject_id": r.subject_id, "decision": r.decision.value,
                     "mean_p_positive": d.means[0], "mean_p_negative": d.means[1],
                     "std_p_positive": d.stds[0], "std_p_negative": d.stds[1],
                     "high_variance": int(d.high_variance)})
    return rows


def write_reports_jsonl(path, reports) -> Path:
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in reports))
    return Path(path)


def read_reports_jsonl(path) -> list[DecisionReport]:
    with open(path, encoding="utf-8") as fh:
        return [DecisionReport.from_dict(json.loads(line)) for line in fh if line.strip()]


def emit_report(reports, out_dir, policy: DecisionPolicy = DecisionPolicy(),
                threshold: float = HIGH_VARIANCE_THRESHOLD, figures: bool = True) -> list[Path]:
    """Write the per-subject records, plot data, dispersion table and figures.

    Returns the written paths. Text outputs are byte-stable for identical
    inputs; figures are only rendered when ``figures`` is set.
    """
    reports = list(reports)
    out_dir = Path(out_dir)
    written = [write_reports_jsonl(out_dir / REPORTS_FILE, reports)]
    atomic_write_text(out_dir / PLOT_DATA_FILE, plot_data_text(reports))
    written.append(out_dir / PLOT_DATA_FILE)
    rows = dispersion_rows(reports, threshold)
    if rows:
        atomic_write_text(out_dir / DISPERSION_FILE, csv_text(list(rows[0]), rows))
        written.append(out_dir / DISPERSION_FILE)
    if figures and reports:
        from wisdomnet import plotting

        written.append(plotting.member_probability_figure(reports, policy, out_dir / "member_probabilities.png"))
        for r in reports:
            if len(r.covid_members) >= 2:
                d = diagnose(r.covid_members, threshold)
                if d.high_variance:
                    written.append(plotting.normal_fit_figure(
                        r, d, policy, out_dir / f"normal_fit_{r.subject_id}.png"))
    return written
