"""Matplotlib figures written next to the text reports.

Figures are drawn on bare ``Figure`` objects with the Agg canvas, so nothing
touches pyplot's global state and no display is required.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from wisdomnet._io import atomic_write_bytes

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

MAX_LEGEND_ENTRIES = 10


def _new_figure(width=7.0, height=3.0, ncols=1):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig, fig.subplots(1, ncols, squeeze=False)[0]


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    atomic_write_bytes(path, buf.getvalue())
    return path


@matplotlib.rc_context(STYLE)
def member_probability_figure(reports, policy, path) -> Path:
    """Member index vs P(negative), Negative subjects left, Positive subjects right."""
    fig, (ax_neg, ax_pos) = _new_figure(ncols=2)
    for ax, decision, title in ((ax_neg, "Negative", "A: decided negative"),
                                (ax_pos, "Positive", "B: decided positive")):
        for r in reports:
            if r.decision.value != decision:
                continue
            probs = [p.p_negative for p in r.covid_members]
            ax.plot(range(len(probs)), probs, marker=".", linewidth=0.8, label=r.subject_id)
        ax.axhline(policy.negative_threshold, color="k", linestyle="--", linewidth=0.8)
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("member index")
        ax.set_title(title)
        if 0 < len(ax.get_legend_handles_labels()[0]) <= MAX_LEGEND_ENTRIES:
            ax.legend(loc="best", ncol=2)
    ax_neg.set_ylabel("P(negative)")
    fig.tight_layout()
    return _save(fig, path)


@matplotlib.rc_context(STYLE)
def normal_fit_figure(report, stats, policy, path) -> Path:
    """Fitted normal curves of P(negative) and P(positive) for one subject."""
    fig, (ax_neg, ax_pos) = _new_figure(ncols=2)
    xs = np.linspace(0, 1, 401)
    members = np.array([p.as_array() for p in report.covid_members])
    for ax, cls, label in ((ax_neg, 1, "P(negative)"), (ax_pos, 0, "P(positive)")):
        mu, sigma = stats.normal_fit[cls]
        if sigma > 0:
            ax.plot(xs, stats.pdf(xs, cls), color="C0")
        ax.plot(members[:, cls], np.zeros(len(members)), "|", color="C1", markersize=12)
        ax.axvline(mu, color="C2", linewidth=0.8, label=f"mean {mu:.3f}")
        if cls == 1:
            ax.axvline(policy.negative_threshold, color="k", linestyle="--", linewidth=0.8,
                       label=f"threshold {policy.negative_threshold:.2f}")
        ax.set_xlabel(label)
        ax.set_title(f"{report.subject_id}: sigma = {sigma:.3f}")
        ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)


@matplotlib.rc_context(STYLE)
def split_accuracy_figure(rows, path) -> Path:
    fig, (ax,) = _new_figure(width=4.0, height=3.0)
    fractions = [r.train_fraction for r in rows]
    ax.plot(fractions, [r.accuracy for r in rows], marker="o")
    ax.set_xlabel("train fraction")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    return _save(fig, path)
