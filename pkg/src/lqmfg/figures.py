"""Report figures: deterministic PNG rendering of solver and population output.

Rendering is headless (Agg backend) and timestamp-free (the PNG metadata
``Date`` field is suppressed), so repeated runs with identical inputs produce
byte-identical image files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

__all__ = ["save_lines", "save_loglog"]

#: Keyword arguments applied to every savefig call; ``Date: None`` strips the
#: embedded creation timestamp so output bytes depend only on the data.
_SAVEFIG = {"dpi": 120, "metadata": {"Date": None}}


def _finish(fig, ax, path, xlabel: str, ylabel: str, title: str,
            show_legend: bool) -> None:
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if show_legend:
        ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def save_lines(path, t, series, *, xlabel: str = "t", ylabel: str = "",
               title: str = "", styles=None) -> None:
    """Render labelled curves over a common abscissa to a PNG file.

    ``series`` is an ordered sequence of ``(label, values)`` pairs (order
    fixes colors and legend order, keeping output deterministic). ``styles``
    optionally gives one matplotlib kwargs dict per curve.
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    has_label = False
    for idx, (label, values) in enumerate(series):
        kwargs = {"linewidth": 1.2}
        if styles is not None and idx < len(styles):
            kwargs.update(styles[idx])
        if label:
            kwargs["label"] = label
            has_label = True
        ax.plot(t, np.asarray(values, dtype=float).reshape(-1), **kwargs)
    _finish(fig, ax, path, xlabel, ylabel, title, has_label)


def save_loglog(path, x, series, *, xlabel: str = "N", ylabel: str = "",
                title: str = "", reference_slope: float | None = None) -> None:
    """Render positive decay curves on log-log axes, with an optional
    reference power law anchored at the first curve's first point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    has_label = False
    first_anchor = None
    for label, values in series:
        values = np.asarray(values, dtype=float).reshape(-1)
        kwargs = {"linewidth": 1.2, "marker": "o", "markersize": 3.0}
        if label:
            kwargs["label"] = label
            has_label = True
        ax.loglog(x, values, **kwargs)
        if first_anchor is None and values.size and values[0] > 0:
            first_anchor = values[0]
    if reference_slope is not None and first_anchor is not None:
        ref = first_anchor * (x / x[0]) ** reference_slope
        ax.loglog(x, ref, linestyle="--", linewidth=1.0, color="gray",
                  label=f"slope {reference_slope:g}")
        has_label = True
    _finish(fig, ax, path, xlabel, ylabel, title, has_label)
