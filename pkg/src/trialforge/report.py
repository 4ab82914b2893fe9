"""Figure rendering for the report path (written alongside the CSV output)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .predict import MarginalPrediction  # noqa: E402


def render_marginal_figure(pred: MarginalPrediction, path) -> None:
    """Two panels: per-arm curves, and the difference with its 95% band."""
    label = "Cumulative incidence" if pred.kind == "cum_inc" else "Survival"
    fig, (ax_arms, ax_diff) = plt.subplots(1, 2, figsize=(12, 5))

    ax_arms.plot(pred.times, pred.arm0, color="black", label="Untreated")
    ax_arms.plot(pred.times, pred.arm1, color="tab:red", label="Treated")
    if pred.has_conf_int:
        ax_arms.fill_between(pred.times, pred.arm0_lo, pred.arm0_hi, color="black", alpha=0.15)
        ax_arms.fill_between(pred.times, pred.arm1_lo, pred.arm1_hi, color="tab:red", alpha=0.15)
    ax_arms.set_xlabel("Follow-up visit")
    ax_arms.set_ylabel(label)
    ax_arms.legend(frameon=False)

    if pred.has_conf_int:
        ax_diff.fill_between(pred.times, pred.diff_lo, pred.diff_hi, color="0.8", label="95% CI")
    ax_diff.plot(pred.times, pred.difference, color="black")
    ax_diff.axhline(0.0, color="0.5", linewidth=0.8, linestyle="--")
    ax_diff.set_xlabel("Follow-up visit")
    ax_diff.set_ylabel(f"Difference of {label.lower()}s")

    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
