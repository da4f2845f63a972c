"""Run artifacts: delimited tables and matplotlib figures.

Every report path emits both a machine-readable delimited file and a rendered
figure next to it, so runs can be inspected without re-loading any binaries.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def format_table(header, rows) -> str:
    """Fixed-width table with a tab-delimited body, for stdout."""
    out = ["\t".join(str(h) for h in header)]
    for row in rows:
        out.append("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    return "\n".join(out)


def save_loss_curve(path, losses, lrs=None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(losses) + 1), losses, marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    if lrs is not None:
        ax2 = ax.twinx()
        ax2.plot(range(1, len(lrs) + 1), lrs, color="tab:orange", alpha=0.6, label="lr")
        ax2.set_ylabel("learning rate")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_miou_bars(path, groups: dict[str, float]) -> None:
    names = list(groups)
    vals = [groups[n] for n in names]
    fig, ax = plt.subplots(figsize=(1.2 * max(4, len(names)), 4))
    ax.bar(names, vals, color="tab:blue")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0.0, 1.0)
    for i, v in enumerate(vals):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
