"""PNG figures for a run report."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.0),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 7,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_scores(metrics: dict, path: Path) -> Path:
    traj = metrics["score_trajectory"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        nodes = sorted({n for s in traj for n in s["scores"]})
        ticks = [s["tick"] for s in traj]
        for nid in nodes:
            ys = [s["scores"].get(nid) for s in traj]
            ax.plot(ticks, [float("nan") if y is None else y for y in ys], drawstyle="steps-post", lw=1, label=nid)
        ax.set_xlabel("tick")
        ax.set_ylabel("gravity score")
        ax.set_ylim(-2, 102)
        if len(nodes) <= 16:
            ax.legend(ncol=2, loc="lower right")
        return _save(fig, path)


def plot_rounds(metrics: dict, path: Path) -> Path:
    by_neb = metrics["rounds_by_nebula"]
    names = sorted(by_neb)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bottom = [0] * len(names)
        for status, color in (("delivered", "tab:green"), ("failed", "tab:red"), ("incomplete", "tab:gray")):
            vals = [by_neb[n][status] for n in names]
            ax.bar(names, vals, bottom=bottom, color=color, label=status)
            bottom = [b + v for b, v in zip(bottom, vals)]
        ax.set_ylabel("rounds")
        ax.legend()
        return _save(fig, path)


def plot_payouts(metrics: dict, path: Path) -> Path:
    rows = metrics["payouts"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"{r['nebula']}/{r['node']}" for r in rows]
        ax.bar(range(len(rows)), [r["total"] for r in rows], color="tab:blue")
        ax.set_xticks(range(len(rows)), labels, rotation=60, ha="right")
        ax.set_ylabel("tokens paid")
        return _save(fig, path)


def render_figures(metrics: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        plot_scores(metrics, out / "scores.png"),
        plot_rounds(metrics, out / "rounds.png"),
        plot_payouts(metrics, out / "payouts.png"),
    ]
