"""Metrics summary of a finished run, rendered as delimited text or JSON."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union


def load_report(run_dir: Union[str, Path]) -> dict:
    path = Path(run_dir) / "report.json"
    return json.loads(path.read_text())


def report_metrics(report: dict) -> dict:
    """Delivery rate, score samples, payout table, fraud counts and conservation."""
    m = report["metrics"]
    payouts: dict[tuple[str, str], int] = {}
    for d in report["distributions"]:
        for nid, amount in d["payouts"].items():
            key = (d["nebula"], nid)
            payouts[key] = payouts.get(key, 0) + amount
    per_nebula: dict[str, dict[str, int]] = {}
    for r in report["rounds"]:
        counts = per_nebula.setdefault(r["nebula"], {"delivered": 0, "failed": 0, "incomplete": 0})
        counts[r["status"]] += 1
    return {
        "delivery_success_rate": m["delivery_success_rate"],
        "rounds": {"delivered": m["rounds_delivered"], "failed": m["rounds_failed"], "incomplete": m["rounds_incomplete"]},
        "rounds_by_nebula": per_nebula,
        "score_trajectory": report["score_trajectory"],
        "final_scores": report["final_scores"],
        "payouts": [
            {"nebula": neb, "node": nid, "total": amount} for (neb, nid), amount in sorted(payouts.items())
        ],
        "fraud_events": m["fraud_events"],
        "excluded_reveals": m["excluded_reveals"],
        "conservation": {ch: c["ok"] for ch, c in report["conservation"].items()},
        "ledger_head": report["ledger"]["head_digest"],
    }


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def render_text(metrics: dict) -> str:
    """Tab-delimited sections, each introduced by a ``# name`` line."""
    out = ["# summary"]
    out.append(f"delivery_success_rate\t{_fmt(metrics['delivery_success_rate'])}")
    for k, v in metrics["rounds"].items():
        out.append(f"rounds_{k}\t{v}")
    out.append(f"fraud_events\t{metrics['fraud_events']}")
    out.append(f"excluded_reveals\t{metrics['excluded_reveals']}")
    out.append(f"ledger_head\t{metrics['ledger_head']}")

    out.append("# rounds_by_nebula")
    out.append("nebula\tdelivered\tfailed\tincomplete")
    for neb, c in sorted(metrics["rounds_by_nebula"].items()):
        out.append(f"{neb}\t{c['delivered']}\t{c['failed']}\t{c['incomplete']}")

    out.append("# conservation")
    out.append("chain\tok")
    for ch, ok in sorted(metrics["conservation"].items()):
        out.append(f"{ch}\t{'pass' if ok else 'FAIL'}")

    out.append("# final_scores")
    out.append("node\tscore")
    for nid, s in sorted(metrics["final_scores"].items()):
        out.append(f"{nid}\t{_fmt(float(s))}")

    out.append("# payouts")
    out.append("nebula\tnode\ttotal")
    for p in metrics["payouts"]:
        out.append(f"{p['nebula']}\t{p['node']}\t{p['total']}")

    out.append("# score_trajectory")
    nodes = sorted({n for s in metrics["score_trajectory"] for n in s["scores"]})
    out.append("\t".join(["tick", *nodes]))
    for s in metrics["score_trajectory"]:
        out.append("\t".join([str(s["tick"]), *(_fmt(s["scores"].get(n)) for n in nodes)]))
    return "\n".join(out) + "\n"


def render(metrics: dict, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(metrics, sort_keys=True, indent=2) + "\n"
    if fmt == "text":
        return render_text(metrics)
    raise ValueError(f"unknown format {fmt!r}")
