"""Collect report.json files under a run directory into one table."""
import json
import sys
from pathlib import Path


def main(root: str) -> None:
    rows = []
    for rep in sorted(Path(root).rglob("report.json")):
        d = json.loads(rep.read_text())
        rows.append((str(rep.parent.relative_to(root)), d.get("label", ""), d["rmse"], d["n_episodes"]))
    if not rows:
        sys.exit(f"no report.json under {root}")
    w = max(len(r[0]) for r in rows)
    print(f"{'run':<{w}}  {'rmse [m]':>9}  {'episodes':>8}  label")
    for name, label, rmse, n in rows:
        print(f"{name:<{w}}  {rmse:9.3f}  {n:8d}  {label}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs")
