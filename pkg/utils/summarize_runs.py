"""
Run Aggregation Script
Collects eval_report.json / separability.json / defenses.json from every run
directory under a root and writes one summary CSV.

    python utils/summarize_runs.py runs/ runs/summary.csv
"""
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd


def _read_json(path: Path) -> Optional[Dict]:
    return json.loads(path.read_text()) if path.is_file() else None


def summarize_run(run_dir: Path) -> Optional[Dict]:
    """
    One summary row for a finished run, or None when the run has no evaluation.
    """
    report = _read_json(run_dir / "eval_report.json")
    if report is None:
        return None
    manifest = _read_json(run_dir / "manifest.json") or {}
    separability = _read_json(run_dir / "separability.json") or {}
    defenses = _read_json(run_dir / "defenses.json") or {}
    config = report.get("config", {})

    tsi = separability.get("tsi") or []
    row = {
        "run": str(run_dir),
        "status": manifest.get("status", "unknown"),
        "seed": report.get("seed"),
        "trigger_method": config.get("trigger_method"),
        "graph_t": config.get("graph_t"),
        "latent_dim": config.get("latent_dim"),
        "psnr_threshold": config.get("psnr_threshold"),
        "poison_per_class": config.get("poison_per_class"),
        "beta": config.get("beta"),
        "benign_accuracy": report["benign_accuracy"],
        "clean_ba": report.get("clean_ba"),
        "mean_asr": report["mean_asr"],
        "mean_psnr": report["mean_psnr"],
        "min_psnr": report["min_psnr"],
        "mean_ssim": report["mean_ssim"],
        "mean_tsi": sum(tsi) / len(tsi) if tsi else None,
        "spearman": separability.get("spearman"),
    }
    for name in ("fine_tune", "fine_prune"):
        if name in defenses:
            row[f"{name}_delta_asr"] = defenses[name]["delta_asr"]
            row[f"{name}_delta_ba"] = defenses[name]["delta_ba"]
    if "strip" in defenses:
        row["strip_auroc"] = defenses["strip"]["auroc"]
    if "strip_patch" in defenses:
        row["strip_patch_auroc"] = defenses["strip_patch"]["auroc"]
    return row


def summarize_runs(root: Path) -> pd.DataFrame:
    """Every directory below `root` holding a manifest.json, sorted by path."""
    rows: List[Dict] = []
    for manifest in sorted(Path(root).rglob("manifest.json")):
        row = summarize_run(manifest.parent)
        if row is not None:
            rows.append(row)
    return pd.DataFrame(rows)


def main(argv: List[str]) -> int:
    if len(argv) not in (1, 2):
        print("usage: summarize_runs.py RUNS_ROOT [OUTPUT_CSV]")
        return 2
    root = Path(argv[0])
    output = Path(argv[1]) if len(argv) == 2 else root / "summary.csv"

    print(f"📂 Scanning: {root}")
    frame = summarize_runs(root)
    if frame.empty:
        print("   No finished runs found")
        return 1
    output.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(output, index=False)
    print(f"   {len(frame)} runs -> {output}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
