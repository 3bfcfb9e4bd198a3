"""Pilot runs behind the synthetic acceptance thresholds.

For seeds 0, 1, 2 this trains two models on the 2000-document / 50-label
planted-keyword corpus:

* the default toy model, scored by test P@k of the global, local and
  combined heads plus the global-local JSD;
* the keyword probe (local head on the token embeddings), scored by how
  strongly its attention picks out planted trigger tokens.

Results go to pilot_results.csv next to this script.

Run:  python demos/pilot_acceptance.py   (about 15 minutes on one core)
"""

import csv
import sys
import time
from pathlib import Path

import numpy as np

from glocalxml.experiments import SYNTHETIC_EPOCHS, run_keyword_probe, run_synthetic, synthetic_data

seeds = [int(s) for s in sys.argv[1:]] or [0, 1, 2]
data = synthetic_data()
print(f"train {len(data.train)} / test {len(data.test)} docs, vocab {len(data.vocab)}")

rows = []
for seed in seeds:
    for setup, runner in (("default", run_synthetic), ("keyword_probe", run_keyword_probe)):
        t0 = time.perf_counter()
        run = runner(data, seed)
        p = run.report.precision
        r = run.attention_ratios
        row = {
            "setup": setup,
            "seed": seed,
            "epochs": SYNTHETIC_EPOCHS,
            **{f"{src}_p@{k}": round(p[src][k], 6) for src in p for k in p[src]},
            "jsd": round(run.report.jsd, 6),
            "attn_cases": r.size,
            "attn_frac_above_uniform": round(float(np.mean(r > 1)), 4),
            "attn_frac_ratio_ge_5": round(float(np.mean(r >= 5)), 4),
            "attn_median_ratio": round(float(np.median(r)), 4),
            "seconds": round(time.perf_counter() - t0, 1),
        }
        rows.append(row)
        print(row, flush=True)

default = [r for r in rows if r["setup"] == "default"]
mean = {src: np.mean([r[f"{src}_p@1"] for r in default]) for src in ("global", "local", "final")}
print("default mean P@1:", {k: round(float(v), 4) for k, v in mean.items()})
print("combined >= max - 0.005:", mean["final"] >= max(mean["global"], mean["local"]) - 0.005)
print("combined > min head:", mean["final"] > min(mean["global"], mean["local"]))
for setup in ("default", "keyword_probe"):
    sel = [r for r in rows if r["setup"] == setup]
    cases = sum(r["attn_cases"] for r in sel)
    ge5 = sum(r["attn_frac_ratio_ge_5"] * r["attn_cases"] for r in sel) / cases
    print(f"{setup}: pooled fraction of trigger cases with ratio >= 5: {ge5:.3f}")

out = Path(__file__).with_name("pilot_results.csv")
with open(out, "w", newline="") as fh:
    writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
print("wrote", out)
