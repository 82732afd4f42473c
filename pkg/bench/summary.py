import csv
import sys
from collections import defaultdict
from statistics import harmonic_mean

BASELINE = "autoregressive"


def summary():
    reader = csv.DictReader(sys.stdin)
    by_env = defaultdict(dict)
    for row in reader:
        by_env[row["environment"]][row["technique"]] = row

    # Show each environment's throughput, relative to plain autoregressive
    # decoding when that was measured.
    speedups = defaultdict(list)
    for env, rows in by_env.items():
        mbps = next(iter(rows.values()))["mbps"]
        print(f"{env} ({mbps} Mbps)")
        base = rows.get(BASELINE)
        best = max(rows.values(), key=lambda r: float(r["throughput"]))
        for technique, row in rows.items():
            tput = float(row["throughput"])
            mark = " *" if row is best else ""
            if row["lossless"] != "True":
                mark += " (NOT LOSSLESS)"
            if base is not None:
                ratio = tput / float(base["throughput"])
                speedups[technique].append(ratio)
                print(f"  {technique}: {tput:.1f} tok/s", end="")
                print(f" ({ratio:.2f}× {BASELINE})", end="")
            else:
                print(f"  {technique}: {tput:.1f} tok/s", end="")
            print(mark)

    if not speedups:
        return

    # Show the average across environments.
    print("harmonic mean")
    for technique, ratios in speedups.items():
        hmean = harmonic_mean(ratios)
        print(f"  {technique}: {hmean:.2f}× {BASELINE}")


if __name__ == "__main__":
    summary()
