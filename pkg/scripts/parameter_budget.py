"""Parameter counts per block for every sharing mode at full scale, plus the baseline ratio."""
import argparse
import csv
import sys

from tess.model import Sharing, baseline_config, count_parameters, tess_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args(argv)

    configs = {f"tess-{s.value}": tess_config(sharing=s) for s in Sharing}
    configs["baseline"] = baseline_config()
    base_total = count_parameters(configs["baseline"]).total
    blocks = list(count_parameters(configs["baseline"]).by_block)
    rows = []
    for name, cfg in configs.items():
        r = count_parameters(cfg)
        rows.append([name, *[r.by_block[b] for b in blocks], r.total, r.logical,
                     f"{r.total / base_total:.4f}"])

    header = ["config", *blocks, "total", "logical", "ratio_vs_baseline"]
    w = csv.writer(open(args.out, "w", newline="") if args.out else sys.stdout,
                   lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


if __name__ == "__main__":
    main()
