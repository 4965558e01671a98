"""Train once per loss-factor subset and print the mAP table.

Uses fewer scenes and epochs than the toy profile so the eight runs
finish in about a minute.

    python3 demos/factor_ablation.py [out.csv]
"""

import sys

from topdown_hoi.data import generate_dataset
from topdown_hoi.train import RunConfig, run_ablation, write_ablation_csv


def main(out=None):
    cfg = RunConfig.toy(n_train=60, n_test=40, epochs=6)
    ds = generate_dataset(cfg.data_config())
    rows = run_ablation(ds, ds.split, cfg)
    print(" beta delta zeta  focal |  unseen    seen    full")
    for r in rows:
        print(f"{r['beta']:5d}{r['delta']:6d}{r['zeta']:5d}{r['omega_one']:7d} |"
              f"{r['unseen']:8.4f}{r['seen']:8.4f}{r['full']:8.4f}")
    if out:
        write_ablation_csv(rows, out)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
