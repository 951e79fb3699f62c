"""Print the reference cost breakdown and the five-variant comparison.

    python demos/cost_table.py [--resolution 128]
"""

import argparse

from pixfold.config import BLOCK_VARIANTS, reference_config
from pixfold.costmodel import compare_variants, cost_report, reference_breakdown, render_variants, variant_configs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resolution", type=int, default=None)
    args = ap.parse_args()
    cfg = reference_config()
    print(reference_breakdown(cost_report(cfg, args.resolution)))
    print()
    print(render_variants(compare_variants(variant_configs(cfg, BLOCK_VARIANTS), resolution=args.resolution)))


if __name__ == "__main__":
    main()
