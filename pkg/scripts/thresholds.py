"""
Script to compute the Monte-Carlo log-gamma threshold for rejecting rank uniformity
"""
from pathlib import Path
import argparse
import sys
ROOT_DIR = Path(__file__).parent.parent.as_posix()
sys.path.append(ROOT_DIR)

import numpy as np

from src.calibstats import gamma_threshold
from src.constants import stats_defaults

def parse_args():
    parser = argparse.ArgumentParser()
    parser.add_argument('--J', type=int, required=True, help='Number of ranks per uniformity test')
    parser.add_argument('--level', type=float, default=stats_defaults['level'])
    parser.add_argument('--n-sims', type=int, default=stats_defaults['n_sims'])
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()
    return args

def main():
    args = parse_args()
    threshold = gamma_threshold(args.J, args.level, args.n_sims, np.random.default_rng(args.seed))
    print(f'J={args.J} level={args.level} n_sims={args.n_sims}: log gamma threshold {threshold:.4f} '
          f'(gamma {np.exp(threshold):.4g})')

if __name__ == '__main__':
    main()
