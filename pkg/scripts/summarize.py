"""
Script to aggregate the log-gamma scores of every grid cell in a results directory
"""
from pathlib import Path
import argparse
import sys
ROOT_DIR = Path(__file__).parent.parent.as_posix()
sys.path.append(ROOT_DIR)

from src.experiment import summarize

def parse_args():
    parser = argparse.ArgumentParser()
    parser.add_argument('results_dir', type=str)
    args = parser.parse_args()
    return args

def main():
    args = parse_args()
    summary = summarize(args.results_dir)
    if summary.empty:
        sys.exit(f'No cell results found under {args.results_dir}')
    print(summary.to_string(index=False))

if __name__ == '__main__':
    main()
