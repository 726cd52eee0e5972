"""
Script to run an SBC experiment grid from a YAML config

Exit status: 0 ok, 1 config error, 2 runtime failure (details in error.json in the output directory)
"""
from pathlib import Path
import argparse
import sys
ROOT_DIR = Path(__file__).parent.parent.as_posix()
sys.path.append(ROOT_DIR)

from src.experiment import run_experiment

def parse_args():
    parser = argparse.ArgumentParser()
    parser.add_argument('config', type=str, nargs='?', default=f'{ROOT_DIR}/config.yaml')
    parser.add_argument('--jobs', type=int, default=None, help='Worker processes (default: all available cores)')
    parser.add_argument('--resume', action='store_true', help='Skip grid cells finished in a previous run')
    args = parser.parse_args()
    return args

def main():
    args = parse_args()
    sys.exit(run_experiment(args.config, jobs=args.jobs, resume=args.resume))

if __name__ == '__main__':
    main()
