"""
Implicit priors for stable simulation-based calibration
"""
from pathlib import Path
import logging
import os

ROOT_DIR = Path(__file__).parent.parent.as_posix()
# results land here unless a config gives an absolute output directory
OUTPUT_ROOT = os.environ.get('SBC_OUTPUT_ROOT', f'{ROOT_DIR}/results')

logging.basicConfig(
    level=os.environ.get('SBC_LOG_LEVEL', 'INFO'),
    format='%(asctime)s %(levelname)s:%(message)s',
    datefmt='%I:%M:%S'
)
logger = logging.getLogger(__name__)
