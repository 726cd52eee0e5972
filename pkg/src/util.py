from typing import Any, Dict, Iterable, Optional
import hashlib
import json
import multiprocessing as mp
import os
import zlib

from tqdm import tqdm
import numpy as np
import pandas as pd
import yaml

from . import logger

###############################################################################
# I/O
###############################################################################
def load_yaml(path: str) -> Dict[str, Any]:
    with open(path) as file:
        return yaml.safe_load(file)

def save_json(obj: Dict[str, Any], path: str) -> None:
    make_dir(os.path.dirname(path))
    with open(path, 'w') as file:
        json.dump(obj, file, indent=2, sort_keys=True, default=_to_builtin)

def load_json(path: str) -> Dict[str, Any]:
    with open(path) as file:
        return json.load(file)

def save_frame(df: pd.DataFrame, path: str) -> None:
    make_dir(os.path.dirname(path))
    df.to_csv(path, index=False, float_format='%.17g')

def make_dir(path: str) -> None:
    if path and not os.path.exists(path): os.makedirs(path)

def _to_builtin(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f'Object of type {type(obj).__name__} is not JSON serializable')

###############################################################################
# Hashing
###############################################################################
def config_hash(cfg: Dict[str, Any]) -> str:
    """Hash of a config that ignores key order"""
    text = json.dumps(cfg, sort_keys=True, separators=(',', ':'), default=_to_builtin)
    return hashlib.sha256(text.encode()).hexdigest()

###############################################################################
# Random streams
###############################################################################
def child_seed(root_seed: int, *keys) -> np.random.SeedSequence:
    """Derive an independent seed sequence from the root seed and a path of keys

    String keys are mapped to stable integers, so e.g. child_seed(1, 'sbc', t, j) is the same in every process.
    """
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        entropy.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return np.random.SeedSequence(entropy)

def child_rng(root_seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(child_seed(root_seed, *keys))

def seed_to_int(seed: np.random.SeedSequence) -> int:
    """64-bit integer tag of a seed sequence, recorded next to results"""
    return int(seed.generate_state(1, dtype=np.uint64)[0])

###############################################################################
# Multiprocessing
###############################################################################
def parallelize(tasks: Iterable, worker, processes: Optional[int] = None, desc: Optional[str] = None):
    """Map worker over tasks, keeping the task order in the result

    Args:
        processes: Number of worker processes. None uses every available core, 1 runs serially in this process
    """
    tasks = list(tasks)
    if processes is None:
        processes = os.cpu_count() or 1
    processes = min(processes, max(len(tasks), 1))
    if processes == 1:
        return [worker(task) for task in tqdm(tasks, desc=desc, disable=len(tasks) < 2)]

    pool = mp.Pool(processes=processes)
    result = pool.map(worker, tasks)
    pool.close()
    pool.join() # wait for all workers
    return result

###############################################################################
# Reporting
###############################################################################
def report_flagged(mask: np.ndarray, what: str, context: str = '.') -> None:
    """Report how many items were flagged"""
    mask = np.asarray(mask, dtype=bool)
    if mask.any():
        logger.info(f'Flagged {mask.sum()} of {mask.size} {what}{context}')
