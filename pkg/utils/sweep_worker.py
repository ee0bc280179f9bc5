"""
A single worker process: pulls experiment configs from a multiprocessing
Queue and runs experiment.run_once() for each until it sees the poison pill.
"""
import queue
from multiprocessing import Queue

from experiment import run_once
from logger_setup import get_logger

log = get_logger(__name__)


def worker(worker_id: int, task_q: Queue, result_q: Queue) -> None:
    log.info("Worker %d started", worker_id)
    while True:
        try:
            cfg = task_q.get(timeout=5)
        except queue.Empty:
            continue
        if cfg is None:        # poison pill → shut down
            break
        cfg = dict(cfg)
        seed = cfg.pop("seed")
        work_dir = cfg.pop("_work_dir", None)
        try:
            res = run_once(seed, work_dir, **cfg)
            result_q.put({"worker": worker_id, **cfg, **res})
        except Exception as e:   # failed seed still yields a row
            log.error("Fail seed %s : %s: %s", seed, type(e).__name__, e)
            result_q.put({"worker": worker_id, **cfg, "seed": seed, "error": f"{type(e).__name__}: {e}"})
