"""
Multiprocess multi-seed experiment sweep
---------------------------------------
Example:
    python sweep.py --seeds 1 2 3 --workers 3
    python sweep.py --seeds 1 2 3 --grid filter__threshold=0.5,0.9

Every (seed, grid point) runs experiment.run_once() in a worker process; rows
are appended to logs/experiment_results.csv as they arrive.
"""

import argparse
import csv
import json
from itertools import product
from multiprocessing import Process, Queue
from pathlib import Path

import pandas as pd

from config import RUNS_ROOT
from experiment import DESK_TRAIN_PER_CLASS
from logger_setup import get_logger
from utils.sweep_worker import worker

log = get_logger(__name__)

CSV_PATH = Path("logs/experiment_results.csv")
RESULT_FIELDS = [
    "seed", "worker", "model", "pool", "retained", "retention",
    "mean_conf_retained", "mean_conf_rejected", "fid_unfiltered", "fid_filtered",
    "baseline_accuracy", "retrained_accuracy", "accuracy_delta", "error",
]


# ------------------------------------------------------------------------
def parse_grid(specs):
    """``["a__b=1,2", "c__d=x"]`` → {"a__b": [1, 2], "c__d": ["x"]}."""
    grid = {}
    for spec in specs or []:
        key, values = spec.split("=", 1)
        parsed = []
        for v in values.split(","):
            try:
                parsed.append(json.loads(v))
            except json.JSONDecodeError:
                parsed.append(v)
        grid[key] = parsed
    return grid


def build_tasks(seeds, grid, base):
    keys = list(grid)
    for vals in product(*(grid[k] for k in keys)):
        point = dict(zip(keys, vals))
        tag = "_".join(f"{k}-{v}" for k, v in point.items()) or "default"
        for seed in seeds:
            cfg = {**base, **point, "seed": seed}
            cfg["_work_dir"] = str(Path(RUNS_ROOT) / "sweep" / tag / f"seed{seed}")
            yield cfg


def summarize(csv_path):
    df = pd.read_csv(csv_path)
    ok = df[df["error"].isna()] if "error" in df else df
    if ok.empty:
        log.warning("No successful runs to summarize")
        return df
    log.info("Mean accuracy delta over %d runs: %+.2f pp  (min %+.2f pp)",
             len(ok), 100 * ok["accuracy_delta"].mean(), 100 * ok["accuracy_delta"].min())
    log.info("Mean retention %.1f%%  FID unfiltered %.3f → filtered %.3f",
             100 * ok["retention"].mean(), ok["fid_unfiltered"].mean(), ok["fid_filtered"].mean())
    return df


def main(seeds, n_workers, grid=None, train_per_class=DESK_TRAIN_PER_CLASS, csv_path=CSV_PATH):
    tasks = list(build_tasks(seeds, grid or {}, {"data__train_per_class": train_per_class}))
    task_q, result_q = Queue(), Queue()
    n_workers = max(1, min(n_workers, len(tasks)))

    for cfg in tasks:
        task_q.put(cfg)
    for _ in range(n_workers):
        task_q.put(None)     # one poison pill per worker

    procs = []
    for wid in range(n_workers):
        p = Process(target=worker, args=(wid, task_q, result_q), daemon=True)
        p.start()
        procs.append(p)

    # incremental CSV write
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    fields = RESULT_FIELDS + list(grid or {})
    total_tasks = len(tasks)
    finished = 0
    with csv_path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore", restval="")
        writer.writeheader()
        while finished < total_tasks:
            res = result_q.get()
            writer.writerow(res); f.flush()
            finished += 1
            if finished % 10 == 0 or finished == total_tasks:
                log.info("%d / %d done (%0.1f%%)",
                         finished, total_tasks,
                         100*finished/total_tasks)

    for p in procs:
        p.join()
    log.info("Results ➜ %s", csv_path)
    return summarize(csv_path)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--workers", type=int, default=3,
                    help="Max parallel experiments")
    ap.add_argument("--grid", nargs="*", default=[],
                    help="section__key=v1,v2 … swept in addition to the seeds")
    ap.add_argument("--train-per-class", type=int, default=DESK_TRAIN_PER_CLASS)
    args = ap.parse_args()
    main(args.seeds, args.workers, parse_grid(args.grid), args.train_per_class)
