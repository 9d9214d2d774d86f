import logging
import time
from abc import ABC

import numpy as np

from pfo_fdir.learning.loggers import Logger


class BaseCallback(ABC):
    def on_fit_start(self, optimizer, config):
        pass

    def on_fit_end(self, history):
        pass

    def on_step_end(self, step, parts):
        pass

    def on_checkpoint_save(self, checkpoint):
        pass

    def on_checkpoint_load(self, checkpoint):
        pass


class BestLossCallback(BaseCallback):
    """Tracks the lowest total loss seen at logging intervals."""

    def __init__(self, logger: Logger, key="total", interval=100):
        self.logger = logger
        self.key = key
        self.interval = interval
        self.best = float("inf")
        self.best_step = None

    def on_step_end(self, step, parts):
        if (step + 1) % self.interval == 0 and parts[self.key] < self.best:
            self.best, self.best_step = parts[self.key], step

    def on_checkpoint_save(self, checkpoint):
        checkpoint["best_loss"] = {"value": self.best, "step": self.best_step}

    def on_fit_end(self, history):
        if self.best != float("inf"):
            self.logger.log_metrics({f"best {self.key}": self.best}, self.best_step)


class PerformanceCallback(BaseCallback):
    def __init__(self, logger: Logger, batch_size: int, warmup_steps: int = 10):
        self.logger = logger
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.timestamps = []

    def on_step_end(self, step, parts):
        if step >= self.warmup_steps:
            self.timestamps.append(time.perf_counter() * 1000.0)

    def process_performance_stats(self):
        deltas = np.diff(np.asarray(self.timestamps))
        return {
            "throughput_train": (self.batch_size / deltas).mean(),
            "latency_train_mean": deltas.mean(),
            "latency_train_90": np.percentile(deltas, 90),
        }

    def on_fit_end(self, history):
        if len(self.timestamps) > 2:
            stats = self.process_performance_stats()
            for k, v in stats.items():
                logging.info(f"performance {k}: {v}")
            self.logger.log_metrics(stats)
        self.timestamps = []
