#!/usr/bin/env python3
"""
Run logging and progress tracking for long snake and training runs.

Every CLI subcommand and every `train` call reports through a RunLogger: console
plus per-run log file, emoji status lines, and a progress.json snapshot in the
run directory that external tools can poll.
"""

import json
import logging
import sys
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Dict, Optional, Union

PROGRESS_FILE = "progress.json"


@dataclass
class RunProgress:
    """Tracks progress of one run"""
    run_id: str
    run_type: str
    total_steps: int = 0
    completed_steps: int = 0
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None
    current_stage: str = ""
    status: str = "pending"  # pending, running, completed, failed
    error_message: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def progress_percentage(self) -> float:
        if self.total_steps == 0:
            return 0.0
        return (self.completed_steps / self.total_steps) * 100

    @property
    def elapsed_time(self) -> Optional[timedelta]:
        if not self.start_time:
            return None
        end_time = self.end_time or datetime.now()
        return end_time - self.start_time

    @property
    def estimated_remaining_time(self) -> Optional[timedelta]:
        """Linear extrapolation from the steps completed so far"""
        elapsed = self.elapsed_time
        if not elapsed or self.completed_steps == 0:
            return None
        rate = self.completed_steps / max(elapsed.total_seconds(), 1e-9)
        remaining = max(self.total_steps - self.completed_steps, 0)
        return timedelta(seconds=remaining / rate) if rate > 0 else None

    def snapshot(self) -> Dict[str, Any]:
        return {
            'run_id': self.run_id,
            'run_type': self.run_type,
            'total_steps': self.total_steps,
            'completed_steps': self.completed_steps,
            'progress_percentage': self.progress_percentage,
            'current_stage': self.current_stage,
            'status': self.status,
            'start_time': self.start_time.isoformat() if self.start_time else None,
            'elapsed_time': str(self.elapsed_time) if self.elapsed_time else None,
            'estimated_remaining_time': (
                str(self.estimated_remaining_time) if self.estimated_remaining_time else None
            ),
            'error_message': self.error_message,
            'metadata': self.metadata,
        }


class RunLogger:
    """Logger for snake-refine runs with progress tracking"""

    def __init__(self, run_type: str, run_id: Optional[str] = None,
                 run_dir: Optional[Union[str, Path]] = None, console: bool = True,
                 log_every: int = 10):
        self.run_type = run_type
        self.run_id = run_id or f"{run_type}_{int(time.time())}"
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.log_every = max(1, int(log_every))
        self.logger = logging.getLogger(f"snake_refine.run.{run_type}.{self.run_id}")
        self.progress = RunProgress(run_id=self.run_id, run_type=run_type)
        self._lock = threading.Lock()
        self._handlers = []
        self._setup_logging(console)

    def _setup_logging(self, console: bool):
        logs_dir = self.run_dir if self.run_dir is not None else Path("logs")
        logs_dir.mkdir(parents=True, exist_ok=True)

        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        file_handler = logging.FileHandler(logs_dir / f"{self.run_type}_{self.run_id}.log",
                                           encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        self._handlers.append(file_handler)

        if console:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(logging.INFO)
            console_handler.setFormatter(formatter)
            self._handlers.append(console_handler)

        for handler in self._handlers:
            self.logger.addHandler(handler)
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False

    def close(self):
        """Detach and close this run's handlers"""
        for handler in self._handlers:
            self.logger.removeHandler(handler)
            handler.close()
        self._handlers = []

    def start_run(self, total_steps: int = 0, metadata: Optional[Dict[str, Any]] = None):
        with self._lock:
            self.progress.start_time = datetime.now()
            self.progress.total_steps = total_steps
            self.progress.status = "running"
            if metadata:
                self.progress.metadata.update(metadata)

            self.logger.info(f"🚀 Starting {self.run_type} run {self.run_id}")
            self.logger.info(f"📊 Total steps: {total_steps}")
            if metadata:
                self.logger.info(f"📋 Parameters: {json.dumps(metadata, indent=2, default=str)}")
            self._write_snapshot()

    def update_progress(self, completed: int, stage: str = "",
                        metadata: Optional[Dict[str, Any]] = None):
        with self._lock:
            self.progress.completed_steps = completed
            if stage:
                self.progress.current_stage = stage
            if metadata:
                self.progress.metadata.update(metadata)

            if completed % self.log_every == 0 or completed == self.progress.total_steps:
                self.logger.info(
                    f"📈 Progress: {completed}/{self.progress.total_steps} "
                    f"({self.progress.progress_percentage:.1f}%)"
                    + (f" - {stage}" if stage else "")
                )
                remaining = self.progress.estimated_remaining_time
                if remaining:
                    self.logger.info(f"⏳ Estimated remaining: {remaining}")
            self._write_snapshot()

    def log_step(self, step: int, values: Dict[str, float]):
        """One training/snake step at DEBUG, with the progress counter advanced"""
        summary = ", ".join(f"{k}={v:.4g}" for k, v in values.items())
        self.logger.debug(f"🔄 Step {step}: {summary}")
        self.update_progress(step + 1)

    def log_info(self, message: str, metadata: Optional[Dict[str, Any]] = None):
        self.logger.info(f"ℹ️  {message}")
        if metadata:
            self.logger.info(f"   Metadata: {json.dumps(metadata, indent=2, default=str)}")

    def log_warning(self, message: str, metadata: Optional[Dict[str, Any]] = None):
        self.logger.warning(f"⚠️  {message}")
        if metadata:
            self.logger.warning(f"   Metadata: {json.dumps(metadata, indent=2, default=str)}")

    def log_error(self, message: str, error: Optional[Exception] = None,
                  metadata: Optional[Dict[str, Any]] = None):
        self.logger.error(f"❌ {message}")
        if error:
            self.logger.error(f"   Error: {error}")
            self.logger.error(f"   Type: {type(error).__name__}")
        if metadata:
            self.logger.error(f"   Metadata: {json.dumps(metadata, indent=2, default=str)}")

    def complete_run(self, success: bool = True, error_message: str = ""):
        with self._lock:
            self.progress.end_time = datetime.now()
            self.progress.status = "completed" if success else "failed"
            self.progress.error_message = error_message

            if success:
                self.logger.info(f"🎉 Run {self.run_id} completed")
            else:
                self.logger.error(f"💥 Run {self.run_id} failed: {error_message}")
            elapsed = self.progress.elapsed_time
            if elapsed:
                self.logger.info(f"⏱️  Total time: {elapsed}")
            self._write_snapshot()

    def _write_snapshot(self):
        """Dump progress for external monitoring; no-op without a run directory"""
        if self.run_dir is None:
            return
        try:
            with open(self.run_dir / PROGRESS_FILE, "w", encoding="utf-8") as f:
                json.dump(self.progress.snapshot(), f, indent=2, default=str)
        except OSError as e:
            self.logger.warning(f"Failed to write progress snapshot: {e}")

    @contextmanager
    def run_context(self, total_steps: int = 0, metadata: Optional[Dict[str, Any]] = None):
        """Start the run, mark it completed on exit or failed on exception"""
        try:
            self.start_run(total_steps, metadata)
            yield self
            self.complete_run(success=True)
        except Exception as e:
            self.complete_run(success=False, error_message=str(e))
            raise


def read_progress(run_dir: Union[str, Path]) -> Optional[Dict[str, Any]]:
    """Latest progress snapshot of a run directory, if any"""
    path = Path(run_dir) / PROGRESS_FILE
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError):
        return None


def create_train_logger(mode: str, run_dir: Optional[Union[str, Path]] = None,
                        console: bool = True) -> RunLogger:
    return RunLogger(f"train_{mode}", run_dir=run_dir, console=console)


def create_adjust_logger(run_dir: Optional[Union[str, Path]] = None,
                         console: bool = True) -> RunLogger:
    return RunLogger("adjust", run_dir=run_dir, console=console)
