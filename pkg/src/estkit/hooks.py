"""Training-loop injection points and the builtin hooks.

The loop calls, in order: begin (all hooks, before anything runs),
after_session_start, then per iteration before_run -> one execution of the
training fetches plus every hook's extra fetches -> after_run. Extra fetches
ride along in the same execution as the train op, so observing hooks can
never trigger a second forward pass or perturb the model. end runs on every
hook even when the loop aborts.
"""
from __future__ import annotations

import csv
import time
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

SCALAR_LOG_FILE = "scalar_logs.csv"
SCALAR_LOG_HEADER = ("wall_time", "step", "name", "value")


class Hook:
    """All callbacks optional; subclass and override what you need."""

    def begin(self) -> None:
        pass

    def after_session_start(self, run_context: "RunContext") -> None:
        pass

    def before_run(self, run_context: "RunContext") -> Optional[Sequence]:
        """Return extra tensors to fetch alongside the training fetches."""
        return None

    def after_run(self, run_context: "RunContext", results: list) -> None:
        """results holds the values of this hook's before_run request."""

    def end(self, run_context: "RunContext") -> None:
        pass


class RunContext:
    """What hooks may see and do: read step/loss, request a stop, save."""

    def __init__(self, graph, model_dir=None, save_fn: Callable = None):
        self.graph = graph
        self.model_dir = Path(model_dir) if model_dir is not None else None
        self._save_fn = save_fn
        self.last_loss: Optional[float] = None
        self.failed = False
        self._stop = False

    @property
    def global_step(self) -> int:
        return self.graph.global_step

    def request_stop(self) -> None:
        self._stop = True

    @property
    def stop_requested(self) -> bool:
        return self._stop

    def save_checkpoint(self) -> None:
        if self._save_fn is not None:
            self._save_fn()


def run_loop_with_hooks(run_context: RunContext, hooks: Iterable[Hook],
                        batches: Iterator, step_fn: Callable) -> None:
    """Drive step_fn(batch, extra_fetches) -> (loss, extra_results) under hooks.

    The loop exits when the batch iterator is exhausted or a hook has
    requested a stop; a raising hook or step aborts the loop, but end() still
    runs on every hook first.
    """
    all_hooks = list(hooks)
    for hook in all_hooks:
        hook.begin()
    end_error = None
    try:
        for hook in all_hooks:
            hook.after_session_start(run_context)
        it = iter(batches)
        while not run_context.stop_requested:
            try:
                batch = next(it)
            except StopIteration:
                break
            extra = []
            spans = []
            for hook in all_hooks:
                requested = list(hook.before_run(run_context) or [])
                spans.append((len(extra), len(extra) + len(requested)))
                extra.extend(requested)
            try:
                loss, extra_results = step_fn(batch, extra)
            except BaseException:
                run_context.failed = True
                raise
            run_context.last_loss = loss
            for hook, (lo, hi) in zip(all_hooks, spans):
                hook.after_run(run_context, extra_results[lo:hi])
    except BaseException:
        run_context.failed = True
        for hook in all_hooks:
            try:
                hook.end(run_context)
            except Exception:
                pass  # the original error wins
        raise
    for hook in all_hooks:
        try:
            hook.end(run_context)
        except Exception as exc:
            if end_error is None:
                end_error = exc
    if end_error is not None:
        raise end_error


def append_scalar_rows(model_dir, rows: Iterable[tuple]) -> None:
    """Append (wall_time, step, name, value) rows, writing the header once."""
    path = Path(model_dir) / SCALAR_LOG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(SCALAR_LOG_HEADER)
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Builtin hooks
# ---------------------------------------------------------------------------

class StopAtStepHook(Hook):
    """Halt once global_step reaches last_step (exactly, when stepping by 1)."""

    def __init__(self, last_step: int):
        if last_step < 0:
            raise ValueError(f"stop_at_step: last_step must be >= 0, got {last_step}")
        self.last_step = last_step

    def after_session_start(self, run_context):
        if run_context.global_step >= self.last_step:
            run_context.request_stop()

    def after_run(self, run_context, results):
        if run_context.global_step >= self.last_step:
            run_context.request_stop()


class TimeBasedStopHook(Hook):
    """Halt at the first iteration boundary past the wall-clock deadline."""

    def __init__(self, duration_seconds: float):
        if duration_seconds < 0:
            raise ValueError(
                f"time_based_stop: duration must be >= 0, got {duration_seconds}")
        self.duration = float(duration_seconds)
        self._started_at: Optional[float] = None

    def after_session_start(self, run_context):
        self._started_at = time.monotonic()

    def after_run(self, run_context, results):
        if time.monotonic() - self._started_at >= self.duration:
            run_context.request_stop()


class CheckpointSaverHook(Hook):
    """Save every every_n steps and at loop end (skipped after a failed step)."""

    def __init__(self, every_n: int):
        if every_n < 1:
            raise ValueError(f"checkpoint_saver: every_n must be >= 1, got {every_n}")
        self.every_n = every_n
        self._last_saved: Optional[int] = None

    def _save(self, run_context):
        run_context.save_checkpoint()
        self._last_saved = run_context.global_step

    def after_run(self, run_context, results):
        if run_context.global_step % self.every_n == 0:
            self._save(run_context)

    def end(self, run_context):
        if run_context.failed:
            return  # never persist the state of a diverged step
        if self._last_saved != run_context.global_step:
            self._save(run_context)


class StepCounterHook(Hook):
    """Append a steps_per_sec scalar row every window steps."""

    def __init__(self, window: int = 100, model_dir=None):
        if window < 1:
            raise ValueError(f"step_counter: window must be >= 1, got {window}")
        self.window = window
        self.model_dir = model_dir
        self._window_started: Optional[float] = None
        self._steps_in_window = 0

    def after_session_start(self, run_context):
        self._window_started = time.monotonic()

    def _flush(self, run_context):
        elapsed = max(time.monotonic() - self._window_started, 1e-9)
        rate = self._steps_in_window / elapsed
        model_dir = self.model_dir or run_context.model_dir
        if model_dir is not None:
            append_scalar_rows(
                model_dir,
                [(time.time(), run_context.global_step, "steps_per_sec", rate)])
        self._window_started = time.monotonic()
        self._steps_in_window = 0

    def after_run(self, run_context, results):
        self._steps_in_window += 1
        if self._steps_in_window >= self.window:
            self._flush(run_context)

    def end(self, run_context):
        if self._steps_in_window and not run_context.failed:
            self._flush(run_context)


class LoggerHook(Hook):
    """Fetch named tensors with the train step every every_n steps and log them."""

    def __init__(self, tensors: dict, every_n: int = 1, model_dir=None):
        if every_n < 1:
            raise ValueError(f"logger: every_n must be >= 1, got {every_n}")
        self.tensors = dict(tensors)
        self.every_n = every_n
        self.model_dir = model_dir
        self._iterations = 0
        self._fetch_this_run = False

    def before_run(self, run_context):
        self._iterations += 1
        self._fetch_this_run = self._iterations % self.every_n == 0
        return list(self.tensors.values()) if self._fetch_this_run else None

    def after_run(self, run_context, results):
        if not self._fetch_this_run:
            return
        model_dir = self.model_dir or run_context.model_dir
        if model_dir is None:
            return
        now = time.time()
        step = run_context.global_step
        append_scalar_rows(
            model_dir,
            [(now, step, name, float(value))
             for name, value in zip(self.tensors, results)])


def stop_at_step(last_step: int) -> StopAtStepHook:
    return StopAtStepHook(last_step)


def time_based_stop(duration_seconds: float) -> TimeBasedStopHook:
    return TimeBasedStopHook(duration_seconds)


def checkpoint_saver(every_n: int) -> CheckpointSaverHook:
    return CheckpointSaverHook(every_n)


def step_counter(window: int = 100, model_dir=None) -> StepCounterHook:
    return StepCounterHook(window, model_dir)


def logger(tensors: dict, every_n: int = 1, model_dir=None) -> LoggerHook:
    return LoggerHook(tensors, every_n, model_dir)
