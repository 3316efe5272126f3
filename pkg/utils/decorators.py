"""
Experiment stage decorator and the experiment directory lock
"""
import json
import os
import time
from contextlib import contextmanager
from functools import wraps
from pathlib import Path
from typing import Callable, Iterator, Union

import psutil

from utils.errors import LockError, StageError
from utils.logger import logger

LOCK_FILE = "experiment.lock"


def write_json_atomic(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp_path.replace(path)
    return path


def experiment_stage(name: str):
    """
    Decorator for stage methods of an experiment runner

    The wrapped method is called as `method(runner, key, *args)` where `key`
    hashes the stage inputs; `name` may use `{}` fields filled from `args`
    (e.g. "classifier_{}"). Return values must be JSON-serialisable; they are
    stored in the completion marker `stages/<name>-<key>.json`.

    Usage:
        @experiment_stage("gan_same")
        def gan_same(self, key, manifest_path): ...

    With `runner.resume` set, a stage whose marker exists is not run again
    and its stored outputs are returned. A failure is recorded on the runner
    and re-raised as StageError.
    """
    def decorator(f: Callable) -> Callable:
        @wraps(f)
        def decorated_function(runner, key: str, *args, **kwargs):
            stage_name = name.format(*args)
            marker = runner.stage_marker(stage_name, key)
            if runner.resume and marker.is_file():
                outputs = json.loads(marker.read_text(encoding="utf-8"))["outputs"]
                runner.stages[stage_name] = "completed"
                logger.stage_event("SKIPPED", stage_name, key=key)
                return outputs

            logger.bind(stage=stage_name)
            logger.stage_event("STARTED", stage_name, key=key)
            start_time = time.perf_counter()
            try:
                outputs = f(runner, key, *args, **kwargs)
            except Exception as e:
                runner.stages[stage_name] = "failed"
                runner.failures.append({
                    "stage": stage_name,
                    "error_type": type(e).__name__,
                    "message": str(e),
                })
                logger.error("STAGE_FAILED", exception=e, stage_name=stage_name, key=key)
                raise StageError(stage_name, str(e)) from e
            finally:
                logger.unbind("stage")

            write_json_atomic(marker, {"stage": stage_name, "key": key, "outputs": outputs})
            runner.stages[stage_name] = "completed"
            duration_ms = (time.perf_counter() - start_time) * 1000
            logger.performance_metric(f"stage_{stage_name}", duration_ms, key=key)
            return outputs

        return decorated_function
    return decorator


def _read_pid(path: Path) -> int:
    try:
        return int(path.read_text(encoding="utf-8").strip() or -1)
    except (OSError, ValueError):
        return -1


@contextmanager
def experiment_lock(directory: Union[str, Path]) -> Iterator[Path]:
    """Own `directory` for the duration of the block

    A lock left behind by a dead process is taken over with a warning; one
    held by a live process (this one included) raises LockError.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / LOCK_FILE
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        pid = _read_pid(path)
        if pid > 0 and psutil.pid_exists(pid):
            raise LockError(f"{directory} is locked by running process {pid}")
        logger.warning("STALE_LOCK_TAKEN_OVER", lock=str(path), stale_pid=pid)
        path.unlink(missing_ok=True)
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        handle.write(str(os.getpid()))

    try:
        yield path
    finally:
        path.unlink(missing_ok=True)
