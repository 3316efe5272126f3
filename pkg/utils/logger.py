"""
Context-aware logging for ganaug experiments
Human-readable console output plus one JSON object per line in events.log
"""
import logging
import time
import inspect
import os
import traceback
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Union

import psutil
from pythonjsonlogger import jsonlogger

# LogRecord attributes that `extra` must not overwrite
RESERVED_FIELDS = set(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}

CONSOLE_FORMAT = "%(asctime)s %(levelname)-7s %(message)s"
EVENT_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


class ContextLogger:
    """Context-aware logger with experiment/stage/regime tracking"""

    def __init__(self, name: str = "ganaug"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(os.getenv("GANAUG_LOG_LEVEL", "INFO").upper())

        # Console handler, added once even if the module is reloaded
        if not any(getattr(h, "_ganaug_console", False) for h in self.logger.handlers):
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
            handler._ganaug_console = True
            self.logger.addHandler(handler)

        self._event_handler: Optional[logging.Handler] = None

        # Context variables
        self.experiment: Optional[str] = None
        self.stage: Optional[str] = None
        self.regime: Optional[str] = None

    def bind(self, experiment: Optional[str] = None,
             stage: Optional[str] = None,
             regime: Optional[str] = None) -> 'ContextLogger':
        """Bind context variables to logger"""
        if experiment:
            self.experiment = experiment
        if stage:
            self.stage = stage
        if regime:
            self.regime = regime
        return self

    def unbind(self, *fields: str) -> 'ContextLogger':
        """Clear the given context fields (all of them when none are named)"""
        for field in fields or ("experiment", "stage", "regime"):
            setattr(self, field, None)
        return self

    def attach_event_log(self, path: Union[str, Path]) -> Path:
        """Send every record to `path` as one JSON object per line"""
        self.detach_event_log()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(path, encoding="utf-8")
        handler.setFormatter(jsonlogger.JsonFormatter(
            EVENT_FORMAT,
            rename_fields={'asctime': 'timestamp', 'levelname': 'level'}
        ))
        self.logger.addHandler(handler)
        self._event_handler = handler
        return path

    def detach_event_log(self):
        if self._event_handler is not None:
            self.logger.removeHandler(self._event_handler)
            self._event_handler.close()
            self._event_handler = None

    def _get_caller_info(self) -> Dict[str, Any]:
        """Get information about the calling function"""
        frame = inspect.currentframe()
        # _log <- public method <- caller
        caller = frame.f_back.f_back.f_back if frame and frame.f_back and frame.f_back.f_back else None
        if caller is not None:
            return {
                "file": os.path.basename(caller.f_code.co_filename),
                "line": caller.f_lineno,
                "function": caller.f_code.co_name,
            }
        return {}

    @staticmethod
    def _safe_fields(fields: Dict[str, Any]) -> Dict[str, Any]:
        return {(f"ctx_{k}" if k in RESERVED_FIELDS else k): v for k, v in fields.items()}

    def _log(self, level: str, message: str, **kwargs):
        """Internal logging method with context"""
        context = {
            "timestamp_ms": int(time.time() * 1000),
            "experiment": self.experiment,
            "stage": self.stage,
            "regime": self.regime,
            **self._get_caller_info()
        }
        context.update(kwargs)
        getattr(self.logger, level)(message, extra=self._safe_fields(context))

    def debug(self, message: str, **kwargs):
        """Log debug message with context"""
        self._log("debug", message, **kwargs)

    def info(self, message: str, **kwargs):
        """Log info message with context"""
        self._log("info", message, **kwargs)

    def warning(self, message: str, **kwargs):
        """Log warning message with context"""
        self._log("warning", message, **kwargs)

    def error(self, message: str, exception: Optional[Exception] = None, **kwargs):
        """Log error message with context and optional exception"""
        if exception:
            kwargs['exception_type'] = type(exception).__name__
            kwargs['exception_message'] = str(exception)
            kwargs['stack_trace'] = "".join(traceback.format_exception(exception))
        self._log("error", message, **kwargs)

    def critical(self, message: str, **kwargs):
        """Log critical message with context"""
        self._log("critical", message, **kwargs)

    def performance_metric(self, operation: str, duration_ms: float, **kwargs):
        """Log performance metrics with the process memory footprint"""
        level = "warning" if duration_ms > 60_000 else "info" if duration_ms > 5_000 else "debug"
        rss_mb = psutil.Process().memory_info().rss / (1024 * 1024)
        self._log(level, f"PERFORMANCE_{operation}",
                  operation=operation,
                  duration_ms=round(duration_ms, 2),
                  rss_mb=round(rss_mb, 1),
                  **kwargs)

    def stage_event(self, event_type: str, stage: str, **kwargs):
        """Log experiment stage transitions"""
        self.info(f"STAGE_{event_type}", stage_name=stage, **kwargs)

    def training_progress(self, model: str, epoch: int, epochs: int, **metrics):
        """Log one epoch of training and print a key=value line to stdout"""
        rounded = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in metrics.items()}
        self.info(f"{model.upper()}_EPOCH_DONE", epoch=epoch, epochs=epochs, **rounded)
        fields = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in metrics.items())
        print(f"{model} epoch={epoch}/{epochs} {fields}", flush=True)


# Global logger instance
logger = ContextLogger()


# Timing decorator
def timed(operation_name: Optional[str] = None):
    """Decorator to time function execution"""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            operation = operation_name or func.__name__

            logger.debug(f"{operation}_started",
                         args_count=len(args),
                         kwargs_keys=list(kwargs.keys()))

            try:
                result = func(*args, **kwargs)
                duration_ms = (time.perf_counter() - start_time) * 1000
                logger.performance_metric(operation, duration_ms, status="success")
                return result
            except Exception as e:
                duration_ms = (time.perf_counter() - start_time) * 1000
                logger.error(f"{operation}_failed",
                             exception=e,
                             duration_ms=round(duration_ms, 2))
                raise

        return wrapper
    return decorator
