"""Layer-parallel execution of training stages.

One worker thread per stage, bounded FIFO queues between neighbours. Every
stage sees batches in source order and owns its layer state exclusively, and
forwarded activations come from pre-update parameters, so the results equal
``sequential_execute`` bit for bit.
"""

from __future__ import annotations

import logging
import queue
import threading
from typing import Callable, Iterable, TypeVar

from .errors import AsgeError, ConfigurationError, PipelineError

logger = logging.getLogger(__name__)

T = TypeVar("T")
StageFn = Callable[[T], T]

_DONE = object()
_POLL_S = 0.05


def sequential_execute(stages: list[StageFn], items: Iterable[T]) -> list[T]:
    results = []
    for item in items:
        for stage in stages:
            item = stage(item)
        results.append(item)
    return results


def pipeline_execute(stages: list[StageFn], items: Iterable[T], depth: int = 2) -> list[T]:
    """Run ``stages`` as a pipeline over ``items``; returns outputs in input order."""
    if depth < 1:
        raise ConfigurationError(f"queue depth must be >= 1 (got {depth})", field="training.queue_depth")
    if not stages:
        return list(items)

    links: list[queue.Queue] = [queue.Queue(maxsize=depth) for _ in stages]
    results: queue.Queue = queue.Queue()
    links.append(results)
    stop = threading.Event()
    failures: list[tuple[int, BaseException]] = []
    lock = threading.Lock()

    def fail(stage: int, exc: BaseException) -> None:
        with lock:
            failures.append((stage, exc))
        stop.set()

    def put(q: queue.Queue, item: object) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=_POLL_S)
                return True
            except queue.Full:
                continue
        return False

    def get(q: queue.Queue) -> object:
        while not stop.is_set():
            try:
                return q.get(timeout=_POLL_S)
            except queue.Empty:
                continue
        return _DONE

    def feed() -> None:
        try:
            for item in items:
                if not put(links[0], item):
                    return
        except BaseException as exc:
            fail(0, exc)
            return
        put(links[0], _DONE)

    def work(k: int) -> None:
        logger.debug("stage %d started", k + 1)
        try:
            while True:
                item = get(links[k])
                if item is _DONE:
                    put(links[k + 1], _DONE)
                    return
                if not put(links[k + 1], stages[k](item)):
                    return
        except BaseException as exc:
            fail(k + 1, exc)
        finally:
            logger.debug("stage %d stopped", k + 1)

    threads = [threading.Thread(target=feed, name="asge-feed", daemon=True)]
    threads += [threading.Thread(target=work, args=(k,), name=f"asge-stage-{k + 1}", daemon=True) for k in range(len(stages))]
    for t in threads:
        t.start()

    collected: list[T] = []
    while True:
        item = get(results)
        if item is _DONE:
            break
        collected.append(item)
    for t in threads:
        t.join()

    if failures:
        stage, exc = min(failures, key=lambda f: f[0])
        if isinstance(exc, AsgeError):
            raise exc
        raise PipelineError(stage, exc) from exc
    return collected
