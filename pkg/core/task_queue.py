"""
Task queue module for solve fan-out.

Runs independent solves (sweep points, direction patterns) on a thread or
process pool and tracks their status, results and timings.
"""

import logging
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from queue import Empty, PriorityQueue
from typing import Any, Callable, Dict, Hashable, List, Optional, Tuple

logger = logging.getLogger(__name__)


class TaskStatus(Enum):
    """Task execution status."""
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


class TaskPriority(Enum):
    """Submission order; lower values are submitted first."""
    LOW = 3
    MEDIUM = 2
    HIGH = 1


@dataclass(order=True)
class SolveTask:
    """
    One unit of work for the pool.

    Attributes:
        priority: Submission priority (lower number first)
        seq: Insertion counter breaking priority ties
        key: Caller's identifier for the result
        fn: Callable to run; must be picklable for the process pool
        args: Positional arguments
        kwargs: Keyword arguments
        status: Current status
        started_at: Submission timestamp
        completed_at: Completion timestamp
        result: Return value of fn
        error: Error message if fn raised
    """
    priority: int
    seq: int
    key: Hashable = field(compare=False)
    fn: Callable[..., Any] = field(compare=False, repr=False)
    args: Tuple[Any, ...] = field(default=(), compare=False, repr=False)
    kwargs: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)
    status: TaskStatus = field(default=TaskStatus.PENDING, compare=False)
    started_at: Optional[datetime] = field(default=None, compare=False)
    completed_at: Optional[datetime] = field(default=None, compare=False)
    result: Any = field(default=None, compare=False, repr=False)
    error: Optional[str] = field(default=None, compare=False)

    def start(self):
        self.status = TaskStatus.IN_PROGRESS
        self.started_at = datetime.now()

    def complete(self, result: Any):
        self.status = TaskStatus.COMPLETED
        self.completed_at = datetime.now()
        self.result = result
        logger.debug(f"Task {self.key} completed")

    def fail(self, error: str):
        self.status = TaskStatus.FAILED
        self.completed_at = datetime.now()
        self.error = error
        logger.error(f"Task {self.key} failed: {error}")

    def get_duration(self) -> Optional[float]:
        """Wall time from submission to completion in seconds."""
        if self.started_at and self.completed_at:
            return (self.completed_at - self.started_at).total_seconds()
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "key": str(self.key),
            "priority": self.priority,
            "status": self.status.value,
            "started_at": self.started_at.isoformat() if self.started_at else None,
            "completed_at": self.completed_at.isoformat() if self.completed_at else None,
            "duration": self.get_duration(),
            "error": self.error,
        }


class TaskQueue:
    """
    Priority queue of independent solve tasks.

    Tasks run inline when one worker is requested, otherwise on a
    ThreadPoolExecutor or ProcessPoolExecutor. Exceptions raised by a task
    are recorded on it and never propagate out of run().
    """

    def __init__(self):
        self.queue: PriorityQueue = PriorityQueue()
        self.tasks: Dict[Hashable, SolveTask] = {}
        self._seq = 0

    def add_task(
        self,
        key: Hashable,
        fn: Callable[..., Any],
        *args: Any,
        priority: TaskPriority = TaskPriority.MEDIUM,
        **kwargs: Any,
    ) -> SolveTask:
        """
        Queue fn(*args, **kwargs) under key.

        Raises:
            ValueError: If key is already queued
        """
        if key in self.tasks:
            raise ValueError(f"duplicate task key: {key}")
        task = SolveTask(
            priority=priority.value if isinstance(priority, TaskPriority) else int(priority),
            seq=self._seq,
            key=key,
            fn=fn,
            args=args,
            kwargs=kwargs,
        )
        self._seq += 1
        self.tasks[key] = task
        self.queue.put(task)
        return task

    def _drain(self) -> List[SolveTask]:
        ordered = []
        while True:
            try:
                ordered.append(self.queue.get_nowait())
            except Empty:
                return ordered

    def run(self, workers: int = 1, executor: str = "thread") -> Dict[Hashable, SolveTask]:
        """
        Execute every queued task.

        Args:
            workers: Pool size; 1 runs inline in priority order
            executor: "thread" or "process"

        Returns:
            All tasks by key, finished or failed
        """
        ordered = self._drain()
        logger.info(f"Running {len(ordered)} task(s) on {workers} {executor} worker(s)")
        if workers <= 1:
            for task in ordered:
                task.start()
                try:
                    task.complete(task.fn(*task.args, **task.kwargs))
                except Exception as e:
                    task.fail(f"{type(e).__name__}: {e}")
            return self.tasks

        pool_cls = ProcessPoolExecutor if executor == "process" else ThreadPoolExecutor
        pool: Executor
        with pool_cls(max_workers=workers) as pool:
            futures = {}
            for task in ordered:
                task.start()
                futures[pool.submit(task.fn, *task.args, **task.kwargs)] = task
            for future in as_completed(futures):
                task = futures[future]
                try:
                    task.complete(future.result())
                except Exception as e:
                    task.fail(f"{type(e).__name__}: {e}")
        return self.tasks

    def get_tasks_by_status(self, status: TaskStatus) -> List[SolveTask]:
        return [t for t in self.tasks.values() if t.status == status]

    def get_statistics(self) -> Dict[str, Any]:
        """Counts per status and the success rate."""
        total = len(self.tasks)
        completed = len(self.get_tasks_by_status(TaskStatus.COMPLETED))
        return {
            "total_tasks": total,
            "completed_tasks": completed,
            "failed_tasks": len(self.get_tasks_by_status(TaskStatus.FAILED)),
            "pending_tasks": len(self.get_tasks_by_status(TaskStatus.PENDING)),
            "success_rate": completed / total if total else 0.0,
        }

    def __len__(self) -> int:
        return self.queue.qsize()

    def __repr__(self) -> str:
        stats = self.get_statistics()
        return (
            f"TaskQueue(total={stats['total_tasks']}, "
            f"completed={stats['completed_tasks']}, failed={stats['failed_tasks']})"
        )
