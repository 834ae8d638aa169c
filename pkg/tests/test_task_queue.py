"""
Tests for the solve task queue.

Covers ordering, error capture, statistics and the thread/process pools.
"""

import operator
import sys
from pathlib import Path

import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.task_queue import TaskPriority, TaskQueue, TaskStatus


def _fail(message):
    raise RuntimeError(message)


def test_task_queue():
    """Test priorities, inline execution and statistics."""
    print("\n=== Testing TaskQueue ===")

    queue = TaskQueue()
    order = []

    def record(name):
        order.append(name)
        return name.upper()

    queue.add_task("low", record, "low", priority=TaskPriority.LOW)
    queue.add_task("high", record, "high", priority=TaskPriority.HIGH)
    queue.add_task("medium_1", record, "medium_1")
    queue.add_task("medium_2", record, "medium_2")
    print(f"Queue: {queue}")
    assert len(queue) == 4

    done = queue.run(workers=1)
    print(f"Execution order: {order}")

    assert order == ["high", "medium_1", "medium_2", "low"]
    assert done["high"].result == "HIGH"
    assert done["low"].status == TaskStatus.COMPLETED
    assert done["low"].get_duration() is not None
    assert len(queue) == 0

    stats = queue.get_statistics()
    print(f"Statistics: {stats}")
    assert stats["total_tasks"] == 4
    assert stats["completed_tasks"] == 4
    assert stats["success_rate"] == 1.0

    print("✓ TaskQueue works!")


def test_errors_are_recorded():
    """Test that a raising task is marked failed without stopping the others."""
    print("\n=== Testing task errors ===")

    queue = TaskQueue()
    queue.add_task("ok", operator.add, 2, 3)
    queue.add_task("bad", _fail, "pattern infeasible")
    done = queue.run(workers=1)

    assert done["ok"].result == 5
    assert done["bad"].status == TaskStatus.FAILED
    assert done["bad"].error == "RuntimeError: pattern infeasible"
    assert done["bad"].to_dict()["status"] == "failed"
    assert queue.get_statistics()["failed_tasks"] == 1
    assert queue.get_statistics()["success_rate"] == 0.5

    with pytest.raises(ValueError):
        queue.add_task("ok", operator.add, 1, 1)

    print("✓ Task errors are recorded!")


@pytest.mark.parametrize("executor", ["thread", "process"])
def test_pools(executor):
    """Test that pooled runs return every result under its key."""
    print(f"\n=== Testing {executor} pool ===")

    queue = TaskQueue()
    for k in range(6):
        queue.add_task((k, "pow"), pow, k, 2)
    queue.add_task("bad", _fail, "boom")
    done = queue.run(workers=2, executor=executor)

    assert [done[(k, "pow")].result for k in range(6)] == [k * k for k in range(6)]
    assert done["bad"].status == TaskStatus.FAILED
    assert queue.get_statistics()["completed_tasks"] == 6

    print(f"✓ {executor} pool works!")


def run_all_tests():
    """Run all tests."""
    print("\n" + "=" * 70)
    print("TESTING TASK QUEUE")
    print("=" * 70)

    test_task_queue()
    test_errors_are_recorded()
    test_pools("thread")
    test_pools("process")

    print("\n" + "=" * 70)
    print("✓ ALL TESTS PASSED!")
    print("=" * 70)


if __name__ == "__main__":
    run_all_tests()
