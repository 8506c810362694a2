"""
test_background.py
Tests für OrderedWorkerPool, BatchPrefetcher und RowCache
"""

import sys
from pathlib import Path

# Projekt-Root zum Path hinzufügen
sys.path.insert(0, str(Path(__file__).parent.parent))

import time
import unittest

from background import BatchPrefetcher, OrderedWorkerPool, RowCache


def _slow_square(x):
    # spätere Items werden schneller fertig, Reihenfolge muss trotzdem stimmen
    time.sleep(0.001 * (10 - x % 10))
    return x * x


def _fail_on_three(x):
    if x == 3:
        raise ValueError("drei")
    return x


class TestOrderedWorkerPool(unittest.TestCase):
    """Tests für OrderedWorkerPool"""

    def test_inline_order(self):
        results, errors = OrderedWorkerPool(1, progress=False).map(_slow_square, range(12))
        self.assertEqual(results, [x * x for x in range(12)])
        self.assertEqual(errors, [])

    def test_threaded_order(self):
        """Mehrere Threads → gleiche Reihenfolge wie inline"""
        results, errors = OrderedWorkerPool(4, progress=False).map(_slow_square, range(25))
        self.assertEqual(results, [x * x for x in range(25)])
        self.assertEqual(errors, [])

    def test_errors_collected(self):
        """Fehler einzelner Items werden gesammelt, nicht geworfen"""
        for workers in (1, 3):
            results, errors = OrderedWorkerPool(workers, progress=False).map(_fail_on_three, range(6))
            self.assertIsNone(results[3])
            self.assertEqual(results[4], 4)
            self.assertEqual(len(errors), 1)
            self.assertEqual(errors[0][0], 3)
            self.assertIn("ValueError", errors[0][1])

    def test_empty(self):
        self.assertEqual(OrderedWorkerPool(2, progress=False).map(_slow_square, []), ([], []))


class TestBatchPrefetcher(unittest.TestCase):
    """Tests für BatchPrefetcher"""

    def test_order(self):
        out = list(BatchPrefetcher(lambda b: [x * 2 for x in b], [[1, 2], [3], [4, 5]]))
        self.assertEqual(out, [[2, 4], [6], [8, 10]])

    def test_error_reraised(self):
        def load(b):
            if b == 2:
                raise RuntimeError("kaputt")
            return b

        seen = []
        with self.assertRaises(RuntimeError):
            for b in BatchPrefetcher(load, [1, 2, 3]):
                seen.append(b)
        self.assertEqual(seen, [1])


class TestRowCache(unittest.TestCase):
    """Tests für RowCache"""

    def test_lru_eviction(self):
        calls = []
        cache = RowCache(lambda x: calls.append(x) or x * 10, max_items=2)
        self.assertEqual(cache.get("a", 1), 10)
        self.assertEqual(cache.get("b", 2), 20)
        self.assertEqual(cache.get("a", 1), 10)
        cache.get("c", 3)
        self.assertEqual(len(cache), 2)
        self.assertIn("a", cache)
        self.assertNotIn("b", cache)
        self.assertEqual(calls, [1, 2, 3])
        self.assertEqual((cache.hits, cache.misses), (1, 3))

    def test_bounded_under_threads(self):
        cache = RowCache(_slow_square, max_items=5)
        results, errors = OrderedWorkerPool(4, progress=False).map(lambda x: cache.get(x, x), range(40))
        self.assertEqual(results, [x * x for x in range(40)])
        self.assertEqual(errors, [])
        self.assertLessEqual(len(cache), 5)

    def test_invalid_size(self):
        with self.assertRaises(ValueError):
            RowCache(_slow_square, max_items=0)


if __name__ == "__main__":
    unittest.main()
