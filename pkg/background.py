"""
background.py
Hintergrundarbeit für DerevKit:
- OrderedWorkerPool (parallele Jobs, Ergebnisse in Index-Reihenfolge)
- BatchPrefetcher (lädt Mini-Batches voraus, liefert in fester Reihenfolge)
- RowCache (begrenzter LRU-Cache für geladene Einzel-Ergebnisse)
"""
import queue
import threading
import traceback
from collections import OrderedDict
from typing import Any, Callable, Iterable, List, Optional, Tuple

from tqdm import tqdm

from logger_system import logger

# ============================================================
# Konstanten
# ============================================================
QUEUE_POLL_INTERVAL = 0.1   # Sekunden - Worker prüfen so oft das Stop-Flag
PREFETCH_DEPTH = 2          # Batches, die der Prefetcher vorhält
DEFAULT_CACHE_ITEMS = 512   # Einträge im RowCache

_STOP = object()


# ============================================================
# 1. Worker
# ============================================================
class _Worker(threading.Thread):
    """
    Holt (index, item) Jobs aus der Queue und legt (index, ok, value) ab.
    Fehler einzelner Items beenden den Worker nicht.
    """
    def __init__(self, fn, jobs: queue.Queue, results: queue.Queue):
        super().__init__(daemon=True)
        self.fn = fn
        self.jobs = jobs
        self.results = results
        self.running = True

    def run(self):
        while self.running:
            try:
                job = self.jobs.get(timeout=QUEUE_POLL_INTERVAL)
            except queue.Empty:
                continue
            if job is _STOP:
                break
            index, item = job
            try:
                self.results.put((index, True, self.fn(item)))
            except Exception as e:
                logger.error(f"Fehler in Job {index}: {traceback.format_exc()}")
                self.results.put((index, False, f"{type(e).__name__}: {e}"))

    def stop(self):
        self.running = False


# ============================================================
# 2. OrderedWorkerPool
# ============================================================
class OrderedWorkerPool:
    """
    Verteilt Jobs auf N Threads und sammelt die Ergebnisse in Eingabe-Reihenfolge.

    workers <= 1 läuft ohne Threads direkt im Aufrufer. Das Ergebnis hängt
    nicht von der Worker-Zahl ab, solange fn selbst deterministisch ist.
    """
    def __init__(self, workers: int = 1, progress: bool = True):
        self.workers = max(1, int(workers))
        self.progress = progress

    def map(self, fn: Callable[[Any], Any], items: Iterable[Any],
            desc: Optional[str] = None) -> Tuple[List[Any], List[Tuple[int, str]]]:
        """
        Wendet fn auf alle Items an.

        Returns:
            (results, errors): results[i] ist None für fehlgeschlagene Items,
            errors ist eine nach Index sortierte Liste (index, Meldung)
        """
        items = list(items)
        results: List[Any] = [None] * len(items)
        errors: List[Tuple[int, str]] = []
        bar = tqdm(total=len(items), desc=desc, disable=not self.progress or None, leave=False)

        if self.workers == 1 or len(items) <= 1:
            for index, item in enumerate(items):
                try:
                    results[index] = fn(item)
                except Exception as e:
                    logger.error(f"Fehler in Job {index}: {traceback.format_exc()}")
                    errors.append((index, f"{type(e).__name__}: {e}"))
                bar.update(1)
            bar.close()
            return results, errors

        jobs: queue.Queue = queue.Queue()
        done: queue.Queue = queue.Queue()
        for index, item in enumerate(items):
            jobs.put((index, item))
        threads = [_Worker(fn, jobs, done) for _ in range(min(self.workers, len(items)))]
        for _ in threads:
            jobs.put(_STOP)
        for t in threads:
            t.start()

        try:
            for _ in range(len(items)):
                index, ok, value = done.get()
                if ok:
                    results[index] = value
                else:
                    errors.append((index, value))
                bar.update(1)
        finally:
            for t in threads:
                t.stop()
            for t in threads:
                t.join()
            bar.close()

        errors.sort(key=lambda e: e[0])
        logger.debug(f"Pool fertig: {len(items)} Jobs, {len(errors)} Fehler, {len(threads)} Threads")
        return results, errors


# ============================================================
# 3. BatchPrefetcher
# ============================================================
class BatchPrefetcher(threading.Thread):
    """
    Baut Mini-Batches im Hintergrund und liefert sie in der Reihenfolge
    der Index-Liste aus. Exceptions beim Laden werden beim Abholen erneut
    geworfen.

    Verwendung:
        for batch in BatchPrefetcher(load_fn, batches):
            ...
    """
    def __init__(self, load_fn: Callable[[Any], Any], batches: Iterable[Any], depth: int = PREFETCH_DEPTH):
        super().__init__(daemon=True)
        self.load_fn = load_fn
        self.batches = list(batches)
        self.queue: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self.running = True

    def run(self):
        for spec in self.batches:
            if not self.running:
                return
            try:
                payload = (True, self.load_fn(spec))
            except Exception as e:
                logger.error(f"Fehler beim Laden eines Batches: {traceback.format_exc()}")
                payload = (False, e)
            while self.running:
                try:
                    self.queue.put(payload, timeout=QUEUE_POLL_INTERVAL)
                    break
                except queue.Full:
                    continue
        if self.running:
            self.queue.put((True, _STOP))

    def __iter__(self):
        self.start()
        try:
            while True:
                ok, value = self.queue.get()
                if not ok:
                    raise value
                if value is _STOP:
                    return
                yield value
        finally:
            self.stop()

    def stop(self):
        """Stoppt den Prefetcher."""
        self.running = False


# ============================================================
# 4. RowCache
# ============================================================
class RowCache:
    """
    Thread-sicherer LRU-Cache für Einzel-Ergebnisse (z.B. Spektren pro Manifest-Zeile).
    Hält höchstens max_items Einträge; der am längsten ungenutzte fliegt zuerst.
    """
    def __init__(self, load_fn: Callable[[Any], Any], max_items: int = DEFAULT_CACHE_ITEMS):
        if max_items < 1:
            raise ValueError(f"max_items must be >= 1, got {max_items}")
        self.load_fn = load_fn
        self.max_items = int(max_items)
        self._items: "OrderedDict[Any, Any]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key, item):
        with self._lock:
            if key in self._items:
                self._items.move_to_end(key)
                self.hits += 1
                return self._items[key]
        # Laden ohne Lock
        value = self.load_fn(item)
        with self._lock:
            self.misses += 1
            self._items[key] = value
            self._items.move_to_end(key)
            while len(self._items) > self.max_items:
                self._items.popitem(last=False)
        return value

    def __contains__(self, key) -> bool:
        with self._lock:
            return key in self._items

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)
