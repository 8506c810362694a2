import logging
import sys
from pathlib import Path

FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(name="DerevKit"):
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)

    # Verhindern, dass Handler mehrfach hinzugefügt werden (Singleton-ish)
    if logger.handlers:
        return logger

    formatter = logging.Formatter(FORMAT)

    # Console Handler (stderr, Ergebnisse gehen nur in Dateien)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


def set_console_level(level, name="DerevKit"):
    """Setzt den Level des Konsolen-Handlers (--verbose / --quiet)."""
    for handler in logging.getLogger(name).handlers:
        if not isinstance(handler, logging.FileHandler):
            handler.setLevel(level)


def attach_file_handler(path, name="DerevKit"):
    """
    Hängt einen DEBUG-FileHandler an (z.B. <out>/derevkit.log).
    Gibt den Handler zurück, damit der Aufrufer ihn wieder entfernen kann.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(path, encoding="utf-8")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(FORMAT))
    logging.getLogger(name).addHandler(file_handler)
    return file_handler


def detach_handler(handler, name="DerevKit"):
    logging.getLogger(name).removeHandler(handler)
    handler.close()


# Globale Instanz für einfachen Zugriff
logger = setup_logger()
