"""Synthetic feeders shipped with the package (see scripts/make_fixtures.py)."""

from pathlib import Path

DATA_DIR = Path(__file__).resolve().parent / "data"
FEEDERS = ("feeder4", "feeder10", "feeder33")


def path(name: str) -> Path:
    """Path of a bundled feeder file; ``name`` may omit the ``.txt`` suffix."""
    p = DATA_DIR / (name if name.endswith(".txt") else f"{name}.txt")
    if not p.exists():
        raise FileNotFoundError(f"no bundled feeder {name!r}; have {', '.join(FEEDERS)}")
    return p


def resolve(name_or_path) -> Path:
    """A filesystem path, or the bundled feeder of that name."""
    p = Path(name_or_path)
    if p.exists():
        return p
    return path(str(name_or_path))
