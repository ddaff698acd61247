import logging
from contextlib import contextmanager
try:
    from threading import local
except ImportError:
    from _threading_local import local

_thread_locals = local()


def get_current_region():
    """
    To get the region id the current thread is working on.
    example:
        region = get_current_region()
    """
    return getattr(_thread_locals, 'region', None)


def set_current_region(region_id):
    setattr(_thread_locals, 'region', region_id)


@contextmanager
def region_scope(region_id):
    """Sets the current region for the duration of a block and restores the
    previous one afterwards, so nested fits (grid search inside a fit) keep
    their attribution."""
    previous = get_current_region()
    set_current_region(region_id)
    try:
        yield region_id
    finally:
        set_current_region(previous)


class RegionLogFilter(logging.Filter):
    """Stamps every record with the region of the emitting thread."""

    def filter(self, record):
        record.region = get_current_region() or '-'
        return True
