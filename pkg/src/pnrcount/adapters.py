"""Readers for third-party time-tag formats (not implemented).

Vendor time-tagger formats and published raw datasets would be converted into the
native tag format here. Each adapter must return ``(rep_period_ps, records)`` with
``records`` a :data:`pnrcount.tagio.TAG_DTYPE` array: trigger on channel 0,
spatial channels 1..8, timestamps in ps and globally sorted.
"""

from __future__ import annotations


def read_vendor_tags(path, *, trigger_channel: int, click_channels: list[int]):
    """Convert a vendor time-tagger dump into native records."""
    raise NotImplementedError("vendor time-tagger formats are not supported; convert to the native tag format")


def read_published_dataset(path):
    """Convert a published raw-data archive into native records."""
    raise NotImplementedError("published raw datasets are not supported; convert to the native tag format")
