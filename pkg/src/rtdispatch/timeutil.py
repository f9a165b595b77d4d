"""Timestamps are float seconds since the Unix epoch, UTC."""
from datetime import datetime, timezone

SECONDS_PER_HOUR = 3600.0
SECONDS_PER_DAY = 86400.0
SECONDS_PER_WEEK = 7 * SECONDS_PER_DAY
MINUTES_PER_WEEK = 10080

# 1970-01-05 00:00 UTC was a Monday; weekly bins are anchored there.
_WEEK_ANCHOR = 4 * SECONDS_PER_DAY


def parse_timestamp(text):
    """Parse an ISO-8601 string into epoch seconds. Naive values are UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(seconds):
    dt = datetime.fromtimestamp(seconds, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S")


def to_datetime(seconds):
    return datetime.fromtimestamp(seconds, tz=timezone.utc)


def seconds_into_week(seconds):
    return (seconds - _WEEK_ANCHOR) % SECONDS_PER_WEEK


def weekly_bin(seconds, bin_width_minutes=30):
    """Index of the half-open weekly bin containing ``seconds``."""
    width = bin_width_minutes * 60.0
    idx = int(seconds_into_week(seconds) // width)
    # guard against float rounding at the very end of the week
    return min(idx, int(MINUTES_PER_WEEK // bin_width_minutes) - 1)


def bin_start(seconds, bin_width_minutes=30):
    """Absolute start time of the weekly bin containing ``seconds``."""
    width = bin_width_minutes * 60.0
    offset = seconds_into_week(seconds)
    return seconds - offset + weekly_bin(seconds, bin_width_minutes) * width
