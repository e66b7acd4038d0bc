"""
Console output for the recovery toolkit.
Tagged, coloured log lines on stderr; stdout stays free for summary lines.
"""

import os
import sys

QUIET, NORMAL, DEBUG = 0, 1, 2

_level = NORMAL


# ANSI color codes for terminal output
class Colors:
    RED = '\033[91m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    BLUE = '\033[94m'
    MAGENTA = '\033[95m'
    CYAN = '\033[96m'
    WHITE = '\033[97m'
    BOLD = '\033[1m'
    RESET = '\033[0m'


def set_verbosity(level):
    """Set the global log level (QUIET, NORMAL or DEBUG)."""
    global _level
    _level = level


def get_verbosity():
    return _level


def _use_color(stream):
    if os.environ.get('NO_COLOR'):
        return False
    return hasattr(stream, 'isatty') and stream.isatty()


def _emit(tag, color, message, min_level):
    if _level < min_level:
        return
    stream = sys.stderr
    if _use_color(stream):
        print(f"{color}[{tag}]{Colors.RESET} {message}", file=stream)
    else:
        print(f"[{tag}] {message}", file=stream)


def debug(message):
    _emit('DEBUG', Colors.MAGENTA, message, DEBUG)


def info(message):
    _emit('INFO', Colors.CYAN, message, NORMAL)


def success(message):
    _emit('SUCCESS', Colors.GREEN, message, NORMAL)


def warning(message):
    # warnings survive --quiet
    _emit('WARNING', Colors.YELLOW, message, QUIET)


def error(message):
    _emit('ERROR', Colors.RED, message, QUIET)


def section(title, width=60):
    """Print a titled block separator."""
    if _level < NORMAL:
        return
    stream = sys.stderr
    bar = '=' * width
    if _use_color(stream):
        print(f"\n{Colors.CYAN}{bar}{Colors.RESET}", file=stream)
        print(f"{Colors.BOLD}{Colors.CYAN}{title}{Colors.RESET}", file=stream)
        print(f"{Colors.CYAN}{bar}{Colors.RESET}", file=stream)
    else:
        print(f"\n{bar}\n{title}\n{bar}", file=stream)


def field(label, value):
    """Print an indented `label: value` line inside a section."""
    if _level < NORMAL:
        return
    stream = sys.stderr
    if _use_color(stream):
        print(f"  {Colors.WHITE}{label}: {Colors.GREEN}{value}{Colors.RESET}", file=stream)
    else:
        print(f"  {label}: {value}", file=stream)


def banner(title, subtitle=None, width=60):
    """Opening block of a command run."""
    section(title if subtitle is None else f"{title} - {subtitle}", width)
