"""User interface components."""

from dosetree.ui import console
from dosetree.ui.console import print_error, print_info, print_success, print_warning


__all__ = [
    "console",
    "print_error",
    "print_success",
    "print_info",
    "print_warning",
]
