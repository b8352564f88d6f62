"""Rich console utilities for terminal output."""

import logging
import math
from typing import Dict, Mapping

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    SpinnerColumn,
    TextColumn,
    TimeElapsedColumn,
)
from rich.table import Table

# Global console instance
console = Console()


def print_error(message: str) -> None:
    """Print an error message."""
    console.print(f"[bold red]✗ Error:[/bold red] {message}")


def print_success(message: str) -> None:
    """Print a success message."""
    console.print(f"[bold green]✓ Success:[/bold green] {message}")


def print_info(message: str) -> None:
    """Print an info message."""
    console.print(f"[bold blue]ℹ Info:[/bold blue] {message}")


def print_warning(message: str) -> None:
    """Print a warning message."""
    console.print(f"[bold yellow]⚠ Warning:[/bold yellow] {message}")


def setup_logging(verbose: bool = False) -> None:
    """Route library log records through rich (INFO with ``verbose``, WARNING otherwise)."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=True)],
        force=True,
    )


def _cell(value: object) -> str:
    if isinstance(value, float):
        return "–" if math.isnan(value) else f"{value:.4g}"
    return str(value)


def display_table(frame: pd.DataFrame, title: str, max_rows: int = 30) -> None:
    """Render a report table; long tables are cut to ``max_rows`` rows."""
    table = Table(title=f"[bold]{title}[/bold]", show_header=True, header_style="bold cyan")
    for column in frame.columns:
        numeric = pd.api.types.is_numeric_dtype(frame[column])
        table.add_column(str(column), justify="right" if numeric else "left")

    for row in frame.head(max_rows).itertuples(index=False):
        table.add_row(*(_cell(v) for v in row))

    if len(frame) > max_rows:
        table.add_row(*(["[dim]...[/dim]"] + [""] * (len(frame.columns) - 1)))
    console.print(table)


def display_settings(settings: Mapping[str, str], title: str = "Current Configuration") -> None:
    """Display resolved key=value settings."""
    table = Table(title=f"[bold]⚙️  {title}[/bold]", show_header=True)
    table.add_column("Key", style="cyan")
    table.add_column("Value", justify="right")

    for key, value in settings.items():
        table.add_row(key, value if value != "" else "[dim]unset[/dim]")

    console.print(table)


def display_fit_summary(facts: Dict[str, object], title: str = "Fit Summary") -> None:
    """Display a short run summary in a panel."""
    body = "\n".join(f"[cyan]{key}[/cyan]: {_cell(value)}" for key, value in facts.items())
    console.print(
        Panel(body, title=f"[bold cyan]{title}[/bold cyan]", border_style="cyan", padding=(1, 2))
    )


def create_progress(transient: bool = False) -> Progress:
    """Create a progress bar for chains and folds."""
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=transient,
    )
