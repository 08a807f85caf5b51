"""
UI Display module for jamident.
Handles all terminal rendering: report tables, the training curve and
status messages.
"""

from rich import box
from rich.align import Align
from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from .metrics import AccuracyFormatter

console = Console()


def _accuracy_cell(accuracy):
    style = AccuracyFormatter.accuracy_style(accuracy)
    return f"[{style}]{AccuracyFormatter.format_accuracy(accuracy)}[/{style}]"


class ReportTableBuilder:
    """Builds Rich tables for evaluation, attack, FLOPs and dataset reports."""

    @staticmethod
    def create_table(title, columns):
        """
        Create a report table.

        Args:
            title: Table title
            columns: list of (header, justify) pairs

        Returns:
            Rich Table object
        """
        table = Table(
            title=title,
            title_style="bold cyan",
            box=box.ROUNDED,
            show_header=True,
            header_style="bold magenta",
            border_style="blue",
            expand=False
        )
        for header, justify in columns:
            table.add_column(header, justify=justify)
        return table

    @staticmethod
    def eval_table(report):
        """
        Clean accuracy overall, per ISNR and per class.

        Args:
            report: EvalReport

        Returns:
            Rich Table object
        """
        table = ReportTableBuilder.create_table(
            "🎯 Clean accuracy", [("Scope", "left"), ("Key", "left"), ("Accuracy", "right"), ("Samples", "right")])
        for row in report.to_frame().itertuples(index=False):
            table.add_row(row.scope, row.key, _accuracy_cell(row.accuracy), str(row.count))
        return table

    @staticmethod
    def confusion_table(report):
        frame = report.confusion_frame()
        table = ReportTableBuilder.create_table(
            "🔀 Confusion (rows: true class)", [("", "left")] + [(name, "right") for name in frame.columns])
        for name, counts in frame.iterrows():
            cells = [f"[bold]{c}[/bold]" if col == name else (str(c) if c else "[dim]0[/dim]")
                     for col, c in counts.items()]
            table.add_row(name, *cells)
        return table

    @staticmethod
    def attack_table(report):
        """Accuracy per budget, with one column per ISNR when available."""
        isnr_values = sorted(report.per_isnr["isnr_db"].unique()) if report.per_isnr is not None else []
        columns = [("Budget", "left"), ("Overall", "right")] + [(f"{v:g} dB", "right") for v in isnr_values]
        table = ReportTableBuilder.create_table("⚔️  Accuracy under FGSM", columns)
        for row in report.summary.itertuples(index=False):
            cells = [AccuracyFormatter.format_epsilon(row.epsilon), _accuracy_cell(row.accuracy)]
            if isnr_values:
                per = report.per_isnr[report.per_isnr["epsilon"] == row.epsilon].set_index("isnr_db")["accuracy"]
                cells += [_accuracy_cell(per.get(v)) for v in isnr_values]
            table.add_row(*cells)
        return table

    @staticmethod
    def flops_table(row):
        """
        FLOPs per stage and the acceptance band.

        Args:
            row: dict from harness.flops_report
        """
        table = ReportTableBuilder.create_table("🧮 FLOPs per forward pass", [("Stage", "left"), ("FLOPs", "right")])
        for stage, flops in row["breakdown"].items():
            table.add_row(stage, f"{flops:,}")
        status = "[green]in band[/green]" if row["in_band"] else "[red]out of band[/red]"
        table.add_row("[bold]total[/bold]", f"[bold]{row['flops']:,}[/bold]")
        table.add_row("weight-layer MACs", f"{row['weight_macs']:,}")
        table.add_row("band", f"[{row['band_low']:.3g}, {row['band_high']:.3g}] {status}")
        return table

    @staticmethod
    def dataset_table(dataset):
        summary = dataset.summary()
        table = ReportTableBuilder.create_table(
            "📦 Dataset", [("Class", "left"), ("ISNR", "right"), ("Train", "right"), ("Test", "right")])
        for row in summary.itertuples(index=False):
            table.add_row(row[0], f"{row[1]:g} dB", str(row[2]), str(row[3]))
        table.add_row("[bold]total[/bold]", "", f"[bold]{summary['train'].sum()}[/bold]",
                      f"[bold]{summary['test'].sum()}[/bold]")
        return table


class ChartDisplay:
    """Displays training curves using Rich Unicode blocks."""

    BLOCKS = [' ', '▁', '▂', '▃', '▄', '▅', '▆', '▇', '█']

    @staticmethod
    def render_curve(values, height=8):
        """
        Bar rows of a curve, top row first.

        Args:
            values: sequence of numbers, one column each
            height: number of text rows

        Returns:
            List of Rich Text lines
        """
        low, high = min(values), max(values)
        span = high - low
        scaled = [((v - low) / span if span else 0.5) * height for v in values]
        lines = []
        for row in range(height - 1, -1, -1):
            line = Text()
            for val in scaled:
                if val >= row + 1:
                    line.append("█", style="cyan")
                elif val > row:
                    line.append(ChartDisplay.BLOCKS[max(1, min(8, int((val - row) * 8)))], style="cyan")
                else:
                    line.append(" ")
            lines.append(line)
        return lines

    @staticmethod
    def draw_curve(values, title, height=8):
        """Print a curve with its extremes in a panel."""
        if len(values) < 2:
            console.print("[yellow]Not enough epochs to display a curve.[/yellow]")
            return
        body = Text()
        for i, line in enumerate(ChartDisplay.render_curve(values, height)):
            label = f" {max(values):.4f}" if i == 0 else (f" {min(values):.4f}" if i == height - 1 else "")
            body.append_text(line)
            body.append(label + "\n", style="yellow")
        body.append(f"epoch 1 … {len(values)}", style="dim")
        console.print(Panel(body, title=f"[bold]{title}[/bold]", border_style="blue", expand=False))


class UIDisplay:
    """Main UI display manager."""

    @staticmethod
    def show_header():
        """Display application header."""
        console.print("\n[bold cyan]═" * 50 + "[/bold cyan]")
        console.print(Align.center("[bold magenta]📡 Jamming Identification Workbench 📡[/bold magenta]"))
        console.print("[bold cyan]═" * 50 + "[/bold cyan]\n")

    @staticmethod
    def show_table(table):
        console.print(table)

    @staticmethod
    def show_info(message):
        """Display information message."""
        console.print(f"[cyan]{message}[/cyan]")

    @staticmethod
    def show_success(message):
        """Display success message."""
        console.print(f"[green]✅ {message}[/green]")

    @staticmethod
    def show_error(message):
        """Display error message."""
        console.print(f"[red]❌ {message}[/red]")

    @staticmethod
    def show_warning(message):
        """Display warning message."""
        console.print(f"[yellow]⚠️  {message}[/yellow]")
