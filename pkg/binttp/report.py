"""
人类可读报表：rich 表格渲染为纯文本（无颜色、固定宽度、无时间戳）
"""

from __future__ import annotations

import io
from typing import Iterable, Sequence

from rich import box
from rich.console import Console
from rich.table import Table

REPORT_WIDTH = 110


def make_table(title: str, headers: Sequence[str], rows: Iterable[Sequence[object]]) -> Table:
    table = Table(title=title, box=box.ASCII2, show_lines=False)
    for index, header in enumerate(headers):
        table.add_column(header, justify="left" if index == 0 else "right" if header.endswith("%") else "left")
    for row in rows:
        table.add_row(*("" if cell is None else str(cell) for cell in row))
    return table


def render_text(*blocks: Table | str, width: int = REPORT_WIDTH) -> str:
    """渲染到内存；同样的输入得到同样的字节"""
    buffer = io.StringIO()
    console = Console(
        file=buffer,
        width=width,
        color_system=None,
        force_terminal=False,
        no_color=True,
        highlight=False,
        emoji=False,
        markup=False,
        log_time=False,
        log_path=False,
    )
    for block in blocks:
        console.print(block)
    return buffer.getvalue()
