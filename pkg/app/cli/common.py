from typing import Iterable, List

import numpy as np

from app.schemas.losses import LossReport, format_value


def report_lines(report: LossReport, prefix: str = "") -> List[str]:
    return [f"{prefix}{line}" for line in report.to_lines()]


def value_line(name: str, value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return f"{name}={int(value)}"
    if isinstance(value, (int, np.integer)):
        return f"{name}={int(value)}"
    return f"{name}={format_value(value)}"


def joined_line(name: str, values: Iterable[int]) -> str:
    return f"{name}=" + ",".join(str(int(v)) for v in values)
