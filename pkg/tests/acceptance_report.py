"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

_results: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    _results[number] = line
    print(line)


def lines() -> list[str]:
    return [_results[k] for k in sorted(_results)]
