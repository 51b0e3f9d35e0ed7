"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
RESULTS = {}


def record(number, title, passed, detail=""):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    RESULTS[number] = line
    print(line)
    return passed
