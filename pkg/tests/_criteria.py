"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: list[str] = []


def report(number: str, passed: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    RESULTS.append(line)
    print(line)
