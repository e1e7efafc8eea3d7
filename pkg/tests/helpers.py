"""Small builders shared by the tests."""

import numpy as np

from cmda.geometry import Box7


def random_box(rng, spread=3.0) -> Box7:
    return Box7(rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-0.5, 0.5),
                rng.uniform(0.5, 4.0), rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.0), rng.uniform(-np.pi, np.pi))


def overlapping_pair(rng) -> tuple[Box7, Box7]:
    """Two random boxes whose centres are close enough to usually overlap."""
    a = random_box(rng, 1.0)
    b = random_box(rng, 1.0)
    return a, b


ACCEPTANCE: list[str] = []  # one line per acceptance criterion, printed in the terminal summary


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return line
