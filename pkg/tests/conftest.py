import numpy as np
import pytest


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rigid(rng, scale=1.0):
    T = np.eye(4)
    T[:3, :3] = random_rotation(rng)
    T[:3, 3] = rng.uniform(-scale, scale, 3)
    return T


def rot_z(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    return T


def brute_rle(bits):
    """Column-major run lengths by walking pixels one at a time."""
    h, w = len(bits), len(bits[0])
    counts, cur, run = [], 0, 0
    for col in range(w):
        for row in range(h):
            v = 1 if bits[row][col] else 0
            if v == cur:
                run += 1
            else:
                counts.append(run)
                cur, run = v, 1
    counts.append(run)
    return counts


def brute_iou(a, b):
    inter = union = 0
    for ra, rb in zip(a, b):
        for x, y in zip(ra, rb):
            inter += bool(x) and bool(y)
            union += bool(x) or bool(y)
    return inter, union


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or getattr(rep, "when", "call") != "call":
                continue
            name = nodeid.split("::test_criterion_", 1)[1]
            num, _, label = name.partition("_")
            lines.append((int(num), f"criterion {int(num):2d} {label.replace('_', ' '):<32} {'PASS' if outcome == 'passed' else 'FAIL'}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
