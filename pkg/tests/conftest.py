import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_affine(p, H, W):
    """Explicit Translation @ Rotation @ Shearing @ Scaling."""
    T = np.array([[1.0, 0, p.t_x * H], [0, 1.0, p.t_y * W], [0, 0, 1.0]])
    c, s = np.cos(p.theta), np.sin(p.theta)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    Sh = np.array([[1.0, p.sh_x, 0], [p.sh_y, 1.0, 0], [0, 0, 1.0]])
    S = np.diag([p.s_x, p.s_y, 1.0])
    return T @ R @ Sh @ S


ACCEPTANCE = {}  # criterion number -> (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
