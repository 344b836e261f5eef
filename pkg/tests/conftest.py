"""Shared fixtures: a small synthetic dataset, its shape model, and an
analytic ring-cloud builder used across the module test files."""

import numpy as np
import pytest

from ringseg import GenConfig, PointCloud, build_faces, fit_pdm, generate, gpa

# Filled by tests/test_acceptance.py; echoed after the run summary so the
# per-criterion lines are visible without -s.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_ring(t=16, r_inner=5.0, r_outer=9.0, center=(15.5, 15.5),
              span_deg=220.0, rotate_deg=0.0) -> PointCloud:
    """Analytic open-ring cloud: two concentric circular arcs sharing
    angular samples, ordered basal-a to basal-b on both chains."""
    half = t // 2
    span = np.deg2rad(span_deg)
    start = np.deg2rad(90.0 + rotate_deg) - span / 2.0
    phi = start + np.linspace(0.0, span, half)
    ray = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    c = np.asarray(center, dtype=float)
    return PointCloud.from_chains(c + r_inner * ray, c + r_outer * ray)


@pytest.fixture(scope="session")
def rings20():
    return generate(GenConfig(seed=42), 20)


@pytest.fixture(scope="session")
def canon20(rings20):
    mean, aligned, _ = gpa([s.points for s in rings20])
    return mean, aligned


@pytest.fixture(scope="session")
def model20(canon20):
    _, aligned = canon20
    return fit_pdm(aligned, 10)


@pytest.fixture(scope="session")
def faces88():
    return build_faces(88)
