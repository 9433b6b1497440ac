import numpy as np
import pytest

from dubeval.data_model import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_manifest():
    """A tiny dataset shared by read-only tests."""
    spec = SyntheticSpec(n_clips=24, rated_fraction=0.5, seed=7)
    manifest, truth = generate_synthetic(spec)
    return manifest, truth


def rating_matrix_from(manifest):
    """raters x items score array (NaN for missing) from a manifest."""
    rated = manifest.rated_records()
    rater_ids = sorted({s.rater_id for r in rated for s in r.human_ratings})
    out = np.full((len(rater_ids), len(rated)), np.nan)
    idx = {r: i for i, r in enumerate(rater_ids)}
    for j, rec in enumerate(rated):
        for s in rec.human_ratings:
            out[idx[s.rater_id], j] = s.score
    return out


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One summary line per acceptance check, pass or fail."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in name:
                tag = name.split("::test_criterion_")[1]
                num, _, desc = tag.partition("_")
                status = "PASS" if outcome == "passed" else "FAIL"
                lines[int(num)] = f"criterion {int(num):2d} [{desc}]: {status}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
