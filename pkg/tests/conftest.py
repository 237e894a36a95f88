import numpy as np
import pytest

from helpers import simulate_ratings
from lexsel.data import CountsTable, save_counts, save_ratings

SMALL_CONFIG = """\
out_dir: out
paths: {{ratings: ratings.tsv, counts: counts.tsv}}
grids: {{freq: [0, 1], k: [2], alpha: [0.1, 1, 10]}}
models: {{freq: [dc, bnb, pmi, g], factor: [lda, lfa, glove]}}
cv: {{outer: 4, inner: 3, replicates: 99}}
{extra}
"""


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Synthetic ratings and counts on disk: 24 verbs x 8 frames, 3 missing
    from the counts, and one counts-only verb."""
    d = tmp_path_factory.mktemp("ws")
    rt, a, _ = simulate_ratings(0, P=60, V=24, F=8, per_item=5, design="lists")
    save_ratings(rt, d / "ratings.tsv")
    rng = np.random.default_rng(0)
    cnt = rng.poisson(np.exp(a / 2 + 1)).astype(int)
    cnt[:, 0] += 1
    verbs = [f"v{i}" for i in range(24)]
    extra = rng.poisson(3, (1, 8)) + 1
    ct = CountsTable.from_dense(verbs[3:] + ["only_in_counts"], [f"f{j}" for j in range(8)],
                                np.vstack([cnt[3:], extra]))
    save_counts(ct, d / "counts.tsv")
    return d


def write_config(d, name="cfg.yaml", extra=""):
    p = d / name
    p.write_text(SMALL_CONFIG.format(extra=extra), encoding="utf-8")
    return p


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {ACCEPTANCE[n]}")
