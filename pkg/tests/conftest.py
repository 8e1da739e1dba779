import itertools
import random

import pytest

from trajoverlap.core import Trajectory


def make_traj(tid, locs, user="u", t0=0, step=60):
    return Trajectory.from_pairs(user, tid, [(t0 + i * step, l) for i, l in enumerate(locs)])


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def brute_lcs(p, r):
    """Longest common subsequence by enumerating every subsequence of r."""
    best = 0
    for mask in range(1 << len(r)):
        sub = [r[i] for i in range(len(r)) if mask >> i & 1]
        if len(sub) > best and is_subsequence(sub, p):
            best = len(sub)
    return best


def naive_suffix(r, p):
    """Common suffix length by comparing reversed copies element by element."""
    rr, pp = list(reversed(r)), list(reversed(p))
    count = 0
    for k in range(min(len(rr), len(pp))):
        if rr[k] != pp[k]:
            break
        count += 1
    return count


def random_corpus(rng, n_train, n_test, alphabet, max_len):
    train = [make_traj(i, [rng.randrange(alphabet) for _ in range(rng.randint(1, max_len))])
             for i in range(n_train)]
    test = [make_traj(1000 + i, [rng.randrange(alphabet) for _ in range(rng.randint(1, max_len))])
            for i in range(n_test)]
    return train, test


@pytest.fixture
def rng():
    return random.Random(12345)


# --------------------------------------------------------------------------
# acceptance criteria: one PASS/FAIL/SKIP line per criterion in the summary

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.skipped and not rep.failed):
        return
    number, title = mark.args
    status = "SKIP" if rep.skipped else ("FAIL" if rep.failed else "PASS")
    detail = ""
    if rep.skipped and isinstance(rep.longrepr, tuple):
        detail = rep.longrepr[2].removeprefix("Skipped: ")
    detail = getattr(item, "criterion_detail", "") or detail
    prev = _CRITERIA.get(number)
    if prev is None or prev[1] == "PASS":  # a later FAIL/SKIP phase overrides
        _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status:<4} {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
