from contextlib import contextmanager

import pytest

from paasim.cluster import Cluster, ClusterOptions, Mode


@pytest.fixture
def cloud():
    def make(workers=5, **kw):
        c = Cluster(ClusterOptions(mode=Mode.CLOUD, **kw))
        c.deploy(workers)
        return c
    return make


@pytest.fixture
def worker_mode():
    def make(workers=5, **kw):
        c = Cluster(ClusterOptions(mode=Mode.WORKER, **kw))
        c.deploy(workers)
        return c
    return make


# ─── acceptance reporting ────────────────────────────────────────────────────

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as detail:`` records PASS unless the block raises."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    @contextmanager
    def check(number, title):
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            results[number] = (title, False, f"{type(exc).__name__}: {exc}".splitlines()[0])
            print(f"FAIL {number}: {title}")
            raise
        results[number] = (title, True, ", ".join(f"{k}={v}" for k, v in detail.items()))
        print(f"PASS {number}: {title}")
    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
