import numpy as np
import pytest

from drtriage.nn import BackboneConfig, BlockSpec


def small_backbone(side: int = 8) -> BackboneConfig:
    """A backbone small enough for exhaustive finite-difference checks."""
    return BackboneConfig(
        input_side=side,
        stem_channels=4,
        blocks=(
            BlockSpec(8, 4, 3, 1, True, "hard_swish"),
            BlockSpec(12, 6, 3, 2, True, "relu6"),
        ),
        feature_dim=5,
    )


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


class KinkGuard:
    """Records which side of relu6's kinks every input lands on.

    All non-smooth points in the network (relu6, hard-sigmoid, hard-swish)
    go through ``autodiff.relu6``. A finite-difference case is only valid
    when no perturbed evaluation moves an input across a kink, so tests
    wrap their objective with :meth:`track` and discard cases where the
    recorded patterns differ between evaluations.
    """

    def __init__(self, monkeypatch):
        from drtriage import autodiff as ad

        self._orig = ad.relu6
        self._current: list[bytes] = []
        self.patterns: set[tuple[bytes, ...]] = set()

        def wrapped(a):
            d = ad._as_tensor(a).data
            out = self._orig(a)
            self._current.append(np.packbits(d <= 0).tobytes() + np.packbits(d >= 6).tobytes())
            return out

        monkeypatch.setattr(ad, "relu6", wrapped)

    def reset(self):
        self.patterns = set()

    def track(self, f):
        def g(*args):
            self._current = []
            y = f(*args)
            self.patterns.add(tuple(self._current))
            return y

        return g

    @property
    def crossed(self) -> bool:
        return len(self.patterns) > 1


@pytest.fixture
def kinks(monkeypatch):
    return KinkGuard(monkeypatch)


def fd_cases(guard, make_case, n_cases, rng, max_tries=None, eps=1e-3):
    """Run finite-difference checks on ``n_cases`` kink-free random cases.

    ``make_case(rng)`` returns ``(f, inputs)``. Returns (worst error, number
    of discarded cases)."""
    from drtriage.autodiff import finite_diff_check

    worst, kept, dropped = 0.0, 0, 0
    max_tries = max_tries or 4 * n_cases
    while kept < n_cases:
        if kept + dropped >= max_tries:
            raise RuntimeError(f"only {kept} kink-free cases in {max_tries} draws")
        f, inputs = make_case(rng)
        guard.reset()
        err = finite_diff_check(guard.track(f), inputs, eps=eps)
        if guard.crossed:
            dropped += 1
            continue
        kept += 1
        worst = max(worst, err)
    return worst, dropped


CRITERIA: dict[int, tuple[bool, str]] = {}


def verdict(number: int, ok: bool, detail: str) -> None:
    """Record an acceptance outcome, print it, and fail the test if it missed."""
    CRITERIA[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
