import numpy as np
import pytest


def naive_dft2(x):
    """O(N^4) unitary 2-D DFT by direct summation."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            s = 0j
            for r in range(h):
                for c in range(w):
                    s += x[r, c] * np.exp(-2j * np.pi * (u * r / h + v * c / w))
            out[u, v] = s
    return out / np.sqrt(h * w)


def random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def directional_gradcheck(build, inputs, dtype, seed=0, h=1e-5):
    """Worst relative error between tape gradients and central differences.

    ``build(tape, vars)`` must return an output variable.  The scalar under test
    is ``sum(out * R)`` for a fixed random ``R``.  The analytic gradient is taken
    in ``dtype``; the finite differences always run in float64, one random
    direction per input.
    """
    from ptychodiff.nn import tape as T

    rng = np.random.default_rng(seed)

    def scalar(xs):
        tp = T.Tape()
        out = build(tp, [tp.leaf(x) for x in xs])
        return out, tp

    xs64 = [np.asarray(x, dtype=np.float64) for x in inputs]
    out, _ = scalar(xs64)
    R = rng.standard_normal(out.shape)

    tp = T.Tape()
    leaves = [tp.leaf(x.astype(dtype)) for x in xs64]
    out = build(tp, leaves)
    tp.backward(out, R.astype(dtype))
    worst = 0.0
    for k, x in enumerate(xs64):
        d = rng.standard_normal(x.shape)
        analytic = float(np.sum(tp.grad(leaves[k]).astype(np.float64) * d))
        plus = [v + h * d if i == k else v for i, v in enumerate(xs64)]
        minus = [v - h * d if i == k else v for i, v in enumerate(xs64)]
        fp = float(np.sum(scalar(plus)[0].value * R))
        fm = float(np.sum(scalar(minus)[0].value * R))
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12))
    return worst


def pytest_configure(config):
    config._criteria = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``with criterion(3, "autodiff exactness") as c: ...; c.check(ok, detail)``.
    An exception inside the block records a FAIL with the exception text.
    """
    import contextlib

    class Line:
        ok = False
        detail = "not evaluated"

        def check(self, ok, detail):
            self.ok, self.detail = bool(ok), detail

    @contextlib.contextmanager
    def ctx(number, name):
        line = Line()
        try:
            yield line
        except BaseException as exc:
            line.ok, line.detail = False, f"{type(exc).__name__}: {exc}"
            raise
        finally:
            status = "PASS" if line.ok else "FAIL"
            request.config._criteria[number] = f"[{number:2d}] {status}  {name}: {line.detail}"
        assert line.ok, line.detail

    return ctx
