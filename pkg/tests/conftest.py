import numpy as np
import pytest

from qalora.adapter import AdapterPair, QuantLinearLayer
from qalora.quant import quantize_groupwise


def random_layer(rng, d_in, d_out, bits, group_size, rank, scale=None, adapter_std=0.3):
    """Quantized layer with a random, non-trivial adapter attached."""
    w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
    base = quantize_groupwise(w, bits, group_size)
    groups = d_in // group_size
    A = rng.uniform(-1.0, 1.0, size=(groups, rank)) / np.sqrt(groups)
    B = rng.normal(0.0, adapter_std, size=(rank, d_out))
    s = 2.0 / rank if scale is None else scale
    return QuantLinearLayer(base, AdapterPair(A, B, s))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
