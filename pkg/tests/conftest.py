import numpy as np
import pytest

from hafed.nn import ArchSpec, HAFedformer
from hafed.samples import AlignedSample, SeqSample


@pytest.fixture
def tiny_arch():
    return ArchSpec(modalities=("L", "A", "V"), input_dims=(3, 2, 4), t_min=1, t_max=5,
                    d_model=4, n_heads=2, n_layers=1, ffn_dim=6, lstm_hidden=3, dense_widths=(4,))


def random_aligned(arch, n, rng, p_missing=0.0):
    out = []
    for i in range(n):
        xs = {}
        for m, d in zip(arch.modalities, arch.input_dims):
            if xs and rng.random() < p_missing:
                continue
            xs[m] = rng.normal(size=(int(rng.integers(arch.t_min, arch.t_max + 1)), d))
        out.append(AlignedSample(xs, float(rng.uniform(-3, 3)), i))
    return out


def random_seq(arch, m, n, rng):
    d = arch.dim(m)
    return [SeqSample(rng.normal(size=(int(rng.integers(arch.t_min, arch.t_max + 1)), d)), m,
                      float(rng.uniform(-3, 3))) for _ in range(n)]


def finite_difference_errors(model, params, batch, h=1e-5):
    """Per-coordinate relative error between backprop and central differences.

    The denominator is floored at 1e-6 * max(1, |loss|): below that, central-difference
    round-off (about machine eps * |loss| / h) is comparable to the gradient itself.
    """
    loss, grads = model.loss_and_grad(params, batch)
    flat, g = params.flat(), grads.flat()
    num = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        num[i] = (model.loss(params.with_flat(flat + e), batch)
                  - model.loss(params.with_flat(flat - e), batch)) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-6 * max(1.0, abs(float(loss))))
    return np.abs(num - g) / denom


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
