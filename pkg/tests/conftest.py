import os

import numpy as np
import pytest
from hypothesis import settings

from edgequant.builders import build_architecture
from edgequant.datakit import SplitSpec, split, synth_generate
from edgequant.graph import Graph
from edgequant.trainer import TrainConfig, train

# reproducible property tests by default; HYPOTHESIS_PROFILE=explore for fresh draws
settings.register_profile("ci", derandomize=True, deadline=None)
settings.register_profile("explore", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def logits_graph(g: Graph) -> Graph:
    """Same graph with the final softmax removed, so runs return logits."""
    out = g.copy()
    soft = out.node(out.outputs[0])
    assert soft.op == "softmax"
    out.nodes = [n for n in out.nodes if n.id != soft.id]
    out.outputs = [soft.inputs[0]]
    return out


@pytest.fixture(scope="session")
def synth_splits():
    ds = synth_generate(4, 150, (32, 32), 0.1, seed=3)
    return split(ds, SplitSpec(seed=3))


@pytest.fixture(scope="session")
def trained_tiny(synth_splits):
    """A small tiny_cnn trained briefly on synthetic data (shared, read-only)."""
    tr, va, _ = synth_splits
    g = build_architecture("tiny_cnn", 4, init_seed=0)
    out, _ = train(g, tr, va, TrainConfig(epochs=6, seed=0))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion (echoed in the summary)."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        lines.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
