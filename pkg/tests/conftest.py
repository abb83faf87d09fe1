import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from inkmt.model import ModelConfig, Seq2Seq  # noqa: E402

torch.set_num_threads(1)


def make_model(seed=0, vocab_size=20, d_model=8, layers=1, heads=2, adapters=False, randomize_adapters=False, dtype=torch.float64, max_len=12):
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size, d_model=d_model, n_enc_layers=layers, n_dec_layers=layers, n_heads=heads,
                      d_ffn=2 * d_model, max_len=max_len)
    model = Seq2Seq(cfg).to(dtype)
    if adapters:
        model.add_adapters(seed=seed)
        if randomize_adapters:
            g = torch.Generator().manual_seed(seed + 1000)
            with torch.no_grad():
                for _, p in model.adapter_parameters():
                    p.copy_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def random_pairs(rng, n, vocab_size=20, min_len=1, max_len=6):
    return [
        (rng.integers(4, vocab_size, rng.integers(min_len, max_len + 1)).tolist(),
         rng.integers(4, vocab_size, rng.integers(min_len, max_len + 1)).tolist())
        for _ in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
