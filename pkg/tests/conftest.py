"""Shared fixtures and the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np
import pytest

from siarank import tokenizer as tok
from siarank.autodiff import Tape, Tensor
from siarank.data import SynthConfig, generate_synthetic
from siarank.encoder import EncoderConfig


def fd_gradcheck(forward, tensors, rel_tol: float = 1e-4, h: float = 1e-5,
                 max_coords: int = 8, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    ``forward`` rebuilds the scalar loss from the (float64) ``tensors``.
    Checks up to ``max_coords`` randomly sampled coordinates per tensor and
    returns the worst relative error seen, asserting each is below
    ``rel_tol``.  Relative error uses max(|analytic|, |numeric|, 1e-3) as
    the denominator so FD noise on near-zero gradients does not dominate.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        assert t.data.dtype == np.float64, "gradient oracle runs in double precision"
    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1) if t.grad is not None else np.zeros_like(flat)
        count = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(forward().data)
            flat[i] = orig - h
            f_minus = float(forward().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grad[i])
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-3)
            assert rel < rel_tol, (
                f"gradient mismatch at coord {i}: analytic {analytic!r}, "
                f"numeric {numeric!r}, rel {rel:.3e}"
            )
            worst = max(worst, rel)
    for t in tensors:
        t.grad = None
    return worst


def to_double(weights: dict[str, Tensor]) -> dict[str, Tensor]:
    return {
        k: Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad)
        for k, t in weights.items()
    }


TINY_ENCODER = EncoderConfig(layers=1, hidden=8, heads=2, ff_dim=12, vocab_size=64,
                             max_pos=24, dropout_p=0.1)


@pytest.fixture(scope="session")
def tiny_synth():
    """Small deterministic splits shared by unit tests."""
    cfg = SynthConfig(vocab_size=120, n_queries=10, docs_per_query=12,
                      relevant_fraction=0.35, noise=0.0, seed=11)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_synth):
    train, _, _ = tiny_synth
    corpus = [r.query for r in train.records] + [r.doc_repr for r in train.records]
    return tok.train_vocab(corpus, max_size=600, min_freq=2)


@pytest.fixture(scope="session")
def tiny_cfg(tiny_vocab):
    """TINY_ENCODER sized to the shared vocabulary."""
    return EncoderConfig(layers=1, hidden=8, heads=2, ff_dim=12,
                         vocab_size=len(tiny_vocab), max_pos=24, dropout_p=0.1)


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion"):
        return
    label = name.removeprefix("test_").replace("_", " ")
    if report.passed:
        print(f"\nACCEPTANCE {label}: PASS", flush=True)
    elif report.failed:
        print(f"\nACCEPTANCE {label}: FAIL", flush=True)
    elif report.skipped:
        print(f"\nACCEPTANCE {label}: SKIPPED", flush=True)
