import numpy as np
import pytest

from countlab.nn import TransformerConfig, TransformerModel, expected_shapes


def random_model(rng, *, layers=2, heads=2, head_dim=3, vocab=5, context=12,
                 layer_norm=False, positional=False, mlp_hidden=7, scale=0.7, bidirectional=False):
    """Random dense model with a two-map MLP in every layer."""
    cfg = TransformerConfig(layers, heads, head_dim, heads * head_dim, vocab, context,
                            use_layer_norm=layer_norm, use_positional=positional,
                            bidirectional_layers=tuple(range(layers)) if bidirectional else ())
    D = cfg.model_dim
    params = {k: rng.normal(0, scale, size=s) for k, s in expected_shapes(cfg).items()}
    for k in params:
        if k.endswith(".g"):
            params[k] = 1.0 + 0.3 * rng.normal(size=params[k].shape)
    for i in range(layers):
        params[f"l{i}.mlp.0.w"] = rng.normal(0, scale, size=(D, mlp_hidden))
        params[f"l{i}.mlp.0.b"] = rng.normal(0, scale, size=mlp_hidden)
        params[f"l{i}.mlp.1.w"] = rng.normal(0, scale, size=(mlp_hidden, D))
        params[f"l{i}.mlp.1.b"] = rng.normal(0, scale, size=D)
    return TransformerModel(cfg, params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"acceptance #{number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("#")[1].split(":")[0])):
            terminalreporter.write_line(line)
