import numpy as np
import pytest

from tea.nn import (TRAIN_STATS, AvgPool2, BatchNorm, Conv3x3, Dense, Flatten, GroupNorm, ReLU,
                    _forward_layer, init_model)


def conv_model(seed=0, dtype=np.float64, norm2="group"):
    """Every layer kind in one small network."""
    layers = [Conv3x3(1, 4), BatchNorm(4), ReLU(), AvgPool2(), Conv3x3(4, 4),
              GroupNorm(4, 2) if norm2 == "group" else BatchNorm(4), ReLU(), Flatten(),
              Dense(16, 3)]
    return init_model(layers, (1, 4, 4), np.random.default_rng(seed), dtype)


def mlp_model(seed=0, dtype=np.float64, classes=3):
    layers = [Dense(2, 6), BatchNorm(6), ReLU(), Dense(6, classes)]
    return init_model(layers, (2,), np.random.default_rng(seed), dtype)


def perturb_norm(model, seed):
    """Random non-trivial gamma/beta so norm-parameter gradients are exercised."""
    g = np.random.default_rng(seed + 1000)
    upd = {}
    for k in model.norm_param_names():
        base = 1.0 if k.endswith("gamma") else 0.0
        upd[k] = base + 0.3 * g.standard_normal(model.params[k].shape)
    return model.with_params(upd)


def relu_margin(model, x, stats_mode=TRAIN_STATS):
    """Smallest |pre-activation| at any ReLU; finite differences are invalid near 0."""
    margin = np.inf
    for i, layer in enumerate(model.layers):
        if layer.kind == "ReLU":
            margin = min(margin, float(np.min(np.abs(x))))
        x, _ = _forward_layer(model, i, layer, x, stats_mode)
    return margin


@pytest.fixture
def tmp_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
