import numpy as np
import pytest

from taskprune.model import ModelConfig, Params, init_params


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=128, d_model=16, n_heads=2, d_head=4, d_ff=8, n_enc_layers=1, n_dec_layers=1, max_len=32, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def randomized(config: ModelConfig, seed: int = 1) -> Params:
    """Initial weights with non-trivial biases and gains, so no term is accidentally zero."""
    params = init_params(config)
    rng = np.random.default_rng(seed)
    for name, arr in params.tensors.items():
        if name.endswith((".b1", ".b2")):
            params.tensors[name] = 0.1 * rng.standard_normal(arr.shape)
        elif ".ln_" in name:
            params.tensors[name] = 1.0 + 0.1 * rng.standard_normal(arr.shape)
    return params


@pytest.fixture
def tiny_params() -> Params:
    return randomized(tiny_config())


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """A small suite on disk plus a briefly trained checkpoint (a few seconds)."""
    from taskprune.model import save_checkpoint
    from taskprune.tasks import generate_suite, save_suite
    from taskprune.train import TrainConfig, train_multitask

    root = tmp_path_factory.mktemp("world")
    suite = generate_suite(0, sizes=(80, 20, 20))
    save_suite(suite, root / "data")
    config = ModelConfig(d_model=32, n_heads=2, d_head=8, d_ff=32, n_enc_layers=1, n_dec_layers=1, max_len=64)
    params, _ = train_multitask(
        init_params(config), {n: d.train for n, d in suite.items()}, TrainConfig(steps=150, batch_size=16, lr=3e-3, log_every=0)
    )
    save_checkpoint(params, root / "model.tpck")
    return {"root": root, "data": root / "data", "checkpoint": root / "model.tpck", "params": params, "suite": suite}


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Record one acceptance criterion's outcome for the end-of-run report."""

    def _record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
