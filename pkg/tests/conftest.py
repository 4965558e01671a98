import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def small_dataset():
    from topdown_hoi.data import DataConfig, generate_dataset
    return generate_dataset(DataConfig(n_train=12, n_test=6))


@pytest.fixture(scope="session")
def toy_run():
    """The reference toy run: dataset, untrained report, trained model and record."""
    import time
    from topdown_hoi.data import generate_dataset
    from topdown_hoi.train import RunConfig, build_model, evaluate, run_training
    cfg = RunConfig.toy()
    ds = generate_dataset(cfg.data_config())
    base = evaluate(build_model(ds, cfg), ds.test, ds.split, cfg.top_n)
    t0 = time.perf_counter()
    model, rec = run_training(ds, ds.split, cfg)
    trained = evaluate(model, ds.test, ds.split, cfg.top_n)
    return {"cfg": cfg, "ds": ds, "base": base, "model": model, "record": rec, "trained": trained,
            "seconds": time.perf_counter() - t0}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
