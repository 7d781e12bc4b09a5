import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twinpp.model import ModelConfig, Sample

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_sample(rng, cfg: ModelConfig, n_windows=5, ev_len=7, zero_dt=False) -> Sample:
    ts = rng.uniform(-1, 1, size=(n_windows, cfg.ts_feature_dim))
    types = rng.integers(0, cfg.k_sub + 1, size=ev_len)
    dts = np.zeros(ev_len) if zero_dt else rng.uniform(0, 3, size=ev_len)
    sub = int(rng.integers(cfg.k_sub))
    main = cfg.sub_parent[sub] if cfg.sub_parent else int(rng.integers(cfg.k_main))
    return Sample(ts, types, dts, main, sub, float(rng.uniform(0.1, 5.0)))


@pytest.fixture
def tiny_cfg():
    return ModelConfig(k_main=2, k_sub=4, ts_feature_dim=3, hidden_dim=3, embed_dim=2,
                       sub_parent=[0, 1, 1, 1])


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool | None, text: str) -> None:
    tag = "RECORDED" if ok is None else ("PASS" if ok else "FAIL")
    ACCEPTANCE[n] = f"criterion {n}: {tag:8s} {text}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
