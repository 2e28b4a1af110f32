import importlib.util
from pathlib import Path

import pytest

from ddnn import kernels


def _load():
    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_benchmark_times_both_backends(capsys):
    bench = _load()
    before = kernels.get_backend()
    table = bench.run(repeat=1, batch=2)
    assert kernels.get_backend() == before
    assert set(table) == {
        "conv3x3_forward", "conv3x3_backward_input", "conv3x3_backward_weight",
        "maxpool3x3s2_forward", "maxpool3x3s2_backward",
    }
    for t in table.values():
        assert set(t) == set(kernels.BACKENDS) and all(v > 0 for v in t.values())
    bench.main(["--repeat", "1", "--batch", "1"])
    assert "speedup" in capsys.readouterr().out


def test_env_flag_selects_backend(monkeypatch):
    monkeypatch.setenv("DDNN_BACKEND", "numpy")
    assert kernels._default_backend() == "numpy"
    monkeypatch.delenv("DDNN_BACKEND")
    assert kernels._default_backend() == "numba"


@pytest.mark.parametrize("name", ["numpy", "numba"])
def test_whole_model_agrees_across_backends(name):
    import numpy as np

    from ddnn.model import DdnnModel
    from ddnn.tensor import no_grad

    x = np.random.default_rng(0).uniform(-1, 1, (2, 6, 3, 32, 32)).astype(np.float32)
    prev = kernels.get_backend()
    try:
        kernels.set_backend("numpy")
        with no_grad():
            ref = DdnnModel(rng=np.random.default_rng(1))(x, mode="infer")[1].data
        kernels.set_backend(name)
        with no_grad():
            got = DdnnModel(rng=np.random.default_rng(1))(x, mode="infer")[1].data
    finally:
        kernels.set_backend(prev)
    np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-4)
