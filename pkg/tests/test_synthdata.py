import numpy as np
import pytest
from hypothesis import given, strategies as st

from fgn import io as fio
from fgn import rng as frng
from fgn import synthdata as sd


def reference_integrate(cfg, x0, n_frames, rng):
    """Plain numpy RK4 with the same noise draws as ``integrate``."""
    x = np.array(x0, dtype=float)
    out = [x.copy()]
    amp = cfg.noise_std * np.sqrt(cfg.dt_integrator)
    for _ in range(1, n_frames):
        noise = rng.standard_normal((cfg.substeps, 1, cfg.K))
        for s in range(cfg.substeps):
            x = sd.rk4_step(x, cfg.dt_integrator, cfg.F) + amp * noise[s, 0]
        out.append(x.copy())
    return np.array(out)


def test_system_config_validation():
    with pytest.raises(ValueError):
        sd.SystemConfig(noise_std=-1)
    with pytest.raises(ValueError):
        sd.SystemConfig(dt_frame=0.015)
    with pytest.raises(ValueError):
        sd.SystemConfig(dt_frame=0.005)
    assert sd.SystemConfig().substeps == 10


def test_tendency_formula_by_hand():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    # k=0: (x1 - x3) * x4 - x0 + F = (2 - 4) * 5 - 1 + 8
    assert sd.tendency(x, 8.0)[0] == -3.0
    # k=2: (x3 - x0) * x1 - x2 + F = (4 - 1) * 2 - 3 + 8
    assert sd.tendency(x, 8.0)[2] == 11.0


def test_fixed_point_is_constant():
    cfg = sd.SystemConfig(noise_std=0.0)
    traj = sd.integrate(cfg, np.full(40, 8.0), 50)
    assert np.array_equal(traj, np.full((50, 40), 8.0))


def test_deterministic_runs_are_bitwise_identical():
    cfg = sd.SystemConfig(noise_std=0.0)
    x0 = 8.0 + 0.01 * np.random.default_rng(0).standard_normal(40)
    assert np.array_equal(sd.integrate(cfg, x0, 200), sd.integrate(cfg, x0, 200))


def test_compiled_integrator_matches_numpy_reference():
    cfg = sd.SystemConfig(K=12)
    x0 = 8.0 + np.random.default_rng(1).standard_normal(12)
    fast = sd.integrate(cfg, x0, 40, frng.stream(3, "f"))
    ref = reference_integrate(cfg, x0, 40, frng.stream(3, "f"))
    assert np.array_equal(fast, ref)


def test_batched_integration_matches_rows():
    cfg = sd.SystemConfig(noise_std=0.0)
    x0 = 8.0 + np.random.default_rng(2).standard_normal((3, 40))
    batch = sd.integrate(cfg, x0, 30)
    for i in range(3):
        assert np.array_equal(batch[:, i], sd.integrate(cfg, x0[i], 30))


def test_non_finite_start_and_blow_up():
    cfg = sd.SystemConfig()
    with pytest.raises(ValueError):
        sd.integrate(cfg, np.full(40, np.nan), 3)
    with pytest.raises(sd.IntegrationDiverged) as info:
        sd.integrate(sd.SystemConfig(noise_std=0.0), np.full(40, 1e5) * (-1) ** np.arange(40), 5)
    assert info.value.step >= 1


def test_climatological_std_and_decorrelation():
    # long-run oracle: std 3.637 over 10^4 frames; two forcing seeds from the
    # same start decorrelate (corr < 0.5) at frame 25
    cfg = sd.SystemConfig()
    ds = sd.make_dataset(cfg, 10000)
    assert ds.frames.std() == pytest.approx(3.6371614167, abs=1e-9)
    assert abs(ds.frames.std() - 3.6) <= 0.5
    assert sd.decorrelation_frames(cfg, ds.frames[0]) == 25


def test_split_arithmetic():
    assert sd.split_bounds(10000, (0.8, 0.1, 0.1)) == {"train": (0, 8000), "valid": (8000, 9000),
                                                        "test": (9000, 10000)}
    with pytest.raises(ValueError, match="split_fractions"):
        sd.split_bounds(100, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError, match="too small"):
        sd.split_bounds(20, (0.8, 0.1, 0.1))


@given(n=st.integers(30, 5000), a=st.floats(0.1, 0.8), b=st.floats(0.05, 0.15))
def test_splits_contiguous_and_disjoint(n, a, b):
    fr = (a, b, 1.0 - a - b)
    try:
        bounds = sd.split_bounds(n, fr)
    except ValueError:
        return
    edges = [bounds[s] for s in sd.SPLITS]
    assert edges[0][0] == 0 and edges[-1][1] == n
    assert all(edges[i][1] == edges[i + 1][0] for i in range(2))


def test_dataset_stats_from_train_only():
    ds = sd.make_dataset(sd.SystemConfig(), 3000)
    train = ds.split("train")
    z = ds.normalize(train)
    assert abs(z.mean()) < 1e-10 and abs(z.std() - 1) < 1e-10
    assert ds.stats.residual_std == np.diff(train, axis=0).std()
    assert ds.stats.mean != ds.frames.mean()


def test_burn_in_is_enforced():
    with pytest.raises(ValueError):
        sd.make_dataset(sd.SystemConfig(), 3000, burn_in=10)


def test_times_account_for_burn_in():
    ds = sd.make_dataset(sd.SystemConfig(), 100, burn_in=1000)
    assert ds.times[0] == pytest.approx(100.0)
    assert ds.times[1] - ds.times[0] == pytest.approx(0.1)


def test_save_load_round_trip_and_header(tmp_path):
    ds = sd.make_dataset(sd.SystemConfig(K=8), 200)
    path = tmp_path / "d.fgn"
    sd.save(ds, path)
    assert sd.load(path) == ds
    header = sd.read_header(path)
    assert header["T"] == 200 and header["K"] == 8 and header["system"]["K"] == 8
    assert "frames" not in header


def test_tampering_detected(tmp_path):
    ds = sd.make_dataset(sd.SystemConfig(K=8), 200)
    path = tmp_path / "d.fgn"
    sd.save(ds, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(fio.CorruptFileError):
        sd.load(path)
    path.write_bytes(bytes(raw[:100]))
    with pytest.raises(fio.CorruptFileError):
        sd.load(path)


def test_stats_hash_checked(tmp_path):
    ds = sd.make_dataset(sd.SystemConfig(K=8), 200)
    header = sd._header(ds)
    header["stats"]["std"] = 99.0
    path = tmp_path / "d.fgn"
    fio.write(path, sd.DATASET_MAGIC, header, {"frames": ds.frames})
    with pytest.raises(fio.CorruptFileError, match="stats"):
        sd.load(path)


def test_climatology_run_is_independent_of_dataset():
    cfg = sd.SystemConfig()
    clim = sd.climatology_run(cfg, 500)
    ds = sd.make_dataset(cfg, 500)
    assert clim.shape == (500, 40)
    assert not np.allclose(clim[:10], ds.frames[:10])
    assert np.array_equal(clim, sd.climatology_run(cfg, 500))
