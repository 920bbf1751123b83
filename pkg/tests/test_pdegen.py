import numpy as np
import pytest

from wfm.field import Standardizer, standardize
from wfm.pdegen import (
    HeatSpec,
    ReactionDiffusionSpec,
    bandlimited_noise,
    grayscott_trajectory,
    heat_trajectory,
    load_dataset,
    make_dataset,
    split_counts,
)


def mode(grid, k, l):
    H, W = grid
    y, x = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    return np.cos(2 * np.pi * (k * x + l * y)) + 0.5 * np.sin(2 * np.pi * (k * x + l * y))


def test_single_mode_decay():
    nu, dt = 2e-3, 0.05
    tr = heat_trajectory(HeatSpec(grid=(16, 16), nu=nu, dt=dt, n_steps=2), initial=mode((16, 16), 2, 3))
    factor = np.exp(-nu * (2 * np.pi) ** 2 * (2**2 + 3**2) * dt)
    assert np.max(np.abs(tr.frames[1, 0] - factor * tr.frames[0, 0])) < 1e-12
    assert tr.params.values == (nu,) and tr.frames.shape == (2, 1, 16, 16)


def test_every_mode_on_8x8():
    nu, dt = 1e-2, 0.1
    for k in range(-3, 5):
        for l in range(-3, 5):
            u0 = mode((8, 8), k, l)
            tr = heat_trajectory(HeatSpec(grid=(8, 8), nu=nu, dt=dt, n_steps=3), initial=u0)
            # aliased wavenumber on the discrete grid
            ka, la = ((k + 4) % 8) - 4, ((l + 4) % 8) - 4
            if 4 in (abs(k), abs(l)):
                ka, la = min(abs(k), 8 - abs(k)), min(abs(l), 8 - abs(l))
            f = np.exp(-nu * (2 * np.pi) ** 2 * (ka**2 + la**2) * dt)
            for t in range(3):
                assert np.max(np.abs(tr.frames[t, 0] - f**t * u0)) < 1e-12, (k, l, t)


def test_heat_zero_diffusivity_and_mean():
    still = heat_trajectory(HeatSpec(grid=(16, 16), nu=0.0, n_steps=5, seed=3))
    assert np.max(np.abs(still.frames - still.frames[0])) < 1e-14
    u0 = bandlimited_noise((16, 16), 1) + 2.5
    tr = heat_trajectory(HeatSpec(grid=(16, 16), nu=5e-3, n_steps=20), initial=u0)
    means = tr.frames.mean(axis=(1, 2, 3))
    assert np.max(np.abs(means - means[0])) < 1e-12


def test_heat_fd_integrator():
    spec = HeatSpec(grid=(16, 16), nu=1e-3, dt=0.05, n_steps=10, integrator="fd")
    fd = heat_trajectory(spec)
    exact = heat_trajectory(HeatSpec(grid=(16, 16), nu=1e-3, dt=0.05, n_steps=10))
    assert np.max(np.abs(fd.frames - exact.frames)) < 1e-2
    with pytest.raises(ValueError, match="nu"):
        HeatSpec(grid=(32, 32), nu=1.0, dt=0.01, integrator="fd")


def test_heat_errors():
    with pytest.raises(ValueError):
        HeatSpec(grid=(15, 16))
    with pytest.raises(ValueError):
        HeatSpec(nu=-1.0)
    with pytest.raises(ValueError):
        heat_trajectory(HeatSpec(grid=(16, 16)), initial=np.zeros((8, 8)))


def test_bandlimited_noise():
    n = bandlimited_noise((32, 32), 4)
    assert abs(n.mean()) < 1e-12 and n.std() == pytest.approx(1.0)
    spec = np.abs(np.fft.fft2(n))
    k = np.fft.fftfreq(32, 1 / 32)
    kk = np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)
    assert np.max(spec[kk > 4]) < 1e-10
    assert np.array_equal(n, bandlimited_noise((32, 32), 4))


def test_grayscott_fixed_point():
    state = np.stack([np.ones((16, 16)), np.zeros((16, 16))])
    tr = grayscott_trajectory(ReactionDiffusionSpec(grid=(16, 16), n_steps=6), initial=state)
    assert np.array_equal(tr.frames, np.broadcast_to(state, tr.frames.shape))
    assert tr.params.values == (0.030, 0.060)


@pytest.mark.parametrize("active", [0, 1])
def test_grayscott_diffusion_conserves_mean(active):
    # with one channel identically zero the u v^2 coupling vanishes; F = k = 0 removes the rest
    state = np.zeros((2, 16, 16))
    state[active] = bandlimited_noise((16, 16), 2) + 1.0
    tr = grayscott_trajectory(ReactionDiffusionSpec(grid=(16, 16), feed=0.0, kill=0.0, n_steps=8), initial=state)
    means = tr.frames.mean(axis=(2, 3))
    assert np.max(np.abs(means - means[0])) < 1e-10
    assert np.all(tr.frames[:, 1 - active] == 0)
    assert np.std(tr.frames[-1, active]) < np.std(tr.frames[0, active])


def test_grayscott_deterministic_and_finite():
    spec = ReactionDiffusionSpec(grid=(16, 16), n_steps=8, seed=5)
    a, b = grayscott_trajectory(spec), grayscott_trajectory(spec)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert np.all(np.isfinite(a.frames)) and a.dt == 20.0
    assert not np.array_equal(a.frames, grayscott_trajectory(ReactionDiffusionSpec(grid=(16, 16), n_steps=8,
                                                                                     seed=6)).frames)


def test_grayscott_refuses_unstable():
    with pytest.raises(ValueError, match="unstable"):
        ReactionDiffusionSpec(d_u=0.3, dt=1.0)
    with pytest.raises(ValueError):
        ReactionDiffusionSpec(d_v=0.0)


def test_heat_deterministic_and_finite():
    a = heat_trajectory(HeatSpec(grid=(16, 16), seed=9))
    b = heat_trajectory(HeatSpec(grid=(16, 16), seed=9))
    assert a.frames.tobytes() == b.frames.tobytes() and np.all(np.isfinite(a.frames))


def test_split_counts():
    assert split_counts(10, 0.8) == (8, 2)
    assert split_counts(2, 0.8) == (1, 1)
    with pytest.raises(ValueError):
        split_counts(1, 0.5)


def test_make_dataset(tmp_path):
    specs = [HeatSpec(grid=(16, 16), n_steps=6, seed=i) for i in range(10)]
    make_dataset(specs, tmp_path / "d", scales=2)
    files = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert files == ["manifest.txt"] + [f"traj_{i:04d}.wfmt" for i in range(10)]
    man = (tmp_path / "d" / "manifest.txt").read_text()
    assert "n_train=8" in man and "n_val=2" in man
    ds = load_dataset(tmp_path / "d")
    assert len(ds.train) == 8 and len(ds.val) == 2
    refit = Standardizer.fit([t.frames for t in ds.train])
    assert refit.mean.tobytes() == ds.standardizer.mean.tobytes()
    assert refit.std.tobytes() == ds.standardizer.std.tobytes()
    train, val = ds.standardized()
    allv = np.concatenate([t.frames for t in val])
    assert abs(allv.std() - 1) > 1e-6
    alltr = np.concatenate([t.frames for t in train]).astype(np.float64)
    assert alltr.std() == pytest.approx(1.0, abs=1e-6)
    assert all(np.all(np.isfinite(t.frames)) for t in ds.train + ds.val)


def test_make_dataset_gray_scott_and_rerun(tmp_path):
    specs = [ReactionDiffusionSpec(grid=(16, 16), n_steps=4, seed=i) for i in range(3)]
    make_dataset(specs, tmp_path / "a", scales=2)
    make_dataset(specs, tmp_path / "b", scales=2)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert ds.train[0].frames.shape == (4, 2, 16, 16) and ds.train[0].params.names == ("F", "k")


def test_make_dataset_errors(tmp_path):
    with pytest.raises(ValueError, match="divisible"):
        make_dataset([HeatSpec(grid=(36, 36)), HeatSpec(grid=(36, 36))], tmp_path / "x", scales=3)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
