import math

import numpy as np
import pytest

from srfield import _kernels_py, kernels
from srfield.errors import ParameterError, ShapeError, StateError
from srfield.metrics import psnr
from srfield.radiance import (
    Camera,
    PretrainConfig,
    RayBatch,
    SyncConfig,
    VoxelField,
    concat_rays,
    photometric_grad,
    pretrain_lr,
    ray_box,
    render_image,
    render_rays,
    sync_train,
)
from srfield.scenegen import DatasetConfig, Primitive, Scene, gen_scene, gt_render, make_dataset


def _raw_for(sigma, scale=10.0):
    """Inverse of the scaled softplus."""
    return math.log(math.expm1(sigma / scale))


def _axis_rays(ys, zs, colors=None):
    """Rays travelling along +x through (y, z) offsets."""
    ys, zs = np.broadcast_arrays(np.asarray(ys, float), np.asarray(zs, float))
    n = ys.size
    o = np.stack([np.full(n, -3.0), ys.ravel(), zs.ravel()], 1)
    d = np.tile([1.0, 0.0, 0.0], (n, 1))
    return RayBatch(o, d, np.full(n, 0.1), np.full(n, 10.0), colors)


def _random_rays(n, seed):
    rng = np.random.default_rng(seed)
    o = rng.normal(size=(n, 3))
    o = 3.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    target = rng.uniform(-0.5, 0.5, size=(n, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RayBatch(o, d, np.full(n, 0.1), np.full(n, 10.0), rng.uniform(0, 1, size=(n, 3)))


def _random_field(n, seed):
    rng = np.random.default_rng(seed)
    return VoxelField(rng.normal(-1.0, 1.5, size=(n, n, n)), rng.normal(0, 1.5, size=(n, n, n, 3)))


def _blob_field(n=24):
    g = np.linspace(-1, 1, n)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    r2 = x ** 2 + y ** 2 + z ** 2
    dens = 3.0 * np.exp(-r2 / 0.2) - 2.0
    col = np.stack([x, y, z], -1) * 2.0
    return VoxelField(dens, col)


class TestCamera:
    def test_look_at_axis_through_center(self):
        cam = Camera.look_at((3.0, 1.0, 2.0), (0.0, 0.0, 0.0), 32, 32, 40.0)
        px, py, z = cam.project(np.zeros((1, 3)))
        assert px[0] == pytest.approx(16.0) and py[0] == pytest.approx(16.0)
        assert z[0] == pytest.approx(math.sqrt(14.0))

    def test_pixel_rays_reproject(self):
        cam = Camera.look_at((0.0, -3.0, 1.0), (0.0, 0.0, 0.0), 8, 6, 10.0)
        o, d = cam.pixel_rays()
        px, py, _ = cam.project(o + 2.5 * d)
        v, u = np.meshgrid(np.arange(6) + 0.5, np.arange(8) + 0.5, indexing="ij")
        np.testing.assert_allclose(px, u.ravel(), atol=1e-9)
        np.testing.assert_allclose(py, v.ravel(), atol=1e-9)

    def test_scaled(self):
        cam = Camera.look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), 8, 8, 10.0).scaled(4)
        assert (cam.width, cam.height, cam.focal, cam.cx) == (32, 32, 40.0, 16.0)

    def test_validation(self):
        with pytest.raises(ParameterError):
            Camera(0.0, 4, 4, 8, 8, np.eye(4))
        with pytest.raises(ParameterError):
            Camera(1.0, 4, 4, 8, 8, np.eye(4), near=2.0, far=1.0)
        bad = np.eye(4)
        bad[0, 0] = 1.001
        with pytest.raises(ParameterError):
            Camera(1.0, 4, 4, 8, 8, bad)
        with pytest.raises(ShapeError):
            Camera(1.0, 4, 4, 8, 8, np.eye(3))

    def test_dict_roundtrip(self):
        cam = Camera.look_at((1.0, -3.0, 0.5), (0.0, 0.0, 0.0), 8, 8, 10.0)
        again = Camera.from_dict(cam.to_dict())
        assert np.array_equal(again.c2w, cam.c2w) and again.focal == cam.focal

    def test_raybatch_unit_norm(self):
        with pytest.raises(ParameterError):
            RayBatch(np.zeros((1, 3)), np.array([[1.0, 1e-4, 0.0]]), np.ones(1) * 0.1, np.ones(1))


def test_ray_box_miss_and_hit():
    o = np.array([[-3.0, 0.0, 0.0], [-3.0, 2.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    t0, t1 = ray_box(o, d, -np.ones(3), np.ones(3), np.full(2, 0.1), np.full(2, 10.0))
    assert (t0[0], t1[0]) == (2.0, 4.0)
    assert t1[1] <= t0[1]


class TestRender:
    def test_empty_field_is_background(self):
        fld = VoxelField.create(8, density_init=-np.inf)
        rays = _random_rays(200, 0)
        bg = (0.2, 0.4, 0.9)
        rgb, depth, opac = render_rays(fld, rays, 32, bg)
        np.testing.assert_array_equal(opac, 0.0)
        np.testing.assert_allclose(rgb, np.tile(bg, (200, 1)), atol=1e-15)
        np.testing.assert_array_equal(depth, rays.far)

    def test_empty_image(self):
        fld = VoxelField.create(8, density_init=-np.inf)
        cam = Camera.look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), 8, 8, 10.0)
        rgb, _, _ = render_image(fld, cam, 16)
        np.testing.assert_allclose(rgb, 1.0, atol=1e-15)

    def test_missing_rays(self):
        fld = VoxelField.create(8, density_init=3.0)
        rays = _axis_rays([1.5, -2.0], [0.0, 0.0])
        rgb, depth, opac = render_rays(fld, rays, 16, (0.0, 0.5, 1.0))
        np.testing.assert_array_equal(opac, 0.0)
        np.testing.assert_array_equal(rgb, [[0.0, 0.5, 1.0]] * 2)
        np.testing.assert_array_equal(depth, 10.0)

    @pytest.mark.parametrize("sigma", [0.3, 1.0, 2.5])
    def test_homogeneous_slab_opacity(self, sigma):
        fld = VoxelField.create(8, density_init=_raw_for(sigma))
        rays = _random_rays(300, 1)
        t0, t1 = ray_box(rays.origins, rays.dirs, fld.lo, fld.hi, rays.near, rays.far)
        length = np.maximum(t1 - t0, 0.0)
        _, _, opac = render_rays(fld, rays, 256)
        assert np.max(np.abs(opac - (1.0 - np.exp(-sigma * length)))) <= 1e-3

    def test_axis_slab_with_ramps(self):
        # vertices x in [-0.5, 0.5] carry sigma; trilinear ramps add half a cell each side
        n, sigma = 9, 2.0
        d = np.full((n, n, n), -np.inf)
        d[2:7] = _raw_for(sigma)
        fld = VoxelField(d, np.zeros((n, n, n, 3)))
        _, _, opac = render_rays(fld, _axis_rays(np.linspace(-0.9, 0.9, 7), 0.1), 256)
        np.testing.assert_allclose(opac, 1.0 - math.exp(-sigma * 1.25), atol=1e-3)

    def test_sample_doubling_converges(self):
        fld = _blob_field()
        rays = _random_rays(500, 2)
        a = render_rays(fld, rays, 128)[0]
        b = render_rays(fld, rays, 256)[0]
        assert np.max(np.abs(a - b)) < 1e-3

    def test_weights_partition_unity(self):
        fld = _random_field(10, 3)
        rays = _random_rays(100, 4)
        jit = np.random.default_rng(0).random((100, 64))
        t0, t1 = ray_box(rays.origins, rays.dirs, fld.lo, fld.hi, rays.near, rays.far)
        out = _kernels_py._composite(fld.density(), fld.color(), fld.lo, fld.hi, rays.origins, rays.dirs,
                                     t0, t1, jit)
        w, trans, hit = out[8], out[6], out[9]
        assert np.all(w >= 0)
        total = w.sum(1) + np.where(hit, trans[:, -1], 1.0)
        np.testing.assert_allclose(total, 1.0, atol=1e-6)
        _, _, opac = render_rays(fld, rays, 64, jitter=jit)
        np.testing.assert_allclose(opac, w.sum(1), atol=1e-9)
        assert np.all((opac >= 0) & (opac <= 1))

    def test_render_deterministic(self):
        fld = _random_field(12, 5)
        cam = Camera.look_at((2.0, -2.0, 1.0), (0.0, 0.0, 0.0), 16, 16, 20.0)
        a = render_image(fld, cam, 32, seed=7)
        b = render_image(fld, cam, 32, seed=7)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_chunking_does_not_change_output(self):
        fld = _random_field(12, 5)
        cam = Camera.look_at((2.0, -2.0, 1.0), (0.0, 0.0, 0.0), 16, 16, 20.0)
        a = render_image(fld, cam, 32, seed=None)
        b = render_image(fld, cam, 32, seed=None, chunk=37)
        assert a[0].tobytes() == b[0].tobytes()


def _finite_diff_check(fld, rays, jit, which, norm, n_check=50, h=1e-6):
    _, gd, gc = photometric_grad(fld, rays, jit.shape[1], jitter=jit, norm=norm)
    g = gd if which == "density" else gc
    grid = fld.density_raw if which == "density" else fld.color_raw
    flat = np.flatnonzero(np.abs(g.ravel()) > 1e-3 * np.abs(g).max())
    pick = np.random.default_rng(0).choice(flat, size=n_check, replace=False)
    worst = 0.0
    for k in pick:
        idx = np.unravel_index(k, grid.shape)
        old = grid[idx]
        grid[idx] = old + h
        lp = photometric_grad(fld, rays, jit.shape[1], jitter=jit, norm=norm)[0]
        grid[idx] = old - h
        lm = photometric_grad(fld, rays, jit.shape[1], jitter=jit, norm=norm)[0]
        grid[idx] = old
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx])))
    return worst


class TestGradients:
    @pytest.mark.parametrize("which", ["density", "color"])
    @pytest.mark.parametrize("norm", ["L1", "L2"])
    def test_finite_differences(self, which, norm):
        fld = _random_field(6, 11)
        rays = _random_rays(64, 12)
        jit = np.random.default_rng(13).random((64, 24))
        assert _finite_diff_check(fld, rays, jit, which, norm) <= 1e-3

    def test_perfect_reconstruction_zero_grad(self):
        fld = _random_field(8, 14)
        rays = _random_rays(80, 15)
        jit = np.random.default_rng(16).random((80, 32))
        rays.colors = render_rays(fld, rays, 32, jitter=jit)[0]
        loss, gd, gc = photometric_grad(fld, rays, 32, jitter=jit)
        assert loss == 0.0
        assert not gd.any() and not gc.any()

    def test_locality(self):
        n = 17  # vertex spacing 0.125
        fld = _random_field(n, 17)
        rays = _axis_rays(np.linspace(-0.05, 0.05, 4), 0.3, np.zeros((4, 3)))
        _, gd, gc = photometric_grad(fld, rays, 64)
        coords = np.linspace(-1, 1, n)
        near_y = np.abs(coords) <= 0.125 + 0.05
        near_z = np.abs(coords - 0.3) <= 0.125
        support = near_y[:, None] & near_z[None, :]
        assert not gd[:, ~support].any()
        assert not gc[:, ~support].any()
        assert gd[:, support].any()

    def test_requires_targets(self):
        with pytest.raises(ParameterError):
            photometric_grad(_random_field(4, 0), _axis_rays([0.0], [0.0]), 8)

    def test_unknown_norm(self):
        with pytest.raises(ParameterError):
            photometric_grad(_random_field(4, 0), _axis_rays([0.0], [0.0], np.zeros((1, 3))), 8, norm="L3")


class TestKernelParity:
    def _args(self, seed, n_rays=300, n=12, s=40):
        fld = _random_field(n, seed)
        rays = _random_rays(n_rays, seed + 1)
        rays = concat_rays([rays, _axis_rays([1.7], [0.0], np.zeros((1, 3)))])  # include a miss
        t0, t1 = ray_box(rays.origins, rays.dirs, fld.lo, fld.hi, rays.near, rays.far)
        jit = np.random.default_rng(seed).random((len(rays), s))
        return (fld.density(), fld.color(), fld.lo, fld.hi, rays.origins, rays.dirs, t0, t1, jit,
                np.array([1.0, 0.9, 0.8]), rays.far.copy())

    @pytest.mark.skipif(kernels.BACKEND == "python", reason="compiled kernels not built")
    def test_forward_backward_match(self):
        from srfield import _kernels as ck

        args = self._args(21)
        for a, b in zip(ck.render_forward(*args), _kernels_py.render_forward(*args)):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        g = np.random.default_rng(0).normal(size=(len(args[4]), 3))
        for a, b in zip(ck.render_backward(*args, g), _kernels_py.render_backward(*args, g)):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    @pytest.mark.skipif(kernels.BACKEND == "python", reason="compiled kernels not built")
    def test_splat_match(self):
        from srfield import _kernels as ck

        rng = np.random.default_rng(3)
        px, py = rng.integers(-2, 10, 500), rng.integers(-2, 10, 500)
        z = np.round(rng.uniform(-0.5, 3.0, 500), 1)  # plenty of depth ties
        cols = rng.random((500, 3))
        for a, b in zip(ck.splat_zbuffer(px, py, z, cols, 8, 8), _kernels_py.splat_zbuffer(px, py, z, cols, 8, 8)):
            np.testing.assert_array_equal(a, b)


def _views(n, res=16, radius=3.5):
    cams = []
    for i in range(n):
        az = 2 * math.pi * i / n
        el = math.radians(20 + 40 * (i % 2))
        eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), res, res, res * 1.2, near=0.5, far=8.0))
    return cams


class TestSync:
    def test_zero_steps_unchanged(self):
        fld = _random_field(6, 0)
        cam = _views(1)[0]
        out = sync_train(fld, [np.zeros((3, 16, 16))], [cam], SyncConfig(steps=0))
        assert out.equals(fld) and out is not fld

    def test_empty_images(self):
        with pytest.raises(ParameterError):
            sync_train(_random_field(4, 0), [], [], SyncConfig(steps=3))

    def test_misaligned(self):
        with pytest.raises(ShapeError):
            sync_train(_random_field(4, 0), [np.zeros((3, 16, 16))], _views(2), SyncConfig(steps=3))

    def test_input_not_mutated_and_loss_drops(self):
        scene = Scene((Primitive("sphere", (0.0, 0.0, 0.0), (0.5,) * 3, (0.8, 0.2, 0.1)),))
        cams = _views(4)
        imgs = [gt_render(scene, c)[0] for c in cams]
        fld = VoxelField.create(16)
        before = fld.copy()
        hist = []
        sync_train(fld, imgs, cams, SyncConfig(steps=200, rays_per_step=256, n_samples=32), history=hist)
        assert fld.equals(before)
        assert np.mean(hist[-20:]) < 0.5 * np.mean(hist[:20])

    def test_constant_slab_converges(self):
        # default step count and learning rate; a smaller ray batch keeps the test fast
        scene = Scene((Primitive("box", (0.0, 0.0, 0.0), (0.4, 0.4, 0.15), (0.2, 0.6, 0.3)),))
        cams = _views(6)
        imgs = [gt_render(scene, c)[0] for c in cams]
        cfg = SyncConfig(rays_per_step=256, n_samples=48)
        fld = sync_train(VoxelField.create(24), imgs, cams, cfg, seed=1)
        err = [np.abs(render_image(fld, c, 48, seed=None)[0] - im).mean() for c, im in zip(cams, imgs)]
        assert max(err) < 0.02

    def test_seeded_reproducible(self):
        cams = _views(2)
        imgs = [np.full((3, 16, 16), 0.4), np.full((3, 16, 16), 0.6)]
        cfg = SyncConfig(steps=15, rays_per_step=128, n_samples=16)
        a = sync_train(VoxelField.create(8), imgs, cams, cfg, seed=3)
        b = sync_train(VoxelField.create(8), imgs, cams, cfg, seed=3)
        assert a.equals(b)


SMALL_PRETRAIN = PretrainConfig(resolution=32, sync=SyncConfig(steps=1500, rays_per_step=1024, n_samples=64))


class TestPretrain:
    def test_single_sphere_psnr(self):
        scene = Scene((Primitive("sphere", (0.1, -0.1, 0.0), (0.45,) * 3, (0.9, 0.5, 0.1)),))
        ds = make_dataset(scene, DatasetConfig(n_train_views=16, n_eval_views=4, lr_res=24), with_hr=False)
        fld = pretrain_lr(ds, SMALL_PRETRAIN, seed=0)
        scores = [psnr(render_image(fld, c, 64, seed=None)[0], im) for c, im in zip(ds.eval_cameras, ds.lr_eval)]
        assert np.median(scores) >= 25.0

    def test_generated_scene_fit_quality(self):
        ds = make_dataset(gen_scene(3), DatasetConfig(n_train_views=16, n_eval_views=4, lr_res=24), with_hr=False)
        fld = pretrain_lr(ds, SMALL_PRETRAIN, seed=0)
        fit = [psnr(render_image(fld, c, 64, seed=None)[0], im) for c, im in zip(ds.train_cameras, ds.lr_train)]
        held = [psnr(render_image(fld, c, 64, seed=None)[0], im) for c, im in zip(ds.eval_cameras, ds.lr_eval)]
        assert min(fit) >= 30.0
        assert np.median(held) >= 25.0

    def test_empty_scene_transparent(self):
        ds = make_dataset(Scene(()), DatasetConfig(n_train_views=8, n_eval_views=1, lr_res=16), with_hr=False)
        cfg = PretrainConfig(resolution=16, sync=SyncConfig(steps=600, rays_per_step=512, n_samples=32))
        fld = pretrain_lr(ds, cfg, seed=0)
        for cam in ds.train_cameras + ds.eval_cameras:
            assert render_image(fld, cam, 32, seed=None)[2].max() < 0.02

    def test_reproducible(self):
        scene = Scene((Primitive("box", (0.0, 0.0, 0.0), (0.3,) * 3, (0.1, 0.2, 0.9)),))
        ds = make_dataset(scene, DatasetConfig(n_train_views=4, n_eval_views=1, lr_res=12), with_hr=False)
        cfg = PretrainConfig(resolution=12, sync=SyncConfig(steps=30, rays_per_step=256, n_samples=16))
        assert pretrain_lr(ds, cfg, seed=5).equals(pretrain_lr(ds, cfg, seed=5))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        fld = _random_field(5, 9).quantized()
        fld.density_scale = 7.5
        fld.save(tmp_path / "f.field")
        again = VoxelField.load(tmp_path / "f.field")
        assert again.equals(fld)

    def test_little_endian_layout(self, tmp_path):
        fld = _random_field(3, 1)
        fld.save(tmp_path / "f.field")
        raw = (tmp_path / "f.field").read_bytes()
        body = np.frombuffer(raw[-4 * 4 * 27:], dtype="<f4")
        np.testing.assert_array_equal(body[:27], fld.density_raw.astype("<f4").ravel())

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nonsense")
        with pytest.raises(StateError):
            VoxelField.load(tmp_path / "x")

    def test_truncated(self, tmp_path):
        _random_field(4, 0).save(tmp_path / "f")
        data = (tmp_path / "f").read_bytes()
        (tmp_path / "g").write_bytes(data[:-8])
        with pytest.raises(StateError):
            VoxelField.load(tmp_path / "g")

    def test_activation_invariants(self):
        fld = _random_field(6, 2)
        fld.density_raw[0, 0, 0] = -800.0
        fld.color_raw[0, 0, 0] = (800.0, -800.0, 0.0)
        assert np.all(fld.density() >= 0)
        c = fld.color()
        assert np.all((c >= 0) & (c <= 1)) and np.all(np.isfinite(c))

    def test_grid_shape_check(self):
        with pytest.raises(ShapeError):
            VoxelField(np.zeros((4, 4, 3)), np.zeros((4, 4, 3, 3)))
