import numpy as np
import pytest

from deformgen import denoiser as dn
from deformgen.diffusion import (DiffusionModel, GuidanceConfig, NoiseSchedule, TrainConfig,
                                 _batch_loss, cfg_predict, denoise_predict, forward_diffuse, sample,
                                 sample_latents, sample_many, standardize, train, train_arrays)
from deformgen.errors import ConfigError, DivergenceError, ShapeError
from deformgen.fields import Grid, ScalarField
from deformgen.latent import LatentConfig, LatentGeodesic
from deformgen.spectral import OperatorConfig

from helpers import smooth_image

G16 = Grid(16, 16)
SCHED = NoiseSchedule(50)


def small_model(rng, hidden=(8,), scale=0.1):
    lat = LatentConfig(G16, 2)
    D = 3 * lat.latent_dim
    params = dn.init_params(D, 512 + 64, SCHED.alpha_bar, rng, hidden)
    return DiffusionModel(params, SCHED, lat, 2, OperatorConfig(0.03), np.zeros(D),
                          np.full(D, scale), 512, 64)


def random_condition(rng):
    return dn.Condition(rng.standard_normal(512), rng.standard_normal(64))


# -- schedule and forward process ------------------------------------------------

def test_schedule_defaults():
    s = NoiseSchedule()
    assert s.beta[0] == 1e-4 and s.beta[-1] == 0.02 and s.beta.size == 500
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 0.01


def test_schedule_validation():
    with pytest.raises(ConfigError):
        NoiseSchedule(0)
    with pytest.raises(ConfigError):
        NoiseSchedule(10, 0.5, 0.1)
    with pytest.raises(ConfigError):
        GuidanceConfig(np.inf, 1.0)


def test_forward_diffuse_examples(rng):
    s = NoiseSchedule()
    z0 = rng.standard_normal(20)
    np.testing.assert_array_equal(forward_diffuse(z0, 7, np.zeros(20), s), np.sqrt(s.alpha_bar[6]) * z0)
    z0 /= np.linalg.norm(z0)
    eps = rng.standard_normal(20)
    eps /= np.linalg.norm(eps)
    ab = s.alpha_bar[0]
    bound = (1 - np.sqrt(ab)) + np.sqrt(1 - ab)  # = 1e-2 + 5e-5
    assert np.linalg.norm(forward_diffuse(z0, 1, eps, s) - z0) <= bound
    for bad in (0, 501):
        with pytest.raises(ConfigError):
            forward_diffuse(z0, bad, eps, s)
    with pytest.raises(ShapeError):
        forward_diffuse(z0, 3, eps[:5], s)


def test_forward_diffuse_variance(rng):
    s = NoiseSchedule()
    tau = 123
    n = 100_000
    out = forward_diffuse(np.zeros((n, 3)), np.full(n, tau), rng.standard_normal((n, 3)), s)
    var = out.var(axis=0, ddof=1)
    target = 1.0 - s.alpha_bar[tau - 1]
    se = target * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(var - target) <= 3 * se)


def test_forward_diffuse_inverts_with_known_noise(rng):
    s = NoiseSchedule()
    z0 = rng.standard_normal(50)
    eps = rng.standard_normal(50)
    tau = 400
    zt = forward_diffuse(z0, tau, eps, s)
    ab = s.alpha_bar[tau - 1]
    rec = (zt - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    assert np.abs(rec - z0).max() <= 1e-10


# -- embeddings and conditions ---------------------------------------------------

def test_text_embedding_is_stable_and_normalized():
    a = dn.text_embedding("lobes: 2; growth: 12 percent per step")
    b = dn.text_embedding("LOBES: 2;  growth: 12 percent PER step")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert np.all(dn.text_embedding("") == 0)
    # blake2b buckets are fixed across processes
    assert np.flatnonzero(dn.text_embedding("growth")).tolist() == [
        int.from_bytes(__import__("hashlib").blake2b(b"growth", digest_size=8).digest(), "little") % 64]


def test_image_embedding_pools_gradient(rng):
    img = ScalarField(G16, rng.uniform(size=(16, 16)))
    e = dn.image_embedding(img, pool=8)
    assert e.shape == (2 * 64,)
    gx = (np.roll(img.values, -1, 1) - np.roll(img.values, 1, 1)) / (2 * G16.hx)
    assert e[0] == pytest.approx(gx[:2, :2].mean())
    with pytest.raises(ConfigError):
        dn.image_embedding(img, pool=5)


def test_time_embedding_shape():
    e = dn.time_embedding(np.array([1, 2, 3]))
    assert e.shape == (3, 64)
    assert np.all(np.abs(e) <= 1.0)


def test_condition_nulls(rng):
    c = random_condition(rng)
    v = c.with_nulls(True, False).vector()
    assert np.all(v[:512] == 0) and np.array_equal(v[512:], c.text_embed)
    v = c.with_nulls(False, True).vector()
    assert np.all(v[512:] == 0) and np.array_equal(v[:512], c.image_embed)
    assert c.dim == 576
    m = c.with_nulls(False, True).masked(True, False)
    assert m.image_null and m.text_null


# -- network ----------------------------------------------------------------------

def test_zero_network_predicts_zero(rng):
    p = dn.init_params(10, 4, SCHED.alpha_bar, rng, (6, 6))
    for a in p.arrays:
        a[...] = 0.0
    cond = dn.Condition(rng.standard_normal(2), rng.standard_normal(2))
    assert np.all(denoise_predict(rng.standard_normal(10), cond, 17, p) == 0.0)


def test_prediction_ignores_text_when_nulled(rng):
    p = dn.init_params(10, 4, SCHED.alpha_bar, rng, (6,))
    img = rng.standard_normal(2)
    z = rng.standard_normal(10)
    a = denoise_predict(z, dn.Condition(img, dn.text_embedding("one", 2), False, True), 5, p)
    b = denoise_predict(z, dn.Condition(img, dn.text_embedding("two three", 2), False, True), 5, p)
    assert np.array_equal(a, b)


def test_params_shape_checks(rng):
    p = dn.init_params(10, 4, SCHED.alpha_bar, rng, (6,))
    with pytest.raises(ShapeError):
        dn.DenoiserParams(10, 4, 64, p.weights, p.biases[::-1], alpha_bar=SCHED.alpha_bar)
    with pytest.raises(ShapeError):
        dn.predict(p, np.zeros(9), np.zeros(4), 3)
    with pytest.raises(ShapeError):
        dn.predict(p, np.zeros(10), np.zeros(4), 51)


def test_micro_network_loss_gradient(rng):
    """Backprop of the training loss against central differences (2 hidden units)."""
    p = dn.init_params(5, 3, SCHED.alpha_bar, rng, (2,), time_dim=4)
    p.skip[:] = rng.uniform(0.5, 1.5, 5)
    for b in p.biases:
        b[:] = 0.1 * rng.standard_normal(b.shape)
    z0 = rng.standard_normal((4, 5))
    cond = rng.standard_normal((4, 3))
    tau = np.array([3, 10, 25, 49])
    eps = rng.standard_normal((4, 5))
    wd = 1e-2

    def loss():
        mse, _ = _batch_loss(p, z0, cond, tau, eps, SCHED, grad=False)
        return mse + wd * p.sq_norm()

    _, grads = _batch_loss(p, z0, cond, tau, eps, SCHED, weight_decay=wd)
    flat_g = np.concatenate([g.ravel() for g in grads])
    fd = []
    h = 1e-6
    for a in p.arrays:
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + h
            up = loss()
            a[i] = old - h
            down = loss()
            a[i] = old
            fd.append((up - down) / (2 * h))
    fd = np.array(fd)
    assert np.linalg.norm(flat_g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_input_gradient(rng):
    p = dn.init_params(5, 3, SCHED.alpha_bar, rng, (4,), time_dim=4)
    z = rng.standard_normal((2, 5))
    cond = rng.standard_normal((2, 3))
    w = rng.standard_normal((2, 5))
    out, cache = dn.forward(p, z, cond, 7)
    _, (dz, dc) = dn.backward(p, cache, w, need_input=True)
    h = 1e-6
    for arr, grad in ((z, dz), (cond, dc)):
        e = rng.standard_normal(arr.shape)
        arr += h * e
        up = np.sum(w * dn.forward(p, z, cond, 7)[0])
        arr -= 2 * h * e
        down = np.sum(w * dn.forward(p, z, cond, 7)[0])
        arr += h * e
        assert np.sum(grad * e) == pytest.approx((up - down) / (2 * h), rel=1e-6)


def test_adam_matches_textbook(rng):
    p = dn.init_params(4, 2, SCHED.alpha_bar, rng, (3,), time_dim=2)
    ref = [a.copy() for a in p.arrays]
    opt = dn.Adam(p, lr=1e-2)
    m = [np.zeros_like(a) for a in ref]
    v = [np.zeros_like(a) for a in ref]
    wd = 0.01
    for t in range(1, 6):
        grads = [rng.standard_normal(a.shape) for a in ref]
        for k, (a, g) in enumerate(zip(ref, grads)):
            g = g + 2 * wd * a
            m[k] = 0.9 * m[k] + 0.1 * g
            v[k] = 0.999 * v[k] + 0.001 * g * g
            mh = m[k] / (1 - 0.9**t)
            vh = v[k] / (1 - 0.999**t)
            a -= 1e-2 * mh / (np.sqrt(vh) + 1e-8)
        opt.step(p, [g.copy() for g in grads], wd)
    for a, r in zip(p.arrays, ref):
        np.testing.assert_allclose(a, r, rtol=0, atol=1e-14)


# -- guidance -----------------------------------------------------------------------

@pytest.mark.parametrize("di,dt,flags", [(1, 1, (False, False)), (1, 0, (False, True)),
                                         (0, 0, (True, True))])
def test_guidance_identities(rng, di, dt, flags):
    p = dn.init_params(12, 576, SCHED.alpha_bar, rng, (16, 16))
    c = random_condition(rng)
    z = rng.standard_normal(12)
    guided = cfg_predict(z, c, 20, p, GuidanceConfig(di, dt))
    plain = denoise_predict(z, c.with_nulls(*flags), 20, p)
    assert np.abs(guided - plain).max() <= 1e-12 * max(1.0, np.abs(plain).max())


def test_fused_guidance_matches_three_evaluations(rng):
    from deformgen.diffusion import _GuidedNet

    p = dn.init_params(12, 576, SCHED.alpha_bar, rng, (16, 16))
    c = random_condition(rng)
    z = rng.standard_normal((3, 12))
    g = GuidanceConfig(1.5, 2.0)
    fused = _GuidedNet(p, [c] * 3, g)(z, 33)
    ref = np.stack([cfg_predict(row, c, 33, p, g) for row in z])
    assert np.abs(fused - ref).max() <= 1e-12 * np.abs(ref).max()


@pytest.mark.parametrize("di,dt,flags", [(1, 1, (False, False)), (1, 0, (False, True)),
                                         (0, 0, (True, True))])
def test_guided_sampling_identities(rng, di, dt, flags):
    model = small_model(rng, (16, 16))
    c = random_condition(rng)
    guided = sample_latents(model, c, GuidanceConfig(di, dt), [3, 4])
    plain = sample_latents(model, c.with_nulls(*flags), None, [3, 4])
    assert np.abs(guided - plain).max() <= 1e-12 * np.abs(plain).max()


# -- sampling -----------------------------------------------------------------------

def test_zero_network_sampling_matches_closed_form(rng):
    model = small_model(rng)
    for a in model.params.arrays:
        a[...] = 0.0
    D = model.data_dim
    seed = 11
    got = sample_latents(model, random_condition(rng), GuidanceConfig(), [seed])[0]
    # with a zero predictor every step is z <- z / sqrt(1 - beta) + sqrt(beta) xi
    r = np.random.default_rng(seed)
    beta, abar = SCHED.beta, SCHED.alpha_bar
    z = r.standard_normal(D) / np.sqrt(abar[-1])
    for tau in range(SCHED.T, 1, -1):
        z += np.sqrt(beta[tau - 1]) * r.standard_normal(D) / np.sqrt(abar[tau - 2])
    expected = z * model.scale + model.mean
    assert np.abs(got - expected).max() <= 1e-8 * np.abs(expected).max()


def test_sampling_is_deterministic(rng):
    model = small_model(rng)
    tpl = smooth_image(G16, rng)
    a = sample(tpl, "lobes: 1", model, GuidanceConfig(), 5)
    b = sample(tpl, "lobes: 1", model, GuidanceConfig(), 5)
    assert np.array_equal(a.latent.coeffs, b.latent.coeffs)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.frames, b.frames))
    c = sample(tpl, "lobes: 1", model, GuidanceConfig(), 6)
    assert not np.array_equal(a.latent.coeffs, c.latent.coeffs)


def test_batched_sampling_matches_single(rng):
    model = small_model(rng)
    tpl = smooth_image(G16, rng)
    many = sample_many(tpl, "lobes: 2", model, GuidanceConfig(), [1, 2, 3])
    one = sample(tpl, "lobes: 2", model, GuidanceConfig(), 2)
    np.testing.assert_allclose(many[1].latent.coeffs, one.latent.coeffs, rtol=0, atol=1e-13)


def test_sample_result_contents(rng):
    model = small_model(rng, scale=0.01)
    tpl = smooth_image(G16, rng)
    res = sample(tpl, "x", model, GuidanceConfig(), 0)
    assert len(res.frames) == 3 and len(res.deformation.deformations) == 3
    assert isinstance(res.latent, LatentGeodesic)
    assert res.min_detjac == res.detjac.values.min()
    assert np.array_equal(res.frames[0].values, tpl.values)
    with pytest.raises(ShapeError):
        sample(smooth_image(Grid(32, 32), rng), "x", model, GuidanceConfig(), 0)


# -- training -----------------------------------------------------------------------

def test_zero_learning_rate_keeps_params(rng):
    p = dn.init_params(6, 4, SCHED.alpha_bar, rng, (5,))
    Z = rng.standard_normal((10, 6))
    C = rng.standard_normal((10, 4))
    res = train_arrays(Z, C, 2, SCHED, TrainConfig(lr=0.0, epochs=3, batch_size=4), p)
    for a, b in zip(res.params.arrays, p.arrays):
        assert np.array_equal(a, b)


def test_overfits_single_example(rng):
    z = rng.standard_normal(16)
    Z = np.tile(z, (32, 1))
    C = np.tile(rng.standard_normal(4), (32, 1))
    hyper = TrainConfig(lr=3e-3, epochs=200, batch_size=32, weight_decay=0.0, p_uncond=0.0,
                        hidden=(64, 64))
    res = train_arrays(Z, C, 2, SCHED, hyper)
    losses = np.array([l for _, l in res.loss_log])
    windows = losses.reshape(20, 10).mean(axis=1)
    # a single clean latent makes the noise exactly recoverable; predicting
    # zero noise would score 1
    assert windows[-1] < 0.2
    assert windows[-1] < 0.01 * windows[0]
    assert np.all(windows[1:] < windows[0])
    assert res.val_decreased


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_names_step(rng):
    Z = np.full((4, 3), 1e200)
    with pytest.raises(DivergenceError) as info:
        train_arrays(Z, np.zeros((4, 2)), 1, SCHED, TrainConfig(epochs=1, batch_size=2, hidden=(3,)))
    assert info.value.step == 1


def test_train_bundles_normalization(rng):
    lat = LatentConfig(G16, 1)
    data = []
    for i in range(4):
        lg = LatentGeodesic(lat, 0.01 * rng.standard_normal((3, lat.latent_dim)))
        data.append((lg, smooth_image(G16, rng), f"lobes: {i}"))
    model, res = train(data, SCHED, TrainConfig(epochs=2, batch_size=2, hidden=(4,)),
                       OperatorConfig(0.03))
    Z = np.stack([lg.flat() for lg, _, _ in data])
    mean, scale = standardize(Z)
    assert np.array_equal(model.mean, mean) and np.array_equal(model.scale, scale)
    assert model.steps == 2 and model.image_dim == 512 and model.text_dim == 64
    assert len(res.loss_log) == 4


def test_standardize_floor():
    Z = np.array([[0.0, 1.0, 5.0], [0.0, 3.0, 5.0 + 1e-9]])
    mean, scale = standardize(Z)
    np.testing.assert_array_equal(mean, [0.0, 2.0, 5.0 + 5e-10])
    assert scale[1] == 1.0 and scale[0] == 1e-3 and scale[2] == 1e-3
