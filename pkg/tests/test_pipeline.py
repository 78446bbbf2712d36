import numpy as np
import pytest

from fskd import autodiff as ad
from fskd import model as M
from fskd import pipeline as P
from fskd import synth as S
from fskd import train as T
from fskd.config import RunConfig
from fskd.gradcheck import check_episode_loss

from conftest import small_config


def _episode(ds, seed=0, types=None):
    rng = np.random.default_rng(seed)
    types = list(range(S.NUM_TYPES)) if types is None else types
    return S.sample_episode(ds, types, 1, "same", rng, role="train")


# frozen features and prototypes --------------------------------------------------

def test_encoder_shape_and_determinism():
    cfg = RunConfig()
    params = M.init_params(cfg)
    img = S.render_instance(S.make_template(0), 0).image
    a, b = M.encode_image(img, params, cfg), M.encode_image(img, params, cfg)
    assert a.data.shape == (8, 8, 32)
    assert np.array_equal(a.data, b.data)


def test_encoder_constant_image_gives_constant_response():
    cfg = RunConfig(feature_norm="none")
    params = M.init_params(cfg)
    fm = M.encode_image(np.zeros((96, 96, 3), np.uint8), params, cfg)
    expected = np.maximum(-0.5 * params["enc_w"].sum(0) + params["enc_b"], 0)
    np.testing.assert_allclose(fm.data, np.broadcast_to(expected, fm.data.shape), atol=1e-12)


def test_encoder_rejects_wrong_size():
    cfg = RunConfig()
    with pytest.raises(ValueError):
        M.encode_image(np.zeros((64, 64, 3), np.uint8), M.init_params(cfg), cfg)


def test_keypoint_repr_single_cell():
    data = np.zeros((8, 8, 3))
    data[3, 5] = (1.0, 2.0, 3.0)
    fm = M.FeatureMap(data, 96)
    u = np.array([5.5, 3.5]) * 12  # centre of cell (row 3, col 5)
    np.testing.assert_allclose(M.extract_keypoint_repr(fm, u, "gauss", 0.3), data[3, 5])
    np.testing.assert_allclose(M.extract_keypoint_repr(fm, u, "gauss", 3.0, normalize=True),
                               data[3, 5] * M.gaussian_weights(8, u / 12, 3.0, True)[3, 5])
    np.testing.assert_array_equal(M.extract_keypoint_repr(fm, u + 3, "index"), data[3, 5])


def test_keypoint_repr_constant_map_weight_sum():
    fm = M.FeatureMap(np.full((8, 8, 2), 2.0), 96)
    xi = 3.5
    total = sum(np.exp(-((j + 0.5 - 4) ** 2 + (i + 0.5 - 4) ** 2) / (2 * xi * xi))
                for i in range(8) for j in range(8))
    np.testing.assert_allclose(M.extract_keypoint_repr(fm, (48, 48), "gauss", xi), [2 * total] * 2)


def test_keypoint_repr_outside_image():
    with pytest.raises(ValueError):
        M.extract_keypoint_repr(M.FeatureMap(np.zeros((8, 8, 2)), 96), (-1, 5))


def test_prototypes_and_modulation():
    assert np.array_equal(M.build_prototypes({0: [np.array([1.0, 2.0])]})[0], [1, 2])
    np.testing.assert_array_equal(M.build_prototypes({0: [np.array([0.0, 2.0]), np.array([2.0, 0.0])]})[0],
                                  [1, 1])
    assert M.build_prototypes({0: []}) == {}
    fm = M.FeatureMap(np.tile([1.0, 2.0, 3.0], (8, 8, 1)), 96)
    np.testing.assert_array_equal(M.modulate(fm, np.ones(3)), fm.data)
    np.testing.assert_array_equal(M.modulate(fm, np.zeros(3)), 0)
    np.testing.assert_array_equal(M.modulate(fm, [2.0, 0.0, 1.0])[0, 0], [2, 0, 3])
    with pytest.raises(ValueError):
        M.modulate(fm, np.ones(4))


def test_descriptor_shape():
    cfg = RunConfig(pool_side=2, proj_channels=0)
    params = M.init_params(cfg)
    psi = M.extract_descriptor(np.zeros((3, 8, 8, 32)), params, cfg)
    assert psi.shape == (3, 128)
    again = M.extract_descriptor(np.zeros((3, 8, 8, 32)), params, cfg)
    assert np.array_equal(psi.value, again.value)


def test_scale_equivariance_at_pre_activation_tap():
    cfg = RunConfig(pool_side=2, proj_channels=0)
    params = M.init_params(cfg)
    params["desc1_b"] = np.zeros_like(params["desc1_b"])
    rng = np.random.default_rng(0)
    query = M.FeatureMap(rng.uniform(size=(8, 8, 32)), 96)
    support = M.FeatureMap(rng.uniform(size=(8, 8, 32)), 96)
    phi = M.extract_keypoint_repr(support, (40, 50))
    phi_c = M.extract_keypoint_repr(M.FeatureMap(3.0 * support.data, 96), (40, 50))
    np.testing.assert_allclose(phi_c, 3.0 * phi)
    taps, taps_c = {}, {}
    M.extract_descriptor(M.modulate(query, phi)[None], params, cfg, taps)
    M.extract_descriptor(M.modulate(query, phi_c)[None], params, cfg, taps_c)
    np.testing.assert_allclose(taps_c["pre1"].value, 3.0 * taps["pre1"].value, rtol=1e-10)
    assert np.argmax(taps_c["pre1"].value) == np.argmax(taps["pre1"].value)


def test_group_head_rejects_bad_size():
    cfg = RunConfig()
    with pytest.raises(ValueError):
        M.predict_group_precision(ad.const(np.zeros((1, 4, cfg.descriptor_dim))), 8, M.init_params(cfg), cfg)


def test_sd_head_range():
    cfg = RunConfig()
    params = M.init_params(cfg)
    sd = M.sd_head(np.random.default_rng(0).normal(size=(2, 8, 8, 32)) * 10, params).value
    assert sd.shape == (2, 8, 8) and sd.min() >= 1e-3 and sd.max() <= 1


# auxiliary keypoints and groups --------------------------------------------------

def test_aux_interpolation():
    out = M.generate_aux_keypoints(np.array([[0.0, 0.0], [4.0, 8.0]]), [True, True], [(0, 1)], (0.25, 0.5, 0.75))
    assert [p for _, _, p in out] == [(1, 2), (2, 4), (3, 6)]


def test_aux_count_and_pruning():
    kps = np.random.default_rng(0).uniform(10, 80, size=(12, 2))
    out = M.generate_aux_keypoints(kps, np.ones(12, bool), S.DEFAULT_LIMB_PATHS, (0.25, 0.5, 0.75))
    assert len(out) == 18
    mask = np.zeros((96, 96), bool)
    mask[:, :48] = True
    pts = np.array([[10.0, 10.0], [90.0, 10.0]])
    kept = M.generate_aux_keypoints(pts, [True, True], [(0, 1)], (0.25, 0.5, 0.75), mask)
    assert [t for _, t, _ in kept] == [0.25]
    assert M.generate_aux_keypoints(pts, [True, False], [(0, 1)], (0.5,)) == []


def test_groups():
    seq = list(range(5))
    assert len(M.make_groups(seq, 3)) == 3
    assert len(M.make_groups(seq, 2)) == 4
    assert M.make_groups(seq, 1) == []
    assert M.make_groups([0, 1], 3) == []


# objective --------------------------------------------------------------------------

def test_episode_loss_terms(small_ds):
    cfg = small_config()
    params = M.init_params(cfg)
    batch = P.prepare_episode(_episode(small_ds), P.FeatureCache(params, cfg), cfg, np.random.default_rng(0))
    total, rep = P.episode_loss(params, batch, cfg)
    assert rep["total"] == pytest.approx(rep["main"] + rep["aux"] + rep["group"], rel=1e-12)
    cfg2 = cfg.replace(gamma_main=2.0, gamma_aux=0.5, gamma_group=3.0)
    _, rep2 = P.episode_loss(params, batch, cfg2)
    assert rep2["total"] == pytest.approx(2 * rep["main"] + 0.5 * rep["aux"] + 3 * rep["group"], rel=1e-12)


def test_aux_disabled_zeroes_terms(small_ds):
    cfg = small_config(aux=False)
    params = M.init_params(cfg)
    batch = P.prepare_episode(_episode(small_ds), P.FeatureCache(params, cfg), cfg, np.random.default_rng(0))
    _, rep = P.episode_loss(params, batch, cfg)
    assert rep["aux"] == 0.0 and rep["group"] == 0.0 and rep["main"] > 0


def test_baseline_uses_vanilla_losses(small_ds):
    cfg = small_config(uncertainty=False, aux=False, scales=(8,))
    params = M.init_params(cfg)
    batch = P.prepare_episode(_episode(small_ds), P.FeatureCache(params, cfg), cfg)
    _, rep = P.episode_loss(params, batch, cfg)
    psi = P.descriptors(batch, params, cfg)
    head = M.predict_grid(psi, 8, params, cfg)
    from fskd.grid import encode_grid_batch

    labels, vstar = encode_grid_batch(batch.query_pos, 8, cfg.l0)
    x = head.offsets.value[np.arange(batch.size), labels]
    logits = head.logits.value
    logp = logits - logits.max(1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(1, keepdims=True))
    expected = np.mean(((x - vstar) ** 2).mean(1) - logp[np.arange(batch.size), labels])
    assert rep["main"] == pytest.approx(expected, rel=1e-10)


def test_episode_loss_deterministic(small_ds):
    cfg = small_config()

    def run():
        params = M.init_params(cfg)
        batch = P.prepare_episode(_episode(small_ds, 3), P.FeatureCache(params, cfg), cfg,
                                  np.random.default_rng(3))
        return P.episode_loss(params, batch, cfg)[1]

    assert run() == run()


def test_episode_loss_gradients():
    rows = check_episode_loss(0)
    assert all(r["passed"] for r in rows), [r for r in rows if not r["passed"]]


def test_empty_episode_rejected(small_ds):
    cfg = small_config()
    params = M.init_params(cfg)
    ep = _episode(small_ds)
    ep.types = []
    batch = P.prepare_episode(ep, P.FeatureCache(params, cfg), cfg)
    with pytest.raises(ValueError):
        P.episode_loss(params, batch, cfg)


# training, detection, UKP ------------------------------------------------------------

def test_zero_steps_returns_initial_state(small_ds):
    cfg = small_config()
    state = T.init_state(cfg)
    before = {k: v.copy() for k, v in state.params.items()}
    after = T.train(small_ds, cfg, state, steps=0)
    assert all(np.array_equal(before[k], after.params[k]) for k in before)
    assert after.step == 0


def test_training_reduces_loss(small_ds):
    cfg = small_config(episodes=60, log_every=20, learning_rate=3e-3)
    state = T.train(small_ds, cfg)
    assert state.history[-1]["total"] < state.history[0]["total"]


def test_checkpoint_roundtrip(tmp_path, small_ds):
    cfg = small_config(episodes=5)
    state = T.train(small_ds, cfg)
    path = tmp_path / "ck.json"
    T.save_checkpoint(state, path)
    back = T.load_checkpoint(path)
    assert back.cfg == state.cfg and back.step == state.step
    for k in state.params:
        assert np.array_equal(back.params[k], state.params[k])
    for k in state.optimizer.m:
        assert np.array_equal(back.optimizer.m[k], state.optimizer.m[k])
        assert np.array_equal(back.optimizer.v[k], state.optimizer.v[k])
    path2 = tmp_path / "ck2.json"
    T.save_checkpoint(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_resume_is_bit_exact(small_ds):
    cfg = small_config(episodes=8, log_every=4)
    full = T.train(small_ds, cfg)
    half = T.train(small_ds, cfg, steps=4)
    half = T.state_from_document(T.checkpoint_document(half))
    resumed = T.train(small_ds, cfg, half)
    for k in full.params:
        assert np.array_equal(full.params[k], resumed.params[k])
    assert full.history == resumed.history


def test_excluding_a_type_leaves_others_unchanged(small_ds):
    cfg = small_config()
    params = M.init_params(cfg)
    ep = _episode(small_ds, 1)
    sup = ep.supports
    types = [t for t in range(S.NUM_TYPES) if sup[0].visible[t]]
    full = P.detect(params, cfg, sup, ep.query.image, types)
    part = P.detect(params, cfg, sup, ep.query.image, types[1:])
    for a, b in zip(full[1:], part):
        assert np.array_equal(a.position, b.position) and np.array_equal(a.cov, b.cov)


def test_detect_reports_absent_types(small_ds):
    cfg = small_config()
    params = M.init_params(cfg)
    ep = _episode(small_ds, 2)
    sup = ep.supports[0]
    hidden = S.AnnotatedImage(sup.image, sup.keypoints, np.zeros_like(sup.visible), sup.bbox, sup.mask, sup.species)
    assert P.detect(params, cfg, [hidden], ep.query.image, [0, 1]) == [None, None]


def test_detect_covariance_is_fused(small_ds):
    cfg = small_config()
    params = M.init_params(cfg)
    ep = _episode(small_ds, 4)
    t = int(np.flatnonzero(ep.supports[0].visible)[0])
    (e,) = P.detect(params, cfg, ep.supports, ep.query.image, [t])
    assert e.cov.shape == (2, 2) and np.all(np.linalg.eigvalsh(e.cov) > 0)
    assert len(e.per_scale) == len(cfg.scales)


def test_ukp_single_episode_equals_skp(small_ds):
    cfg = small_config()
    params = M.init_params(cfg)
    feats = P.FeatureCache(params, cfg)
    ukp = P.compute_ukp(params, cfg, small_ds, 1, seed=5, feats=feats)
    ep = S.sample_episode(small_ds, list(range(S.NUM_TYPES)), cfg.k_shot, cfg.episode_mode,
                          np.random.default_rng(5), role="train")
    skp = P.episode_prototypes(ep, feats, cfg)
    assert set(ukp) == set(skp)
    for t in ukp:
        np.testing.assert_array_equal(ukp[t], skp[t])
        assert ukp[t].shape == (cfg.channels,)
    again = P.compute_ukp(params, cfg, small_ds, 1, seed=5, feats=feats)
    assert all(np.array_equal(ukp[t], again[t]) for t in ukp)


def test_evaluate_contract(small_ds):
    cfg = small_config()
    params = M.init_params(cfg)
    ev = P.evaluate(params, cfg, small_ds, 6)
    assert 0 <= ev["pck"] <= 1 and ev["episodes"] == 6
    assert set(ev["per_type"]) == {str(t) for t in cfg.novel_types}
    assert all(len(r) == 4 for r in ev["records"])
    with pytest.raises(ValueError):
        P.evaluate(params, cfg, small_ds, 0)
    assert P.evaluate(params, cfg, small_ds, 6) == ev


def test_binned_trend():
    rows = P.binned_trend([0.01, 0.02, 0.07, 0.26], [1.0, 3.0, 5.0, 7.0])
    assert [r["bin"] for r in rows] == [[0.0, 0.05], [0.05, 0.1], [0.25, 0.3]]
    assert rows[0]["value_mean"] == 2.0 and rows[0]["count"] == 2
