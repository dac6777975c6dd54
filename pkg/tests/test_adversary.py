import numpy as np
import pytest

from dannage import adversary as adv
from dannage import ingest, synth
from dannage.errors import ConfigError, LabelError, NumericsError, ShapeError
from dannage.tensor import TRAIN, check_gradients


def tiny_cfg(**kw):
    base = dict(input_dim=6, latent_dim=8, encoder_widths=(7, 6, 5, 5), bp_width=6,
                bp_head_width=4, batch_size=8, steps_per_epoch=2, burn_in_epochs=1,
                max_epochs=3, checkpoint_every=1, seed=3)
    base.update(kw)
    return adv.ModelConfig(**base)


def tiny_split(n=24, d=6, seed=0, prefix="s"):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    ages = 10 + 3 * x[:, 0] + rng.normal(0, 0.3, n)
    vocab = {"sex": ("F", "M"), "tissue": ("a", "b", "c"), "platform": ("p", "q"),
             "series_id": ("s0", "s1", "s2")}
    labels = {a: rng.integers(0, len(v), n) for a, v in vocab.items()}
    labels["tissue"][:3] = [0, 1, 2]
    return adv.Split(tuple(f"{prefix}{i}" for i in range(n)), x, ages, labels, vocab)


def classes(split):
    return {a: len(v) for a, v in split.vocab.items()}


def tiny_model(**kw):
    data = tiny_split(d=kw.get("input_dim", 6))
    return adv.build_model(tiny_cfg(**kw), classes(data)), data


def jitter_biases(model, seed=0):
    # zero biases put rows whose inputs were all dropped exactly on a relu kink
    rng = np.random.default_rng(seed)
    for net in model.nets().values():
        for p in net.params():
            if p.name.endswith("/bias"):
                p.values[...] = rng.normal(0, 0.1, p.values.shape)


def reseeded(model, fn):
    """Run ``fn`` with the model's layer stream reset so every call sees the same masks."""
    state = model.layer_rng.get_state()

    def run():
        model.layer_rng.set_state(state)
        return fn()
    return run


# -- construction -------------------------------------------------------------

def test_dimensions():
    model, data = tiny_model()
    f = adv.encode(model, data.x)
    assert f.shape == (24, 8)
    assert adv.predict_age(model, data.x).shape == (24,)
    probs = adv.predict_attributes(model, data.x)
    assert {a: p.shape for a, p in probs.items()} == {
        "sex": (24, 2), "tissue": (24, 3), "platform": (24, 2), "series_id": (24, 3)}
    assert adv.head_dims(60) == (30, 15)
    assert adv.head_dims(40) == (20, 10)


def test_default_architecture_widths():
    cfg = adv.ModelConfig(input_dim=30)
    model = adv.build_model(cfg, {"sex": 2, "tissue": 4, "platform": 2, "series_id": 6})
    dense = [layer for layer in model.encoder.layers if layer.kind == "dense"]
    assert [(d.in_dim, d.out_dim) for d in dense] == [
        (30, 256), (256, 256), (256, 106), (106, 64), (64, 60)]
    head = [layer for layer in model.task_head.layers if layer.kind == "dense"]
    assert [(d.in_dim, d.out_dim) for d in head] == [(60, 30), (30, 15), (15, 1)]
    assert model.bp_heads["series_id"].layers[-1].out_dim == 6


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(latent_dim=3).validate()
    with pytest.raises(ConfigError):
        adv.ModelConfig.from_dict({"input_dim": 3, "bogus": 1})
    cfg = tiny_cfg()
    assert adv.ModelConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()


def test_encode_shape_mismatch():
    model, data = tiny_model()
    with pytest.raises(ShapeError):
        adv.encode(model, data.x[:, :5])


def test_bias_loss_rejects_unseen_labels():
    model, data = tiny_model()
    data.labels["sex"][0] = -1
    with pytest.raises(LabelError):
        adv.bias_loss(model, data, np.arange(8))


def test_same_seed_same_init():
    a, _ = tiny_model()
    b, _ = tiny_model()
    for g in ("encoder", "task", "bp"):
        assert a.group_digest(g) == b.group_digest(g)


# -- gradients of the three loss paths ----------------------------------------

def test_grad_bias_path():
    model, data = tiny_model()
    jitter_biases(model)
    idx = np.arange(10)

    def fn():
        return adv.bias_loss(model, data, idx)

    report = check_gradients(reseeded(model, fn), model.bp_params(), tol=1e-4)
    assert report.passed, report.per_param


@pytest.mark.parametrize("use_bsf", [False, True])
def test_grad_distiller_path(use_bsf):
    model, data = tiny_model(use_bsf=use_bsf, bsf_cut_threshold=2.0, alpha=0.7,
                             encoder_l2=1e-3)
    jitter_biases(model)
    idx = np.arange(10)

    def fn():
        return adv.distiller_loss(model, data, idx)[0]

    params = [p for p in model.encoder.params() if p.name != "bsf/w"]
    report = check_gradients(reseeded(model, fn), params, tol=1e-4)
    assert report.passed, report.per_param


def test_grad_distiller_gate_penalty():
    # the gate's data gradient is straight-through; its penalty gradient is exact
    model, data = tiny_model(use_bsf=True, bsf_cut_threshold=2.0, bsf_strength=0.3)
    model.bsf.w.values[...] = 0.8
    pen = model.bsf.penalty()
    assert pen == pytest.approx(0.3 * (6 * 0.8 - 2.0))
    model.bsf.w.grads[...] = 0
    model.bsf.penalty_backward()
    np.testing.assert_allclose(model.bsf.w.grads, 0.3)


def test_grad_task_path():
    model, data = tiny_model()
    jitter_biases(model)
    idx = np.arange(10)

    def fn():
        return adv.task_loss(model, data, idx)

    params = model.encoder.params() + model.task_head.params()
    report = check_gradients(reseeded(model, fn), params, tol=1e-4)
    assert report.passed, report.per_param


def test_distiller_linear_in_alpha():
    model, data = tiny_model(encoder_l2=1e-2)
    idx = np.arange(12)
    out, grads = {}, {}
    state = model.layer_rng.get_state()
    for alpha in (0.0, 1.0, 2.0):
        model.layer_rng.set_state(state)
        out[alpha] = adv.distiller_loss(model, data, idx, alpha)
        grads[alpha] = np.concatenate([p.grads.ravel() for p in model.encoder.params()])
    (l0, h0, o0), (l1, h1, o1), (l2, h2, o2) = out[0.0], out[1.0], out[2.0]
    assert h0 == h1 == h2 and o0 == o1 == o2
    assert l0 == pytest.approx(o0)
    assert l2 - l1 == pytest.approx(l1 - l0, rel=1e-12)
    np.testing.assert_allclose(grads[2.0] - grads[1.0], grads[1.0] - grads[0.0], atol=1e-12)


def test_distiller_does_not_touch_bias_predictor():
    model, data = tiny_model()
    before = model.group_digest("bp")
    adv.distiller_loss(model, data, np.arange(8))
    assert all(not p.grads.any() for p in model.bp_params())
    assert model.group_digest("bp") == before


# -- schedule -----------------------------------------------------------------

def test_train_step_update_counts():
    model, data = tiny_model()
    adv.train_step(model, data)
    assert (model.opt_bp.t, model.opt_dist.t, model.opt_task.t) == (5, 2, 1)
    adv.train_step(model, data)
    assert (model.opt_bp.t, model.opt_dist.t, model.opt_task.t) == (10, 4, 2)


def test_phase_hash_isolation():
    model, data = tiny_model()
    idx = np.arange(8)

    def digests():
        return {g: model.group_digest(g) for g in ("encoder", "task", "bp")}

    d0 = digests()
    adv.bias_loss(model, data, idx)
    model.opt_bp.step()
    d1 = digests()
    assert d1["encoder"] == d0["encoder"] and d1["task"] == d0["task"]
    assert d1["bp"] != d0["bp"]

    adv.distiller_loss(model, data, idx)
    model.opt_dist.step()
    d2 = digests()
    assert d2["bp"] == d1["bp"] and d2["task"] == d1["task"]
    assert d2["encoder"] != d1["encoder"]

    adv.task_loss(model, data, idx)
    model.opt_task.step()
    d3 = digests()
    assert d3["bp"] == d2["bp"]
    assert d3["encoder"] != d2["encoder"] and d3["task"] != d2["task"]


def test_train_step_is_deterministic():
    a, data = tiny_model()
    b, _ = tiny_model()
    ra = [adv.train_step(a, data) for _ in range(3)]
    rb = [adv.train_step(b, data) for _ in range(3)]
    assert ra == rb
    assert a.group_digest("encoder") == b.group_digest("encoder")


def test_distiller_raises_bias_loss_on_average():
    deltas = []
    for seed in range(100):
        model, data = tiny_model(seed=seed, lr_dist=1e-2)
        idx = np.arange(16)
        for _ in range(3):
            adv.bias_loss(model, data, idx)
            model.opt_bp.step()

        def h_now():
            f, _ = model.encoder.forward(data.x[idx], TRAIN, model.layer_rng, update_stats=False)
            return adv._bias_forward_backward(model, f, data, idx, TRAIN, False, False)[0]

        measure = reseeded(model, h_now)
        before = measure()
        adv.distiller_loss(model, data, idx)
        model.opt_dist.step()
        deltas.append(measure() - before)
    assert np.mean(deltas) >= 0.0


# -- fit, checkpoints, traces -------------------------------------------------

def test_fit_respects_burn_in():
    model, data = tiny_model(burn_in_epochs=2, max_epochs=4)
    val = tiny_split(n=10, seed=1, prefix="v")
    res = adv.fit(model, data, val)
    assert len(res.trace) == 4
    sel = res.trace.column("selected")
    assert sel[:2] == [0, 0]
    assert res.best.epoch > 2


def test_fit_flags_when_nothing_eligible():
    model, data = tiny_model(burn_in_epochs=5, max_epochs=2)
    res = adv.fit(model, data, tiny_split(n=10, seed=1, prefix="v"))
    assert res.best.epoch == 2 and res.flags


def test_fit_rejects_overlapping_validation():
    model, data = tiny_model()
    with pytest.raises(ValueError):
        adv.fit(model, data, data)


def test_trace_columns_and_roundtrip(tmp_path):
    model, data = tiny_model(max_epochs=2)
    res = adv.fit(model, data, tiny_split(n=10, seed=1, prefix="v"))
    cols = list(res.trace.rows[0])
    assert cols[:6] == ["epoch", "L_task", "L_BP", "L_dist", "H_dist", "val_MAE"]
    assert "r2_train_tissue" in cols and cols[-1] == "selected"
    res.trace.save(tmp_path / "t.tsv")
    back = adv.TrainTrace.load(tmp_path / "t.tsv")
    assert back.to_tsv() == res.trace.to_tsv()
    with pytest.raises(ValueError):
        back.append({"epoch": 1})


def test_resume_is_bit_exact(tmp_path):
    val = tiny_split(n=10, seed=1, prefix="v")
    full_model, data = tiny_model(max_epochs=4)
    full = adv.fit(full_model, data, val)

    half_model, _ = tiny_model(max_epochs=2)
    half = adv.fit(half_model, data, val)
    half.final.save(tmp_path / "ck.npz")
    ck = adv.Checkpoint.load(tmp_path / "ck.npz")
    resumed_model = ck.model()
    resumed_model.cfg.max_epochs = 4
    rest = adv.fit(resumed_model, data, val, resume=ck, resume_best=half.best)

    assert rest.trace.to_tsv() == full.trace.to_tsv()
    for g in ("encoder", "task", "bp"):
        assert resumed_model.group_digest(g) == full_model.group_digest(g)
    assert (tmp_path / "ck.npz").read_bytes() == (half.final.save(tmp_path / "ck2.npz")
                                                  or (tmp_path / "ck2.npz").read_bytes())


def test_fixed_schedule_checkpoints():
    model, data = tiny_model(schedule="fixed", max_epochs=500, checkpoint_every=10,
                             steps_per_epoch=1, burn_in_epochs=0, batch_size=4)
    seen = []
    res = adv.fit(model, data, tiny_split(n=10, seed=1, prefix="v"), on_checkpoint=lambda c: seen.append(c.epoch))
    assert len(seen) == 50 and seen[0] == 10 and seen[-1] == 500
    assert res.checkpoint_epochs == seen
    assert res.best.epoch % 10 == 0


def test_fixed_schedule_select_epoch():
    model, data = tiny_model(schedule="fixed", max_epochs=4, checkpoint_every=2,
                             select_epoch=2, burn_in_epochs=0)
    res = adv.fit(model, data, tiny_split(n=10, seed=1, prefix="v"))
    assert res.best.epoch == 2


def test_numerics_error_carries_last_good():
    model, data = tiny_model(max_epochs=3)
    data.x[0, 0] = np.nan
    with pytest.raises(NumericsError) as exc:
        adv.fit(model, data)
    assert exc.value.checkpoint is not None and exc.value.checkpoint.epoch == 0


def test_gene_ranking_requires_gate():
    model, _ = tiny_model()
    with pytest.raises(ConfigError):
        adv.gene_ranking(model, [f"g{i}" for i in range(6)])
    model, _ = tiny_model(use_bsf=True)
    model.bsf.w.values[...] = [0.9, 0.1, 0.6, 1.0, 0.2, 0.7]
    assert [g for g, _ in adv.gene_ranking(model, list("abcdef"))] == ["d", "a", "f", "c"]


def test_all_gates_closed_warns():
    model, data = tiny_model(use_bsf=True)
    model.bsf.w.values[...] = 0.0
    with pytest.warns(RuntimeWarning):
        f = adv.encode(model, data.x)
    assert np.all(f == f[0])


# -- qualitative minimax behaviour on a small confounded fixture --------------

def small_fixture(seed=0):
    cfg = synth.SynthConfig(n_samples=40, n_genes=60, k_signal=6, k_confound=6,
                            confound_strength=5.0, seed=seed)
    counts, meta, _ = synth.generate(cfg)
    gs = ingest.filter_genes(counts, meta)
    m = ingest.cpm_log_transform(counts, gs)
    x = ingest.apply_standardizer(m, ingest.fit_standardizer(m))
    return adv.Split.from_tables(x, meta)


def test_adversary_keeps_bias_loss_higher():
    data = small_fixture()
    final = {}
    for alpha in (0.0, 1.0):
        cfg = adv.ModelConfig(input_dim=data.x.shape[1], latent_dim=16,
                              encoder_widths=(32, 32, 16, 16), bp_width=32, bp_head_width=16,
                              alpha=alpha, max_epochs=8, burn_in_epochs=0, steps_per_epoch=20,
                              batch_size=32, seed=0)
        model = adv.build_model(cfg, classes(data))
        res = adv.fit(model, data)
        final[alpha] = res.trace.column("L_BP")[-1]
    assert final[1.0] >= final[0.0]
