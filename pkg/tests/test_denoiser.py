import numpy as np
import pytest

from gsdiff import tensor as te
from gsdiff.camera import look_at
from gsdiff.denoiser import Denoiser, DenoiserConfig, patchify_array, render_tensor, timestep_features, unpatchify
from gsdiff.errors import ContractError
from gsdiff.raster import RenderConfig
from gsdiff.tensor import Tape, Tensor

SMALL = DenoiserConfig(embed_dim=16, depth=2, heads=2, patch_size=4, height=8, width=8, num_views=2, num_novel=1)
EXACT = RenderConfig(tile_size=8, alpha_threshold=0.0, transmittance_floor=0.0)


def poses(cfg, n, radius=3.0):
    out = []
    for k in range(n):
        a = 0.4 * k
        out.append(look_at([radius * np.sin(a), -radius * np.cos(a), 0.6], [0, 0, 0], width=cfg.width,
                           height=cfg.height))
    return out


def randomize(model, seed=0, scale=0.2):
    # trained-looking weights: every zero-initialized modulation gets a value
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if ".ada." in name:
            p.data = (rng.standard_normal(p.shape) * scale).astype(model.dtype)


def inputs(cfg, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    ps = poses(cfg, cfg.num_views + 1)
    images = rng.uniform(-1, 1, (cfg.num_views + 1, cfg.height, cfg.width, 3))
    model = Denoiser(cfg, dtype=dtype)
    views, origins, dirs = model.prepare(images[0], ps[0], images[1:], ps[1:])
    return views[None], origins[None], dirs[None], ps


def test_default_token_counts():
    cfg = DenoiserConfig()
    assert cfg.tokens == 256
    model = Denoiser(cfg)
    assert model.params["patch.w"].shape == (144, 128)
    x = np.zeros((1, 4, 32, 32, 9), dtype=np.float32)
    assert model.patchify(x).shape == (1, 256, 128)


def test_unpatchify_inverts_patchify():
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 12, 5))
    tokens = patchify_array(x, 4)
    assert tokens.shape == (2, 18, 80)
    assert np.array_equal(unpatchify(tokens, 3, 8, 12, 4).data, x)
    # first token is the top-left patch of view 0, flattened row-major
    assert np.array_equal(tokens.data[0, 0], x[0, 0, :4, :4].reshape(-1))


def test_patch_shape_errors():
    with pytest.raises(ContractError):
        DenoiserConfig(height=30)
    with pytest.raises(ContractError):
        DenoiserConfig(embed_dim=10, heads=4)
    with pytest.raises(ContractError):
        patchify_array(np.zeros((1, 1, 6, 8, 2)), 4)
    with pytest.raises(ContractError):
        Denoiser(SMALL).patchify(np.zeros((1, 2, 8, 8, 9)))


def test_timestep_features():
    f = timestep_features([0, 500], 8)
    np.testing.assert_array_equal(f[0], [1, 1, 1, 1, 0, 0, 0, 0])
    assert np.array_equal(timestep_features(17, 8), timestep_features([17], 8))
    assert not np.allclose(f[0], f[1])


def test_blocks_are_identity_at_init():
    model = Denoiser(SMALL, dtype=np.float64)
    views, *_ = inputs(SMALL)
    temb = model.time_embedding([300])
    x = model.patchify(views)
    for i in range(SMALL.depth):
        assert np.array_equal(model.transformer_block(i, x, temb).data, x.data)
    tokens, _ = model.backbone(views, [300])
    assert np.array_equal(tokens.data, x.data)


def test_output_depends_on_timestep():
    model = Denoiser(SMALL, dtype=np.float64)
    randomize(model)
    views, *_ = inputs(SMALL)
    a, _ = model.backbone(views, [0])
    b, _ = model.backbone(views, [1000])
    assert np.abs(a.data - b.data).max() > 1e-3


def test_gradient_reaches_every_parameter():
    model = Denoiser(SMALL, dtype=np.float64)
    randomize(model)
    views, origins, dirs, ps = inputs(SMALL)
    g = np.random.default_rng(1)
    with Tape() as tape:
        loss = None
        for tag in ("object", "scene"):
            tokens, temb = model.backbone(views, [250])
            raw = model.decode(tokens, temb, tag)
            term = (raw * Tensor(g.standard_normal(raw.shape))).sum()
            loss = term if loss is None else loss + term
        tape.backward(loss)
    for name, p in model.params.items():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name


def test_decode_shapes_and_heads():
    model = Denoiser(DenoiserConfig(depth=1), seed=3)
    randomize(model, scale=0.05)
    x = np.random.default_rng(2).uniform(-1, 1, (1, 4, 32, 32, 9)).astype(np.float32)
    tokens, temb = model.backbone(x, [100])
    obj = model.decode_gaussians(tokens, temb, "object")
    scene = model.decode_gaussians(tokens, temb, "scene")
    assert len(obj[0]) == 4 and obj[0][0].values.shape == (32, 32, 12)
    assert not np.allclose(obj[0][1].values, scene[0][1].values)
    with pytest.raises(ContractError):
        model.decode(tokens, temb, "indoor")
    model.drop_head("scene")
    assert model.heads == ("object",)
    model.decode(tokens, temb, "object")
    with pytest.raises(ContractError):
        model.decode(tokens, temb, "scene")
    with pytest.raises(ContractError):
        model.drop_head("scene")


def test_forward_cloud_size_and_determinism():
    cfg = DenoiserConfig(depth=1)
    model = Denoiser(cfg)
    rng = np.random.default_rng(4)
    ps = poses(cfg, 4)
    cond = rng.uniform(-1, 1, (32, 32, 3))
    noisy = rng.standard_normal((3, 32, 32, 3))
    a = model.forward(cond, ps[0], noisy, ps[1:], 700, "object")
    b = model.forward(cond, ps[0], noisy, ps[1:], 700, "object")
    assert len(a) == 4096
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)
    with pytest.raises(ContractError):
        model.forward(cond, ps[0], noisy[:2], ps[1:3], 700, "object")


def _image_loss(model, views, origins, dirs, pose, weights, tag="object"):
    parts = model.forward_tensors(views, origins, dirs, [400], tag)
    image = render_tensor({k: v[0] for k, v in parts.items() if k != "depth"}, pose, EXACT)
    return (image * Tensor(weights.astype(model.dtype))).sum()


def _image_loss_value(model, views, origins, dirs, pose, weights):
    # measured in f64 so the difference quotient is not limited by the final reduction
    parts = model.forward_tensors(views, origins, dirs, [400], "object")
    image = render_tensor({k: v[0] for k, v in parts.items() if k != "depth"}, pose, EXACT)
    return float(np.sum(image.data.astype(np.float64) * weights))


@pytest.mark.parametrize("dtype,h,tol", [(np.float64, 1e-5, 1e-4), (np.float32, 1e-2, 1e-2)])
def test_end_to_end_finite_differences(dtype, h, tol):
    cfg = DenoiserConfig(embed_dim=16, depth=1, heads=2, patch_size=4, height=8, width=8, num_views=1)
    model = Denoiser(cfg, seed=5, dtype=dtype)
    randomize(model, seed=5)
    views, origins, dirs, ps = inputs(cfg, seed=6)
    views = views.astype(dtype)
    target = look_at([2.0, -2.2, 1.0], [0, 0, 0], width=8, height=8)
    weights = np.random.default_rng(7).standard_normal((8, 8, 3))
    with Tape() as tape:
        tape.backward(_image_loss(model, views, origins, dirs, target, weights))
    rng = np.random.default_rng(8)
    names = sorted(n for n, p in model.params.items() if p.grad is not None)
    largest = max(np.abs(model.params[n].grad).max() for n in names)
    picks = []
    while len(picks) < 10:
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        if abs(float(p.grad[idx])) > 1e-3 * largest:
            picks.append((name, idx))
    assert any(n == "patch.w" for n, _ in picks) or np.abs(model.params["patch.w"].grad).max() > 0
    analytic, numeric = [], []
    for name, idx in picks:
        p = model.params[name]
        old = p.data[idx]
        vals = []
        for step in (h, -h):
            p.data[idx] = old + step
            vals.append(_image_loss_value(model, views, origins, dirs, target, weights))
        p.data[idx] = old
        numeric.append((vals[0] - vals[1]) / (2 * h))
        analytic.append(float(p.grad[idx]))
    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.abs(analytic - numeric).max() / np.abs(numeric).max() <= tol


def test_state_dict_round_trip_and_mismatch():
    a = Denoiser(SMALL, seed=1)
    b = Denoiser(SMALL, seed=2)
    assert a.fingerprint() != b.fingerprint()
    b.load_state_dict(a.state_dict())
    assert a.fingerprint() == b.fingerprint()
    a.drop_head("object")
    c = Denoiser(SMALL, seed=3)
    c.load_state_dict(a.state_dict())
    assert c.heads == ("scene",)
    state = a.state_dict()
    state["pos"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ContractError):
        c.load_state_dict(state)
    del state["pos"]
    with pytest.raises(ContractError):
        c.load_state_dict(state)


def test_config_json_round_trip():
    cfg = DenoiserConfig(embed_dim=32, heads_enabled=("object",))
    assert DenoiserConfig.from_json(cfg.to_json()) == cfg
    assert Denoiser(cfg).heads == ("object",)


def test_render_tensor_gradient_flows_to_inputs():
    rng = np.random.default_rng(9)
    pose = look_at([0, -3, 0.5], [0, 0, 0], width=8, height=8)
    parts = {"means": rng.uniform(-0.3, 0.3, (6, 3)), "quats": rng.standard_normal((6, 4)),
             "scales": rng.uniform(0.1, 0.3, (6, 3)), "opacities": rng.uniform(0.3, 0.9, 6),
             "colors": rng.uniform(0, 1, (6, 3))}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in parts.items()}
    with Tape() as tape:
        tape.backward(te.sum_(render_tensor(leaves, pose, EXACT)))
    for k, leaf in leaves.items():
        assert leaf.grad.shape == parts[k].shape and np.abs(leaf.grad).max() > 0, k
