import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from semfuse.fusion import fused_dim
from semfuse.image_encoder import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    DenseNetBackbone,
    ImageEncoder,
    ResNetBackbone,
    StandinImageBackbone,
    encode_image,
    load_image,
    preprocess_image,
    to_rgb,
)


def natural_image(seed=0, w=500, h=300):
    rng = np.random.default_rng(seed)
    # smooth gradients plus noise so left and right halves differ
    x = np.linspace(0, 1, w)[None, :, None]
    y = np.linspace(0, 1, h)[:, None, None]
    base = np.concatenate([x * np.ones((h, 1, 1)), y * np.ones((1, w, 1)), x * y], axis=2)
    arr = 255 * np.clip(base + 0.1 * rng.standard_normal((h, w, 3)), 0, 1)
    return Image.fromarray(arr.astype(np.uint8))


@pytest.fixture(scope="module")
def encoder():
    return ImageEncoder(StandinImageBackbone(seed=0)).eval()


class TestPreprocess:
    def test_shape_eval(self):
        t = preprocess_image(natural_image())
        assert t.shape == (3, 224, 224) and torch.isfinite(t).all()

    def test_train_mode_seeded(self):
        img = natural_image(1)
        a = preprocess_image(img, train_mode=True, seed=7)
        b = preprocess_image(img, train_mode=True, seed=7)
        assert torch.equal(a, b)
        others = [preprocess_image(img, train_mode=True, seed=s) for s in range(8)]
        assert any(not torch.equal(a, o) for o in others)

    def test_eval_ignores_seed(self):
        img = natural_image(2)
        assert torch.equal(preprocess_image(img, seed=0), preprocess_image(img, seed=123))

    @pytest.mark.parametrize("gray", [0, 77, 128, 255])
    def test_constant_gray(self, gray):
        img = Image.new("RGB", (40, 90), (gray, gray, gray))
        t = preprocess_image(img).numpy()
        for c in range(3):
            expected = (gray / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]
            np.testing.assert_allclose(t[c], expected, atol=1e-6)

    def test_channel_modes(self):
        assert preprocess_image(Image.new("L", (5, 5), 10)).shape == (3, 224, 224)
        assert preprocess_image(np.zeros((3, 3, 1), dtype=np.uint8)).shape == (3, 224, 224)
        rgba = Image.new("RGBA", (4, 4), (0, 0, 0, 0))
        # fully transparent pixels composite onto white
        assert to_rgb(rgba).getpixel((0, 0)) == (255, 255, 255)

    def test_single_pixel(self):
        assert preprocess_image(Image.new("RGB", (1, 1), (1, 2, 3))).shape == (3, 224, 224)

    def test_undecodable(self, tmp_path):
        bad = tmp_path / "x.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(ValueError):
            load_image(bad)
        with pytest.raises(ValueError):
            preprocess_image("not an image")


class TestEncode:
    def test_dims(self, encoder):
        rep = encode_image(preprocess_image(natural_image()), encoder)
        assert rep.final.shape == (768,) and rep.intermediate.shape == (512,)

    def test_batched(self, encoder):
        x = torch.stack([preprocess_image(natural_image(s)) for s in range(3)])
        rep = encode_image(x, encoder)
        assert rep.final.shape == (3, 768)
        single = encode_image(x[1], encoder)
        torch.testing.assert_close(rep.final[1], single.final, atol=1e-5, rtol=1e-5)

    def test_deterministic(self, encoder):
        t = preprocess_image(natural_image(3))
        a, b = encode_image(t, encoder), encode_image(t, encoder)
        assert torch.equal(a.final, b.final) and torch.equal(a.intermediate, b.intermediate)

    def test_zero_tensor_gives_projection_bias(self):
        enc = ImageEncoder(StandinImageBackbone(seed=1)).eval()
        with torch.no_grad():
            enc.proj.bias.copy_(torch.linspace(-1, 1, 768))
        rep = encode_image(torch.zeros(3, 224, 224), enc)
        # bias-free convs map zero to zero; ReLU follows the projection
        np.testing.assert_allclose(rep.final.detach().numpy(), np.maximum(np.linspace(-1, 1, 768), 0), atol=1e-6)
        assert torch.count_nonzero(rep.intermediate) == 0

    def test_zero_bias_zero_input(self, encoder):
        enc = ImageEncoder(StandinImageBackbone(seed=1), relu=False).eval()
        with torch.no_grad():
            enc.proj.bias.zero_()
        assert torch.count_nonzero(encode_image(torch.zeros(3, 224, 224), enc).final) == 0

    def test_flip_changes_features(self, encoder):
        t = preprocess_image(natural_image(4))
        a = encode_image(t, encoder).final
        b = encode_image(torch.flip(t, dims=[2]), encoder).final
        assert not torch.allclose(a, b)

    def test_wrong_shape(self, encoder):
        with pytest.raises(ValueError):
            encode_image(torch.zeros(3, 100, 100), encoder)
        with pytest.raises(ValueError):
            encode_image(torch.full((3, 224, 224), float("nan")), encoder)

    def test_backbone_mismatch(self):
        # a projection sized for a different backbone
        enc = ImageEncoder(StandinImageBackbone(seed=0)).eval()
        enc.proj = torch.nn.Linear(10, 768)
        with pytest.raises(ValueError, match="mismatch"):
            encode_image(torch.zeros(3, 224, 224), enc)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 50))
    def test_finite(self, encoder, seed, scale):
        g = torch.Generator().manual_seed(seed)
        t = torch.randn(3, 224, 224, generator=g) * scale
        rep = encode_image(t, encoder)
        assert torch.isfinite(rep.final).all() and torch.isfinite(rep.intermediate).all()


def conv2d_reference(x, w, stride, pad):
    """Loop convolution, (C, H, W) input and (O, C, k, k) weights."""
    x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    o, c, k, _ = w.shape
    hh = (x.shape[1] - k) // stride + 1
    ww = (x.shape[2] - k) // stride + 1
    out = np.zeros((o, hh, ww))
    for oc in range(o):
        for i in range(hh):
            for j in range(ww):
                patch = x[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[oc, i, j] = np.sum(patch * w[oc])
    return out


def test_tiny_standin_forward_by_hand():
    bb = StandinImageBackbone(widths=(2, 3, 4, 2), stem_kernel=2, stem_stride=2, seed=11).double()
    enc = ImageEncoder(bb, out_dim=5).double().eval()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 4))
    # stem reduces 4x4 to a 2x2 map, then the 2x2 path runs through the blocks
    w = {name: getattr(bb, name).weight.detach().numpy() for name in ("stem", "block1", "block2", "block3")}
    h = np.maximum(conv2d_reference(x, w["stem"], 2, 0), 0)
    assert h.shape == (2, 2, 2)
    h = np.maximum(conv2d_reference(h, w["block1"], 2, 1), 0)
    inter = np.maximum(conv2d_reference(h, w["block2"], 1, 0), 0)
    last = np.maximum(conv2d_reference(inter, w["block3"], 2, 1), 0)
    pen = last.mean(axis=(1, 2))
    final = np.maximum(enc.proj.weight.detach().numpy() @ pen + enc.proj.bias.detach().numpy(), 0)

    rep = enc(torch.from_numpy(x)[None])
    np.testing.assert_allclose(rep.final[0].detach().numpy(), final, atol=1e-10)
    np.testing.assert_allclose(rep.intermediate[0].detach().numpy(), inter.mean(axis=(1, 2)), atol=1e-10)


@pytest.mark.slow
def test_resnet152_dims():
    enc = ImageEncoder(ResNetBackbone()).eval()
    with torch.no_grad():
        rep = encode_image(torch.zeros(3, 224, 224), enc)
    assert rep.final.shape == (768,) and rep.intermediate.shape == (512,)
    assert enc.backbone.penultimate_dim == 2048


@pytest.mark.slow
def test_densenet_intermediate_recomputes_fused_dim():
    bb = DenseNetBackbone()
    assert bb.intermediate_dim == 768 and bb.penultimate_dim == 2208
    enc = ImageEncoder(bb).eval()
    with torch.no_grad():
        rep = encode_image(torch.zeros(1, 3, 224, 224), enc)
    assert rep.intermediate.shape == (1, 768)
    assert fused_dim("mfas", image_inter_dim=bb.intermediate_dim) == 3 * 768 + 768
