import numpy as np
import pytest

from smamba.config import ModelConfig, tiny_model_config
from smamba.decoder import MaskDecoder, MaskPromptEncoder, TwoWayBlock, decode, encode_mask_prompt, two_way_block
from smamba.gradcheck import gradcheck
from smamba.model import SamMamba, model_forward
from smamba.module import Linear
from smamba.tensor import Tensor, default_dtype
from smamba.verify import randomize_for_gradcheck, run_gradcheck


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


def linears(module):
    for value in vars(module).values():
        if isinstance(value, Linear):
            yield value
        elif hasattr(value, "__dict__") and not isinstance(value, np.ndarray):
            yield from linears(value)


class TestMaskPrompt:
    def test_zero_logits_give_constant_embedding(self):
        enc = MaskPromptEncoder(np.random.default_rng(0), 8, 16)
        emb = encode_mask_prompt(Tensor(np.zeros((1, 32, 32))), enc).data
        np.testing.assert_allclose(emb, np.broadcast_to(emb[:, :1, :1], emb.shape), atol=1e-14)

    def test_shape(self):
        enc = MaskPromptEncoder(np.random.default_rng(0), 8, 24)
        assert encode_mask_prompt(Tensor(np.zeros((2, 32, 32))), enc).shape == (2, 4, 4, 24)

    def test_doubling_projection_doubles_embedding(self):
        enc = MaskPromptEncoder(np.random.default_rng(1), 8, 16)
        logits = Tensor(np.random.default_rng(2).normal(size=(1, 16, 16)))
        base = encode_mask_prompt(logits, enc).data
        enc.proj.weight.data = enc.proj.weight.data * 2.0
        np.testing.assert_allclose(encode_mask_prompt(logits, enc).data, 2.0 * base, rtol=1e-13)

    def test_size_mismatch(self):
        enc = MaskPromptEncoder(np.random.default_rng(0), 8, 16)
        with pytest.raises(ValueError):
            encode_mask_prompt(Tensor(np.zeros((1, 16, 16))), enc, (32, 32))


class TestTwoWayBlock:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.blk = TwoWayBlock(rng, 8)
        self.tokens = rng.normal(size=(1, 5, 8))
        self.image = rng.normal(size=(1, 4, 8))
        self.pos = Tensor(rng.normal(size=(4, 8)))

    def test_zero_weights_identity(self):
        for lin in linears(self.blk):
            lin.weight.data[:] = 0.0
            if lin.bias is not None:
                lin.bias.data[:] = 0.0
        t, i = two_way_block(Tensor(self.tokens), Tensor(self.image), self.pos, self.blk, 2)
        np.testing.assert_array_equal(t.data, self.tokens)
        np.testing.assert_array_equal(i.data, self.image)

    def test_shapes_preserved(self):
        t, i = two_way_block(Tensor(self.tokens), Tensor(self.image), self.pos, self.blk, 2)
        assert t.shape == self.tokens.shape and i.shape == self.image.shape

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        pt, pi = Tensor(rng.normal(size=(1, 5, 8))), Tensor(rng.normal(size=(1, 4, 8)))

        def f():
            t, i = two_way_block(Tensor(self.tokens), Tensor(self.image), self.pos, self.blk, 2)
            return (t * pt).sum() + (i * pi).sum()

        assert gradcheck(f, self.blk.parameters()) < 1e-4


class TestDecode:
    def test_zero_hyper_output_gives_zero_logits(self):
        dec = MaskDecoder(np.random.default_rng(0), tiny_model_config())
        rng = np.random.default_rng(1)
        emb, prompt = Tensor(rng.normal(size=(1, 2, 2, 8))), Tensor(rng.normal(size=(1, 2, 2, 8)))
        np.testing.assert_array_equal(decode(emb, prompt, dec).data, 0.0)

    def test_default_shape(self):
        with default_dtype(np.float32):
            dec = MaskDecoder(np.random.default_rng(0), ModelConfig())
            z = Tensor(np.zeros((1, 4, 4, 64), np.float32))
            assert decode(z, z, dec).shape == (1, 32, 32)

    def test_prompt_path_is_live(self):
        model = SamMamba(tiny_model_config())
        randomize_for_gradcheck(model, 0)
        rng = np.random.default_rng(2)
        emb = Tensor(rng.normal(size=(1, 2, 2, 8)))
        a = decode(emb, Tensor(rng.normal(size=(1, 2, 2, 8))), model.decoder).data
        b = decode(emb, Tensor(rng.normal(size=(1, 2, 2, 8))), model.decoder).data
        assert np.abs(a - b).max() > 0

    def test_deterministic(self):
        model = SamMamba(tiny_model_config())
        randomize_for_gradcheck(model, 1)
        img = np.random.default_rng(3).uniform(size=(1, 16, 16, 3))
        np.testing.assert_array_equal(model_forward(img, model).decoder_logits.data, model_forward(img, model).decoder_logits.data)

    def test_mismatched_prompt(self):
        dec = MaskDecoder(np.random.default_rng(0), tiny_model_config())
        with pytest.raises(ValueError):
            decode(Tensor(np.zeros((1, 2, 2, 8))), Tensor(np.zeros((1, 4, 4, 8))), dec)

    def test_pipeline_gradcheck(self):
        (result,) = run_gradcheck(["decoder"])
        assert result.max_rel_error < 1e-4
