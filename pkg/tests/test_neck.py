import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from gatedneck.core import ops
from gatedneck.core.ops import ConvSpec
from gatedneck.core.tensor import Tensor
from gatedneck.layers import Conv
from gatedneck.neck import CSPPAC, PAC, AttentionDownsample, AttentionUpsample, ChannelGate


def init(module, seed=0):
    return module.init_params(seed, np.float64)


def with_values(params, **arrays):
    out = dict(params)
    for k, v in arrays.items():
        out[k.replace("__", ".")] = Tensor(v, dtype=np.float64)
    return out


def x64(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def zeros_like(params, *names):
    return {n: Tensor(np.zeros(params[n].shape), dtype=np.float64) for n in names}


class TestChannelGate:
    def test_zero_params_give_half(self, rng):
        gate = ChannelGate("g", 4)
        p = {**init(gate), **zeros_like(init(gate), "g.conv.weight", "g.conv.bias")}
        assert np.all(gate(p, x64(rng, (2, 4, 5, 5))).data == 0.5)

    def test_large_bias_saturates(self, rng):
        gate = ChannelGate("g", 4)
        p = {**init(gate), "g.conv.bias": Tensor(np.full(4, 20.0), dtype=np.float64)}
        p["g.conv.weight"] = Tensor(np.zeros((4, 4, 1, 1)), dtype=np.float64)
        g = gate(p, x64(rng, (1, 4, 3, 3))).data
        assert np.all(np.abs(g - 1.0) <= 1e-8)

    def test_matches_scalar_oracle(self, rng):
        gate = ChannelGate("g", 5)
        p = init(gate, seed=3)
        x = x64(rng, (2, 5, 4, 6))
        want = oracles.channel_gate(x.data, p["g.conv.weight"].data, p["g.conv.bias"].data)
        assert oracles.rel_err(gate(p, x).data, want) <= 1e-13

    def test_output_dims(self, rng):
        assert ChannelGate("g", 6)(init(ChannelGate("g", 6)), x64(rng, (3, 6, 4, 4))).shape == (3, 6, 1, 1)

    @given(st.floats(-1e6, 1e6), st.integers(0, 2 ** 32))
    def test_bounded(self, scale, seed):
        gate = ChannelGate("g", 4)
        x = np.random.default_rng(seed).standard_normal((1, 4, 2, 2)) * scale
        g = gate(init(gate, seed), Tensor(x, dtype=np.float64)).data
        assert np.all(g > 0) and np.all(g < 1)

    def test_channel_mismatch(self, rng):
        gate = ChannelGate("g", 4)
        with pytest.raises(ValueError, match="channels"):
            gate(init(gate), x64(rng, (1, 3, 2, 2)))


def identity_fuse(block):
    c = block.channels
    block.fuse = Conv(block.fuse.name, ConvSpec(c, c, 1, activation="identity"))
    return {f"{block.fuse.name}.weight": Tensor(np.eye(c).reshape(c, c, 1, 1), dtype=np.float64),
            f"{block.fuse.name}.bias": Tensor(np.zeros(c), dtype=np.float64)}


class TestAttentionUpsample:
    def test_shape(self, rng):
        au = AttentionUpsample("au", 8)
        assert au(init(au), x64(rng, (1, 8, 4, 4))).shape == (1, 8, 8, 8)

    def test_zero_gate_halves_the_concat(self, rng):
        au = AttentionUpsample("au", 8)
        p = init(au)
        p.update(zeros_like(p, "au.gate.conv.weight", "au.gate.conv.bias"))
        p.update(identity_fuse(au))
        x = x64(rng, (2, 8, 3, 5))
        u1 = au.deconv(p, x)
        u2 = au.up_conv(p, ops.upsample_nearest(x))
        want = 0.5 * np.concatenate([u1.data, u2.data], axis=1)
        assert np.array_equal(au.gated(p, x).data, want)
        assert np.array_equal(au(p, x).data, want)

    def test_branch_order(self, rng):
        au = AttentionUpsample("au", 8)
        p = init(au)
        p.update(zeros_like(p, "au.deconv.weight", "au.deconv.bias"))
        y = au.gated(p, x64(rng, (1, 8, 4, 4))).data
        assert np.all(y[:, :4] == 0) and np.all(y[:, 4:] != 0)

    def test_raising_gate_bias_never_shrinks(self, rng):
        au = AttentionUpsample("au", 6)
        p = init(au)
        x = x64(rng, (1, 6, 4, 4))
        before = np.abs(au.gated(p, x).data)
        b = p["au.gate.conv.bias"].data + 0.75
        after = np.abs(au.gated(with_values(p, au__gate__conv__bias=b), x).data)
        assert np.all(after >= before)

    def test_odd_channels(self):
        with pytest.raises(ValueError, match="even"):
            AttentionUpsample("au", 7)

    def test_param_closed_form(self):
        c, h = 8, 4
        au = AttentionUpsample("au", c)
        want = (c * c + c) + (c * h * 4 + h) + (c * h + h) + (c * c + c)
        assert au.num_params() == want
        assert sum(t.data.size for t in init(au).values()) == want
        big = AttentionUpsample("au", c, up_kernel=3, fuse_kernel=3)
        assert big.num_params() == want + 8 * c * h + 8 * c * c


class TestAttentionDownsample:
    def test_shape(self, rng):
        ad = AttentionDownsample("ad", 8)
        assert ad(init(ad), x64(rng, (1, 8, 16, 16))).shape == (1, 8, 8, 8)

    def test_constant_input_survives_pooling(self):
        ad = AttentionDownsample("ad", 4)
        p = init(ad)
        x = Tensor(np.full((1, 4, 6, 6), 1.5), dtype=np.float64)
        pooled = ops.maxpool2d(x).data
        assert np.all(pooled == 1.5)
        # the pool branch of a constant input is spatially constant too
        d2 = ad.pool_conv(p, ops.maxpool2d(x)).data
        assert np.all(d2 == d2[:, :, :1, :1])

    def test_branch_order(self, rng):
        ad = AttentionDownsample("ad", 8)
        p = init(ad)
        p.update(zeros_like(p, "ad.stride_conv.weight", "ad.stride_conv.bias"))
        y = ad.gated(p, x64(rng, (1, 8, 6, 6))).data
        assert np.all(y[:, :4] == 0) and np.all(y[:, 4:] != 0)

    def test_raising_gate_bias_never_shrinks(self, rng):
        ad = AttentionDownsample("ad", 6)
        p = init(ad)
        x = x64(rng, (1, 6, 8, 8))
        before = np.abs(ad.gated(p, x).data)
        b = p["ad.gate.conv.bias"].data + 2.0
        after = np.abs(ad.gated(with_values(p, ad__gate__conv__bias=b), x).data)
        assert np.all(after >= before)

    def test_zero_gate_halves_the_concat(self, rng):
        ad = AttentionDownsample("ad", 4)
        p = init(ad)
        p.update(zeros_like(p, "ad.gate.conv.weight", "ad.gate.conv.bias"))
        p.update(identity_fuse(ad))
        x = x64(rng, (1, 4, 4, 4))
        d = np.concatenate([ad.stride_conv(p, x).data, ad.pool_conv(p, ops.maxpool2d(x)).data], axis=1)
        assert np.array_equal(ad(p, x).data, 0.5 * d)

    @pytest.mark.parametrize("shape", [(1, 8, 7, 8), (1, 8, 8, 5)])
    def test_odd_spatial(self, rng, shape):
        ad = AttentionDownsample("ad", 8)
        with pytest.raises(ValueError, match="even"):
            ad(init(ad), x64(rng, shape))

    def test_odd_channels(self):
        with pytest.raises(ValueError, match="even"):
            AttentionDownsample("ad", 5)

    def test_param_closed_form(self):
        c, h = 8, 4
        ad = AttentionDownsample("ad", c)
        want = (c * c + c) + (c * h * 9 + h) + (c * h + h) + (c * c * 9 + c)
        assert ad.num_params() == want == sum(t.data.size for t in init(ad).values())


class TestPAC:
    def test_shape(self, rng):
        pac = PAC("pac", 16)
        assert pac(init(pac), x64(rng, (1, 16, 20, 20))).shape == (1, 16, 20, 20)

    def test_center_tap_degeneracy(self, rng):
        c = 4
        pac = PAC("pac", c)
        p = init(pac)
        w = np.zeros((c, c, 3, 3))
        w[:, :, 1, 1] = np.eye(c)
        for d in PAC.dilations:
            p[f"pac.branch{d}.weight"] = Tensor(w, dtype=np.float64)
            p[f"pac.branch{d}.bias"] = Tensor(np.zeros(c), dtype=np.float64)
        x = x64(rng, (1, c, 7, 7))
        slabs = [o.data for o in pac.branch_outputs(p, x)]
        assert np.array_equal(slabs[0], slabs[1]) and np.array_equal(slabs[1], slabs[2])
        assert np.allclose(slabs[0], oracles.silu(x.data), rtol=1e-15, atol=0)

    def test_matches_oracle_composition(self, rng):
        c = 3
        pac = PAC("pac", c)
        p = init(pac, seed=11)
        x = x64(rng, (2, c, 7, 6))
        branches = [oracles.silu(oracles.conv2d(x.data, p[f"pac.branch{d}.weight"].data,
                                                p[f"pac.branch{d}.bias"].data, padding=d, dilation=d))
                    for d in PAC.dilations]
        want = oracles.silu(oracles.conv2d(np.concatenate(branches, axis=1),
                                           p["pac.merge.weight"].data, p["pac.merge.bias"].data))
        assert oracles.rel_err(pac(p, x).data, want) <= 1e-10

    def test_channel_mismatch(self, rng):
        pac = PAC("pac", 4)
        with pytest.raises(ValueError, match="channels"):
            pac(init(pac), x64(rng, (1, 5, 4, 4)))

    def test_param_closed_form(self):
        m = 6
        assert PAC("pac", m).num_params() == 3 * (9 * m * m + m) + (3 * m * m + m)


class TestCSPPAC:
    def test_shape(self, rng):
        csp = CSPPAC("csp", 32, 32)
        assert csp(init(csp), x64(rng, (1, 32, 10, 10))).shape == (1, 32, 10, 10)

    def test_default_widths(self):
        csp = CSPPAC("csp", 8)
        assert (csp.mid_channels, csp.out_channels) == (4, 8)
        assert csp.pac.channels == 4

    def test_shortcut_isolated_from_pac(self, rng):
        csp = CSPPAC("csp", 8)
        p = init(csp)
        main = [k for k in p if k.startswith(("csp.main_in.", "csp.pac."))]
        p.update(zeros_like(p, *main))
        x = x64(rng, (1, 8, 6, 6))
        y0 = csp(p, x).data
        perturbed = dict(p)
        for k in main:
            if k.endswith("weight") and k.startswith("csp.pac."):
                perturbed[k] = x64(rng, p[k].shape)
        assert np.array_equal(csp(perturbed, x).data, y0)

    def test_channel_mismatch(self, rng):
        csp = CSPPAC("csp", 8)
        with pytest.raises(ValueError, match="channels"):
            csp(init(csp), x64(rng, (1, 6, 4, 4)))

    def test_param_closed_form(self):
        c, m, o = 16, 4, 8
        csp = CSPPAC("csp", c, o, mid_channels=m)
        pac = 3 * (9 * m * m + m) + (3 * m * m + m)
        assert csp.num_params() == 2 * (c * m + m) + pac + (2 * m * o + o)


@pytest.mark.parametrize("c,h,w", [(4, 4, 4), (8, 6, 10), (16, 12, 8), (32, 4, 32)])
def test_block_shape_examples(rng, c, h, w):
    x = x64(rng, (1, c, h, w))
    for block, want in [(AttentionUpsample("b", c), (1, c, 2 * h, 2 * w)),
                        (AttentionDownsample("b", c), (1, c, h // 2, w // 2)),
                        (PAC("b", c), (1, c, h, w)),
                        (CSPPAC("b", c), (1, c, h, w))]:
        assert block(init(block), x).shape == want
        assert block.count(x.shape)[0] == want


def test_names_are_dotted_paths():
    au = AttentionUpsample("neck.up0", 4)
    assert list(au.param_shapes()) == [
        "neck.up0.gate.conv.weight", "neck.up0.gate.conv.bias",
        "neck.up0.deconv.weight", "neck.up0.deconv.bias",
        "neck.up0.up_conv.weight", "neck.up0.up_conv.bias",
        "neck.up0.fuse.weight", "neck.up0.fuse.bias",
    ]
    assert au.param_shapes()["neck.up0.deconv.weight"] == (4, 2, 2, 2)
    assert math.prod(au.param_shapes()["neck.up0.fuse.weight"]) == 16
