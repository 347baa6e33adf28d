import pytest
import torch

from mvak import vocab
from mvak.adapter import (
    FULL,
    PARALLEL,
    ROW_COLUMN,
    ROW_WISE,
    SERIAL,
    AttentionProjections,
    decoupled_block,
    image_cross_attention,
    init_adapter,
    multi_view_attention,
)
from mvak.backbone import BackboneConfig, DenoiserBackbone
from mvak.numerics import Rng, ShapeError

TINY = BackboneConfig(
    base_channels=8,
    channel_mults=(1, 2),
    groups=4,
    text_dim=16,
    image_size=(16, 16),
    time_embed_dim=32,
)


@pytest.fixture(scope="module")
def frozen_backbone():
    return DenoiserBackbone(TINY, Rng(100)).freeze()


@pytest.fixture
def fresh_adapter(frozen_backbone):
    return init_adapter(frozen_backbone, ROW_WISE, PARALLEL, Rng(200))


def random_projections(dim, rng, zero_wo=False):
    proj = AttentionProjections(dim).double()
    with torch.no_grad():
        for name, p in proj.named_parameters():
            if zero_wo and name.startswith("wo"):
                p.zero_()
            else:
                p.copy_(rng.normal_tensor(p.shape, torch.float64) * 0.4)
    return proj


def masked_context(proj, tokens_flat, mask):
    """Full attention over all tokens with an additive mask; no output projection."""
    q = tokens_flat @ proj.wq.weight.T.double()
    k = tokens_flat @ proj.wk.weight.T.double()
    v = tokens_flat @ proj.wv.weight.T.double()
    logits = proj.scale * (q @ k.T) + mask
    w = torch.softmax(logits, dim=-1)
    return w @ v


def row_mask(n, h, w_):
    rows = torch.arange(n * h * w_).reshape(n, h, w_) // w_ % h
    rows = rows.reshape(-1)
    return torch.where(rows[:, None] == rows[None, :], 0.0, -torch.inf).double()


def col_mask(n, h, w_):
    cols = torch.arange(n * h * w_).reshape(n, h, w_) % w_
    cols = cols.reshape(-1)
    return torch.where(cols[:, None] == cols[None, :], 0.0, -torch.inf).double()


class TestMultiViewAttention:
    def test_row_wise_matches_masked_full(self):
        rng = Rng(1)
        for trial in range(10):
            proj = random_projections(8, rng)
            f = rng.normal_tensor((2, 4, 4, 8), torch.float64)
            out = multi_view_attention(f, proj, ROW_WISE)
            flat = f.reshape(-1, 8)
            ref = masked_context(proj, flat, row_mask(2, 4, 4)) @ proj.wo.weight.T.double()
            assert (out.reshape(-1, 8) - ref).abs().max().item() < 1e-8

    def test_row_column_matches_two_masked_passes(self):
        rng = Rng(2)
        for trial in range(10):
            proj = random_projections(8, rng)
            f = rng.normal_tensor((2, 4, 4, 8), torch.float64)
            out = multi_view_attention(f, proj, ROW_COLUMN)
            flat = f.reshape(-1, 8)
            mid = masked_context(proj, flat, row_mask(2, 4, 4))
            ref = masked_context(proj, mid, col_mask(2, 4, 4)) @ proj.wo.weight.T.double()
            assert (out.reshape(-1, 8) - ref).abs().max().item() < 1e-8

    def test_full_single_view_equals_self_attention(self):
        rng = Rng(3)
        proj = random_projections(8, rng)
        f = rng.normal_tensor((1, 4, 4, 8), torch.float64)
        out = multi_view_attention(f, proj, FULL)
        flat = f.reshape(-1, 8)
        zero = torch.zeros(16, 16, dtype=torch.float64)
        ref = masked_context(proj, flat, zero) @ proj.wo.weight.T.double()
        assert (out.reshape(-1, 8) - ref).abs().max().item() < 1e-12

    @pytest.mark.parametrize("mode", [ROW_WISE, ROW_COLUMN, FULL])
    def test_view_permutation_equivariance(self, mode):
        rng = Rng(4)
        proj = random_projections(8, rng)
        f = rng.normal_tensor((3, 4, 4, 8), torch.float64)
        perm = torch.tensor([2, 0, 1])
        out = multi_view_attention(f, proj, mode)
        out_perm = multi_view_attention(f[perm], proj, mode)
        assert (out[perm] - out_perm).abs().max().item() < 1e-12


class TestImageCrossAttention:
    def test_null_reference_exact_zero(self):
        rng = Rng(5)
        proj = random_projections(8, rng)
        f = rng.normal_tensor((16, 8), torch.float64)
        out = image_cross_attention(f, torch.zeros(10, 8, dtype=torch.float64), proj)
        assert torch.equal(out, torch.zeros_like(out))

    def test_zero_wo_gives_zero(self):
        rng = Rng(6)
        proj = random_projections(8, rng, zero_wo=True)
        f = rng.normal_tensor((16, 8), torch.float64)
        ref = rng.normal_tensor((12, 8), torch.float64)
        out = image_cross_attention(f, ref, proj)
        assert torch.equal(out, torch.zeros_like(out))

    def test_matches_attention_primitive(self):
        from mvak.numerics import attention

        rng = Rng(7)
        proj = random_projections(8, rng)
        f = rng.normal_tensor((16, 8), torch.float64)
        ref = rng.normal_tensor((12, 8), torch.float64)
        out = image_cross_attention(f, ref, proj)
        q = proj.wq(f)
        k = proj.wk(ref)
        v = proj.wv(ref)
        expected = proj.wo(attention(q, k, v, proj.scale))
        assert (out - expected).abs().max().item() < 1e-10

    def test_dim_mismatch(self):
        proj = random_projections(8, Rng(8))
        with pytest.raises(ShapeError):
            image_cross_attention(torch.zeros(4, 8, dtype=torch.float64),
                                  torch.zeros(4, 6, dtype=torch.float64), proj)


class TestInitAdapter:
    def test_identity_at_init_bit_exact(self, frozen_backbone, fresh_adapter):
        rng = Rng(9)
        z = rng.normal_tensor((3, 3, 16, 16))
        text = frozen_backbone.encode_caption(vocab.encode_words(["red", "cube"]))
        ref = frozen_backbone.extract_reference_features(rng.uniform_tensor((3, 16, 16)))
        cond = rng.normal_tensor((3, 6, 16, 16))
        injections = fresh_adapter.guider_forward(cond)
        with torch.no_grad():
            plain = frozen_backbone(z, 5, text)
            adapted = frozen_backbone(z, 5, text, injections=injections,
                                      adapter=fresh_adapter, ref=ref)
        assert torch.equal(plain, adapted)

    def test_weights_duplicated_bit_exact(self, frozen_backbone, fresh_adapter):
        for site, block in zip(frozen_backbone.attention_sites(), fresh_adapter.blocks):
            for proj in (block.mv, block.img):
                assert torch.equal(proj.wq.weight, site.attn.wq.weight)
                assert torch.equal(proj.wk.weight, site.attn.wk.weight)
                assert torch.equal(proj.wv.weight, site.attn.wv.weight)
                assert torch.equal(proj.wo.weight, torch.zeros_like(proj.wo.weight))

    def test_no_backbone_tensors_in_adapter(self, fresh_adapter):
        for name in fresh_adapter.state_dict():
            assert not name.startswith("backbone")
            assert name.startswith(("guider.", "blocks."))

    def test_guider_projections_zero(self, fresh_adapter):
        for name, p in fresh_adapter.guider.named_parameters():
            if name.startswith("projs."):
                assert torch.equal(p, torch.zeros_like(p))


class TestGuider:
    def test_fresh_guider_outputs_zero(self, fresh_adapter):
        cond = Rng(10).normal_tensor((4, 6, 16, 16))
        feats = fresh_adapter.guider_forward(cond)
        assert len(feats) == TINY.num_stages
        for f in feats:
            assert torch.equal(f, torch.zeros_like(f))

    def test_scale_shapes(self, frozen_backbone, fresh_adapter):
        cond = Rng(11).normal_tensor((2, 6, 16, 16))
        feats = fresh_adapter.guider_forward(cond)
        for i, f in enumerate(feats):
            assert f.shape == (2, TINY.stage_channels(i), 16 // 2**i, 16 // 2**i)

    def test_per_view_locality(self, frozen_backbone):
        # Randomize the zero projections so outputs are informative.
        adapter = init_adapter(frozen_backbone, ROW_WISE, PARALLEL, Rng(12))
        rng = Rng(13)
        with torch.no_grad():
            for p in adapter.guider.projs.parameters():
                p.copy_(rng.normal_tensor(p.shape) * 0.1)
        cond = rng.normal_tensor((3, 6, 16, 16))
        base = adapter.guider_forward(cond)
        bumped = cond.clone()
        bumped[1] += 0.5
        feats = adapter.guider_forward(bumped)
        for f0, f1 in zip(base, feats):
            assert torch.equal(f0[0], f1[0])
            assert torch.equal(f0[2], f1[2])
            assert not torch.equal(f0[1], f1[1])

    def test_resolution_mismatch(self, fresh_adapter):
        cond = torch.zeros(2, 6, 8, 8)
        with pytest.raises(ShapeError):
            fresh_adapter.guider_forward(cond, expected_hw=(16, 16))


def oracle_eq3_block(block, site, x, text_emb, ref_entry, mode):
    """Hand-unrolled parallel composition in float64 torch ops."""
    n, c, hh, ww = x.shape
    tokens = block.norm1(x).reshape(n, c, hh * ww).transpose(1, 2)
    x_tok = x.reshape(n, c, hh * ww).transpose(1, 2)
    sa = block.attn(tokens)
    mv = multi_view_attention(
        tokens.reshape(n, hh, ww, c), site.mv, mode
    ).reshape(n, hh * ww, c)
    q = site.img.wq(tokens.reshape(1, n * hh * ww, c))
    k = site.img.wk(ref_entry[None])
    v = site.img.wv(ref_entry[None])
    ic = site.img.wo(
        (torch.softmax(site.img.scale * (q @ k.transpose(-1, -2)), dim=-1) @ v)
    ).reshape(n, hh * ww, c)
    f_self = sa + mv + ic + x_tok
    spatial = f_self.transpose(1, 2).reshape(n, c, hh, ww)
    h2 = block.norm2(spatial).reshape(n, c, hh * ww).transpose(1, 2)
    kt = block.cross.wk(text_emb)
    vt = block.cross.wv(text_emb)
    qt = block.cross.wq(h2)
    ca = block.cross.wo(torch.softmax(block.cross.scale * (qt @ kt.T), dim=-1) @ vt)
    out = ca + f_self
    return out.transpose(1, 2).reshape(n, c, hh, ww)


class TestDecoupledBlock:
    def _random_block_and_site(self, seed):
        from mvak.adapter import DecoupledBlockWeights
        from mvak.backbone import AttentionBlock

        rng = Rng(seed)
        block = AttentionBlock(8, 16, groups=4).double()
        site = DecoupledBlockWeights(8).double()
        with torch.no_grad():
            for p in list(block.parameters()) + list(site.parameters()):
                p.copy_(rng.normal_tensor(p.shape, torch.float64) * 0.3)
        return rng, block, site

    def test_matches_unrolled_eq3_oracle(self):
        rng, block, site = self._random_block_and_site(14)
        x = rng.normal_tensor((2, 8, 3, 3), torch.float64)
        text_emb = rng.normal_tensor((4, 16), torch.float64)
        ref = rng.normal_tensor((9, 8), torch.float64)
        from mvak.backbone import TextCondition

        text = TextCondition([1], text_emb, False)
        with torch.no_grad():
            out = decoupled_block(block, site, x, text, ref, ROW_WISE, PARALLEL)
            expected = oracle_eq3_block(block, site, x, text_emb, ref, ROW_WISE)
        assert (out - expected).abs().max().item() < 1e-10

    def test_branch_ablation_reduces_to_eq2(self):
        rng, block, site = self._random_block_and_site(15)
        x = rng.normal_tensor((2, 8, 3, 3), torch.float64)
        text_emb = rng.normal_tensor((4, 16), torch.float64)
        ref = rng.normal_tensor((9, 8), torch.float64)
        from mvak.backbone import TextCondition, _PassContext

        text = TextCondition([1], text_emb, False)
        with torch.no_grad():
            site.mv.wo.weight.zero_()
            site.img.wo.weight.zero_()
            out = decoupled_block(block, site, x, text, ref, ROW_WISE, PARALLEL)
            plain = block(x, _PassContext(groups=1, views=2, text_emb=text_emb[None]))
        assert torch.equal(out, plain)

    def test_serial_chains_residuals(self):
        rng, block, site = self._random_block_and_site(16)
        x = rng.normal_tensor((2, 8, 3, 3), torch.float64)
        text_emb = rng.normal_tensor((4, 16), torch.float64)
        ref = rng.normal_tensor((9, 8), torch.float64)
        from mvak.backbone import TextCondition

        text = TextCondition([1], text_emb, False)
        with torch.no_grad():
            out = decoupled_block(block, site, x, text, ref, ROW_WISE, SERIAL)
            # Unrolled serial: residual chain after the self-attention residual.
            n, c = 2, 8
            tokens = block.norm1(x).reshape(n, c, 9).transpose(1, 2)
            x_tok = x.reshape(n, c, 9).transpose(1, 2)
            f1 = block.attn(tokens) + x_tok
            mv = multi_view_attention(f1.reshape(n, 3, 3, c), site.mv, ROW_WISE)
            f2 = mv.reshape(n, 9, c) + f1
            q = site.img.wq(f2.reshape(1, n * 9, c))
            k = site.img.wk(ref[None])
            v = site.img.wv(ref[None])
            ic = site.img.wo(
                torch.softmax(site.img.scale * (q @ k.transpose(-1, -2)), dim=-1) @ v
            ).reshape(n, 9, c)
            f3 = ic + f2
            spatial = f3.transpose(1, 2).reshape(n, c, 3, 3)
            h2 = block.norm2(spatial).reshape(n, c, 9).transpose(1, 2)
            ca = block.cross(h2, text_emb[None], n)
            expected = (ca + f3).transpose(1, 2).reshape(n, c, 3, 3)
        assert (out - expected).abs().max().item() < 1e-12

    def test_branch_additivity(self):
        # In parallel mode the branch contributions sum: removing one branch
        # subtracts exactly its contribution.
        rng, block, site = self._random_block_and_site(17)
        x = rng.normal_tensor((2, 8, 3, 3), torch.float64)
        ref = rng.normal_tensor((9, 8), torch.float64)
        n, c = 2, 8
        tokens = block.norm1(x).reshape(n, c, 9).transpose(1, 2)
        x_tok = x.reshape(n, c, 9).transpose(1, 2)
        with torch.no_grad():
            sa = block.attn(tokens)
            from mvak.adapter import _compose

            full = _compose(site, ROW_WISE, PARALLEL, tokens, sa, x_tok, ref[None], 1, n, (3, 3))
            mv_only = multi_view_attention(tokens.reshape(n, 3, 3, c), site.mv, ROW_WISE)
            site.mv.wo.weight.zero_()
            no_mv = _compose(site, ROW_WISE, PARALLEL, tokens, sa, x_tok, ref[None], 1, n, (3, 3))
        assert (full - no_mv - mv_only.reshape(n, 9, c)).abs().max().item() < 1e-12


class TestGradientFlow:
    def test_adapter_learns_backbone_frozen(self, frozen_backbone):
        adapter = init_adapter(frozen_backbone, ROW_WISE, PARALLEL, Rng(18))
        rng = Rng(19)
        z = rng.normal_tensor((2, 3, 16, 16))
        target = rng.normal_tensor((2, 3, 16, 16))
        text = frozen_backbone.encode_caption(vocab.encode_words(["red", "cube"]))
        ref = frozen_backbone.extract_reference_features(rng.uniform_tensor((3, 16, 16)))
        cond = rng.normal_tensor((2, 6, 16, 16))
        before = {k: v.clone() for k, v in frozen_backbone.state_dict().items()}
        opt = torch.optim.Adam(adapter.parameters(), lr=1e-2)

        def loss_fn():
            injections = adapter.guider_forward(cond)
            eps = frozen_backbone(z, 3, text, injections=injections, adapter=adapter, ref=ref)
            return ((eps - target) ** 2).mean()

        loss_fn().backward()
        opt.step()
        opt.zero_grad()
        # Second backward: with the output projections off zero, every adapter
        # tensor on a loss path must now receive gradient.
        loss_fn().backward()
        for name, p in adapter.named_parameters():
            assert p.grad is not None, name
            assert p.grad.norm().item() > 0, name
        for name, p in frozen_backbone.named_parameters():
            assert p.grad is None
        after = frozen_backbone.state_dict()
        for k in before:
            assert torch.equal(before[k], after[k])
