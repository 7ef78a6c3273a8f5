import numpy as np
import pytest
import torch

from cdnhoi.config import ConfigError, LossWeights, ModelConfig, preset_config
from cdnhoi.loss import compute_loss
from cdnhoi.matching import Assignment, match_batch
from cdnhoi.model.backbone import FeatureExtractor, positional_encoding
from cdnhoi.model.cdn import CDN, images_to_tensor
from cdnhoi.model.decoders import HOPD_OUTPUT, LEARNED_INIT, CascadeError, QueryState

from helpers import random_target


@pytest.fixture
def model():
    torch.manual_seed(0)
    return CDN(ModelConfig()).double().eval()


def _images(B=2, size=64, seed=0):
    rng = np.random.default_rng(seed)
    return images_to_tensor([rng.integers(0, 256, (size, size, 3), dtype=np.uint8) for _ in range(B)],
                            torch.float64)


# -- feature extractor

def test_extractor_shapes():
    fx = FeatureExtractor(ModelConfig()).double()
    feats, pos = fx(_images())
    assert feats.tokens.shape == (2, 64, 64)
    assert (feats.height, feats.width) == (8, 8)
    assert pos.shape == (1, 64, 64)


def test_positional_encoding_table():
    pe = positional_encoding(4, 4, 64, dtype=torch.float64)
    assert pe.shape == (16, 64)
    assert pe.abs().max() <= 1.0
    assert len({tuple(r) for r in pe.tolist()}) == 16
    with pytest.raises(ValueError):
        positional_encoding(4, 4, 30)


def test_extractor_rejects_non_divisible_size():
    fx = FeatureExtractor(ModelConfig())
    with pytest.raises(ValueError, match="divisible"):
        fx(torch.zeros(1, 3, 60, 64))


def test_position_encoding_breaks_permutation_symmetry():
    # the encoder output is not a permutation of the input tokens under a spatial permutation
    torch.manual_seed(0)
    fx = FeatureExtractor(ModelConfig()).double().eval()
    x = _images(1)
    a = fx(x)[0].tokens[0]
    b = fx(torch.flip(x, dims=[3]))[0].tokens[0]
    perm = torch.arange(64).reshape(8, 8).flip(1).flatten()
    assert not torch.allclose(a[perm], b, atol=1e-6)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(stride=6).validate()
    with pytest.raises(ConfigError):
        ModelConfig(channels=(32, 64)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=66).validate()


def test_published_preset_sizes():
    cfg = preset_config("cdn-s")
    assert cfg.model.hidden_dim == 256 and cfg.model.num_queries == 64
    assert (cfg.model.decoder_layers_ho, cfg.model.decoder_layers_int) == (3, 3)
    assert preset_config("cdn-b").model.decoder_layers_ho == 6
    cfg.model.validate()


# -- cascade decoders

def test_output_shapes(model):
    out = model(_images())
    cfg = model.cfg
    assert out.pairs.human_boxes.shape == (cfg.decoder_layers_ho, 2, cfg.num_queries, 4)
    assert out.pairs.object_logits.shape == (cfg.decoder_layers_ho, 2, cfg.num_queries, cfg.num_object_classes + 1)
    assert out.pairs.interactive_logits.shape == (cfg.decoder_layers_ho, 2, cfg.num_queries)
    assert out.action_logits.shape == (cfg.decoder_layers_int, 2, 16, cfg.num_action_classes)
    boxes = out.pairs.human_boxes
    assert ((boxes >= 0) & (boxes <= 1)).all()
    assert out.hopd_queries.provenance == HOPD_OUTPUT


def test_provenance_is_enforced(model):
    feats, pos = model.extractor(_images(1))
    dec = model.decoders
    learned = dec.initial_queries(1)
    assert learned.provenance == LEARNED_INIT
    _, handoff = dec.decode_pairs(learned, feats.tokens, pos)
    with pytest.raises(CascadeError):
        dec.decode_interactions(learned, feats.tokens, pos)
    with pytest.raises(CascadeError):
        dec.decode_pairs(handoff, feats.tokens, pos)
    bad = QueryState(handoff.vectors[:, :5], handoff.layer, HOPD_OUTPUT)
    with pytest.raises(CascadeError):
        dec.decode_interactions(bad, feats.tokens, pos)


def test_interaction_decoder_starts_from_handoff(model):
    seen = {}

    def hook(module, args, kwargs):
        seen["tgt"] = args[0].clone()

    h = model.decoders.interaction.layers[0].register_forward_pre_hook(hook, with_kwargs=True)
    out = model(_images())
    h.remove()
    assert torch.equal(seen["tgt"], out.hopd_queries.vectors)
    assert out.hopd_queries.layer == model.cfg.decoder_layers_ho


def test_lane_isolation_without_self_attention(model):
    model.decoders.set_self_attention(False)
    feats, pos = model.extractor(_images(1))
    _, handoff = model.decoders.decode_pairs(model.decoders.initial_queries(1), feats.tokens, pos)
    base = model.decoders.decode_interactions(handoff, feats.tokens, pos)
    v = handoff.vectors.clone()
    v[0, 5] = 0
    changed = model.decoders.decode_interactions(QueryState(v, handoff.layer, HOPD_OUTPUT), feats.tokens, pos)
    diff = (base - changed).abs().amax(dim=(0, 3))[0]
    assert diff[5] > 0
    assert torch.all(diff[torch.arange(16) != 5] == 0)
    # with self-attention the change spreads to other lanes
    model.decoders.set_self_attention(True)
    _, handoff = model.decoders.decode_pairs(model.decoders.initial_queries(1), feats.tokens, pos)
    base = model.decoders.decode_interactions(handoff, feats.tokens, pos)
    v = handoff.vectors.clone()
    v[0, 5] = 0
    changed = model.decoders.decode_interactions(QueryState(v, handoff.layer, HOPD_OUTPUT), feats.tokens, pos)
    assert (base - changed).abs().amax(dim=(0, 3))[0][torch.arange(16) != 5].max() > 0


def _hopd_params(model):
    dec = model.decoders
    return [("query_embed", dec.query_embed.weight)] + \
        [(f"hopd.{n}", p) for n, p in dec.hopd.named_parameters()] + \
        [(f"pair_heads.{n}", p) for n, p in dec.pair_heads.named_parameters()]


def test_detached_handoff_blocks_action_gradients(model):
    out = model(_images(), detach_handoff=True)
    targets = [random_target(2, C_o=3, C_a=4, seed=0), random_target(1, C_o=3, C_a=4, seed=1)]
    assigns = [Assignment(np.array([0, 3]), 16), Assignment(np.array([7]), 16)]
    loss = compute_loss(out, targets, assigns, LossWeights())
    grads = torch.autograd.grad(loss.loss_c_a, [p for _, p in _hopd_params(model)], allow_unused=True)
    for (name, _), g in zip(_hopd_params(model), grads):
        assert g is None or torch.count_nonzero(g) == 0, name
    # without the detach the action loss does reach HO-PD
    out = model(_images())
    loss = compute_loss(out, targets, assigns, LossWeights())
    g = torch.autograd.grad(loss.loss_c_a, model.decoders.hopd.layers[0].linear1.weight)[0]
    assert g.abs().sum() > 0


def test_identical_queries_give_identical_outputs(model):
    with torch.no_grad():
        model.decoders.query_embed.weight[:] = model.decoders.query_embed.weight[0]
        model.decoders.interaction_pos.weight[:] = model.decoders.interaction_pos.weight[0]
    out = model(_images(1))
    hb = out.pairs.human_boxes[-1, 0]
    assert torch.allclose(hb, hb[0].expand_as(hb), atol=1e-12)
    al = out.action_logits[-1, 0]
    assert torch.allclose(al, al[0].expand_as(al), atol=1e-12)


def test_heads_on_zero_queries(model):
    # linear heads reduce to their biases
    heads = model.decoders.pair_heads
    h, o, cls, inter = heads(torch.zeros(1, 16, 64, dtype=torch.float64))
    assert torch.equal(cls, heads.object_class.bias.expand_as(cls))
    assert torch.equal(inter, heads.interactive.bias.expand_as(inter))
    assert torch.allclose(h, h[0, 0].expand_as(h)) and ((h > 0) & (h < 1)).all()


def test_forward_is_deterministic(model):
    x = _images()
    a, b = model(x), model(x)
    assert torch.equal(a.action_logits, b.action_logits)
    assert torch.equal(a.pairs.object_boxes, b.pairs.object_boxes)


def test_training_steps_stay_finite():
    torch.manual_seed(0)
    model = CDN(ModelConfig())
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    x = _images(2).float()
    targets = [random_target(1, C_o=3, C_a=4, seed=s) for s in range(2)]
    targets = [type(t)(t.human_boxes.float(), t.object_boxes.float(), t.object_classes, t.actions.float())
               for t in targets]
    for _ in range(100):
        out = model(x)
        loss = compute_loss(out, targets, match_batch(out, targets, LossWeights()), LossWeights())
        opt.zero_grad()
        loss.total.backward()
        opt.step()
    assert torch.isfinite(loss.total)
    assert all(torch.isfinite(p).all() for p in model.parameters())
