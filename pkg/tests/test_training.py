import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from makeupdiff.diffusion import ModelConfig, TransferModel
from makeupdiff.faces import REGION_LABEL, build_base_dataset
from makeupdiff.manifest import DatasetManifest
from makeupdiff.mga import GuidanceWeights
from makeupdiff.training import (
    LOG_HEADER,
    PairBank,
    TrainConfig,
    TrainingDiverged,
    compute_losses,
    loss_contrastive,
    loss_diffusion,
    loss_makeup,
    loss_total,
    train,
)

TINY = ModelConfig(resolution=32, feature_dim=32, embed_dim=16, width=16, heads=2, T=20)


def tiny_train(**kw):
    base = dict(T=20, batch_size=4, steps=3, eval_batch=4, log_every=0, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    return build_base_dataset(2, 2, 32, 0, tmp_path_factory.mktemp("toy"))


def test_loss_total_arithmetic():
    assert loss_total(1.0, 2.0, 3.0) == 6.0
    assert loss_total(1.5, 2.0, 3.0, 0.0, 0.0) == 1.5
    assert loss_total(0.0, 0.0, 0.0) == 0.0


@settings(max_examples=50)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
def test_loss_total_is_linear_combination(d, m, i, l1, l2):
    assert loss_total(d, m, i, l1, l2) == pytest.approx(d + l1 * m + l2 * i)
    assert loss_total(d, m, i, l1, l2) >= 0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(region_prompt_prob=2)
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(lambda_embed=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_zero_weight_denoiser_diffusion_loss():
    # with a zero body the estimate is sqrt(1 - abar) z_t; for a zero image
    # z_t = sqrt(1 - abar) eps, so the error is -abar eps
    m = TransferModel(TINY)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    target = torch.zeros(2, 3, 32, 32)
    c = m.encoder.embed_text(["no makeup"] * 2)
    f = torch.zeros(2, 16)
    eps = torch.randn(2, *m.latent_shape, generator=torch.Generator().manual_seed(0))
    loss = loss_diffusion(m, target, c, f, f, GuidanceWeights(), None, t=torch.tensor([3, 3]), eps=eps)
    expect = m.schedule.alpha_bars[3] ** 2 * eps.pow(2).mean().item()
    assert loss.item() == pytest.approx(expect, rel=1e-5)


def test_losses_nonnegative(toy_data):
    m = TransferModel(TINY)
    bank = PairBank(toy_data)
    batch = bank.batch([0, 1, 2, 3], np.random.default_rng(0))
    parts = compute_losses(m, batch, torch.Generator().manual_seed(0), tiny_train())
    assert all(p.item() >= 0 for p in parts)
    assert parts[3].item() == pytest.approx(sum(p.item() for p in parts[:3]), rel=1e-6)
    assert parts[4].item() == 0.0


def test_embedding_term_only_when_weighted(toy_data):
    m = TransferModel(TINY)
    batch = PairBank(toy_data).batch([0, 1, 2, 3], np.random.default_rng(0))
    off = compute_losses(m, batch, torch.Generator().manual_seed(0), tiny_train())
    on = compute_losses(m, batch, torch.Generator().manual_seed(0), tiny_train(lambda_embed=0.5))
    # the three-term objective does not depend on the extra weight
    for a, b in zip(off[:4], on[:4]):
        assert a.item() == pytest.approx(b.item(), rel=1e-5)
    assert on[4].item() > 0


def test_batch_labels(toy_data):
    bank = PairBank(toy_data)
    batch = bank.batch(range(len(bank)), np.random.default_rng(0), region_prompt_prob=1.0)
    for k, p in enumerate(toy_data.pairs):
        assert batch.identity[k] == p.source.id.identity_index
        assert batch.style[k] == p.target.id.makeup_index
        assert batch.ref_identity[k] != batch.identity[k]
    assert torch.equal(batch.styled, bank.images[[ex.target for ex in bank.examples]])


def test_contrastive_perfect_separation_is_near_zero():
    e = torch.eye(3)
    labels = torch.tensor([0, 1, 2])
    assert loss_contrastive(e, e, labels, labels, 0.01).item() == pytest.approx(0.0, abs=1e-6)
    # swapped candidates: every anchor is farthest from its positive
    assert loss_contrastive(e, e[[1, 2, 0]], labels, labels, 0.01).item() > 50


def test_contrastive_uniform_is_log_ratio():
    # identical embeddings: log(candidates / positives) per anchor
    a = torch.ones(2, 4)
    loss = loss_contrastive(a, torch.ones(6, 4), torch.tensor([0, 1]), torch.tensor([0, 0, 1, 2, 2, 2]))
    assert loss.item() == pytest.approx((np.log(6 / 2) + np.log(6 / 1)) / 2, rel=1e-6)


def test_contrastive_without_positives_is_zero():
    a = torch.randn(2, 4, requires_grad=True)
    loss = loss_contrastive(a, torch.randn(3, 4), torch.tensor([5, 6]), torch.tensor([0, 1, 2]))
    assert loss.item() == 0.0
    loss.backward()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_contrastive_invariant_to_scale_and_order(seed, k):
    g = torch.Generator().manual_seed(seed)
    a, c = torch.randn(4, 5, generator=g), torch.randn(7, 5, generator=g)
    la, lc = torch.randint(0, 3, (4,), generator=g), torch.randint(0, 3, (7,), generator=g)
    perm = torch.randperm(7, generator=g)
    base = loss_contrastive(a, c, la, lc)
    assert base.item() >= 0
    assert loss_contrastive(a * k, c[perm], la, lc[perm]).item() == pytest.approx(base.item(), rel=1e-4, abs=1e-6)


def test_pair_bank_references_other_identity(toy_data):
    bank = PairBank(toy_data)
    for ex in bank.examples:
        assert ex.refs and all(r != ex.target for r in ex.refs)


def test_region_prompt_keeps_only_that_region(toy_data):
    bank = PairBank(toy_data)
    full = [k for k, ex in enumerate(bank.examples) if ex.prompt == "full makeup"]
    assert full
    batch = bank.batch(full * 20, np.random.default_rng(0), region_prompt_prob=1.0)
    assert "full makeup" not in batch.prompts
    assert len(set(batch.prompts)) == 3
    b = bank.batch([full[0]], np.random.default_rng(1), 1.0)
    region = {"eye makeup": "eyes", "lip makeup": "lips", "face makeup": "face"}[b.prompts[0]]
    outside = (bank.masks[bank.examples[full[0]].mask] != REGION_LABEL[region])[None].expand(3, -1, -1)
    assert torch.equal(b.target[0][outside], b.source[0][outside])


def test_zero_steps_leaves_weights(toy_data):
    m = TransferModel(TINY)
    res = train(m, toy_data, tiny_train(steps=0))
    for a, b in zip(m.parameters(), res.model.parameters()):
        assert torch.equal(a, b)
    assert res.log == []


def test_input_model_untouched(toy_data):
    m = TransferModel(TINY)
    before = [p.clone() for p in m.parameters()]
    train(m, toy_data, tiny_train(steps=2))
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_same_seed_same_log(toy_data, tmp_path):
    m = TransferModel(TINY)
    train(m, toy_data, tiny_train(steps=4), tmp_path / "a.tsv")
    train(m, toy_data, tiny_train(steps=4), tmp_path / "b.tsv")
    a = (tmp_path / "a.tsv").read_bytes()
    assert a == (tmp_path / "b.tsv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == LOG_HEADER and len(lines) == 5
    c = train(m, toy_data, tiny_train(steps=4, seed=1), tmp_path / "c.tsv")
    assert (tmp_path / "c.tsv").read_bytes() != a
    assert len(c.log) == 4


def test_empty_manifest_rejected():
    with pytest.raises(ValueError):
        train(TransferModel(TINY), DatasetManifest(()), tiny_train())


def test_schedule_length_mismatch(toy_data):
    with pytest.raises(ValueError, match="T="):
        train(TransferModel(TINY), toy_data, tiny_train(T=30))


def test_divergence_detected(toy_data):
    m = TransferModel(TINY)
    with torch.no_grad():
        m.denoiser.conv_out.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(m, toy_data, tiny_train())


@pytest.mark.slow
def test_short_run_reduces_heldout_loss(tmp_path):
    data = build_base_dataset(2, 1, 32, 0, tmp_path)
    cfg = TrainConfig(T=200, steps=500, batch_size=2, learning_rate=1e-3, eval_batch=2, log_every=0)
    res = train(TransferModel(ModelConfig(resolution=32), seed=0), data, cfg)
    drop = 1 - res.final_eval.l_total / res.initial_eval.l_total
    assert drop >= 0.30, (res.initial_eval, res.final_eval)
