"""Properties of the acceptance-scale mmVAE (train->test direction, trained once per session)."""
import numpy as np

from mmimpute.dataset import mean_category_templates, template_scores
from mmimpute.model import encode_means


def test_loss_strictly_decreases_over_first_five_epochs(mmvae_forward):
    totals = [row["total"] for row in mmvae_forward.history[:5]]
    assert all(a > b for a, b in zip(totals, totals[1:])), totals
    assert all(np.isfinite(row["total"]) for row in mmvae_forward.history)


def test_encoder_tells_empty_from_full_images(mmvae_forward):
    m = mmvae_forward.model
    W = m.config.image_side
    mu = m.encode(np.stack([np.zeros((W, W)), np.ones((W, W))])).mu
    assert not np.allclose(mu[0], mu[1])


def test_prior_bank_is_separated(mmvae_forward):
    bank = mmvae_forward.model.prior_bank()
    assert bank.is_separated() and bank.min_separation() > bank.sigma


def test_full_vector_classification(mmvae_forward):
    m, test = mmvae_forward.model, mmvae_forward.test
    mu = encode_means(m, test.images)
    d = ((mu[:, None, :] - m.prior_bank().means[None]) ** 2).sum(-1)
    assert np.mean(d.argmin(1) == test.labels) >= 0.95


def test_decoded_modals_look_like_their_category(mmvae_forward):
    m = mmvae_forward.model
    grids = np.stack([m.decode(m.prior_mean(label)[None])[0] for label in range(m.config.num_labels)])
    # a modal stands for its whole category, so it is compared with the category's mean shape
    scores = template_scores(grids > 0.5, mean_category_templates(m.config.voxel_side))
    assert np.array_equal(scores.argmax(1), np.arange(m.config.num_labels))
