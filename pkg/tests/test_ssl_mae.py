import numpy as np
import pytest
import torch

from gradutil import fd_relative_errors
from songssl import ssl_mae
from songssl.dsp import AugmentConfig, SpectrogramConfig
from songssl.model import ModelConfig, build_model
from songssl.ssl_mae import MaeMaskSpec


def test_single_block_mask(rng):
    for _ in range(200):
        offsets, lengths = ssl_mae.sample_mask_runs(200, rng)
        assert len(offsets) == 1
        assert 0 <= offsets[0] < 100
        assert 50 <= lengths[0] <= 200


def test_crop_length_gives_eleven_blocks(rng):
    offsets, lengths = ssl_mae.sample_mask_runs(2068, rng)
    assert len(offsets) == 11
    assert np.sum(offsets < 2000) >= 10
    assert np.all((offsets // 200) == np.arange(11))


def test_runs_are_contiguous_and_clipped():
    mask = ssl_mae.runs_to_mask(250, [10, 230], [5, 100])
    assert mask[10:15].all() and not mask[15:230].any() and mask[230:].all()
    assert mask.sum() == 5 + 20


def test_masked_fraction_matches_expectation():
    rng = np.random.default_rng(0)
    spec = MaeMaskSpec()
    fracs = np.array([ssl_mae.runs_to_mask(200, *ssl_mae.sample_mask_runs(200, rng)).mean() for _ in range(4000)])
    s = np.arange(spec.start_max)[:, None]
    length = np.arange(spec.min_len, spec.max_len + 1)[None, :]
    expected = np.minimum(length, 200 - s).mean() / 200
    sigma = fracs.std() / np.sqrt(len(fracs))
    assert abs(fracs.mean() - expected) < 3 * sigma


def test_masked_view_zeroes_exactly(rng):
    x = rng.random((3, 450, 5)) + 0.1
    xm, mask = ssl_mae.make_masked_view(x, rng)
    assert np.all(xm[mask] == 0)
    assert np.array_equal(xm[~mask], x[~mask])
    assert mask.any(axis=1).all()


def test_mae_loss_examples():
    x = torch.rand(2, 5, 3)
    valid = torch.ones(2, 5, dtype=torch.bool)
    assert float(ssl_mae.mae_loss(x, x, valid)) == 0.0
    assert float(ssl_mae.mae_loss(x + 1, x, valid)) == pytest.approx(1.0)


def test_mae_loss_loop_oracle(rng):
    z = rng.standard_normal((2, 7, 3))
    x = rng.standard_normal((2, 7, 3))
    valid = rng.random((2, 7)) > 0.3
    valid[0, 0] = True
    total, n = 0.0, 0
    for b in range(2):
        for t in range(7):
            if valid[b, t]:
                n += 1
                for f in range(3):
                    total += (z[b, t, f] - x[b, t, f]) ** 2
    assert float(ssl_mae.mae_loss(torch.from_numpy(z), torch.from_numpy(x), torch.from_numpy(valid))) == pytest.approx(
        total / (n * 3), rel=1e-12)


def test_mae_loss_errors():
    with pytest.raises(ValueError, match="no valid"):
        ssl_mae.mae_loss(torch.zeros(1, 3, 2), torch.zeros(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool))
    with pytest.raises(ValueError, match="shape"):
        ssl_mae.mae_loss(torch.zeros(1, 3, 2), torch.zeros(1, 3, 3), torch.ones(1, 3, dtype=torch.bool))


def test_mae_loss_batch_permutation(rng):
    z, x = torch.rand(4, 6, 3, dtype=torch.float64), torch.rand(4, 6, 3, dtype=torch.float64)
    valid = torch.from_numpy(rng.random((4, 6)) > 0.2)
    perm = torch.tensor([2, 0, 3, 1])
    a = ssl_mae.mae_loss(z, x, valid)
    b = ssl_mae.mae_loss(z[perm], x[perm], valid[perm])
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_mae_loss_gradient_finite_differences():
    torch.manual_seed(0)
    model = build_model(ModelConfig(input_bins=8, hidden=16, lstm_hidden=16, head="masked_prediction"), seed=0).double()
    model.eval()
    x = torch.rand(2, 12, 8, dtype=torch.float64)
    xm = x.clone()
    xm[:, 3:7] = 0
    valid = torch.ones(2, 12, dtype=torch.bool)
    valid[1, 10:] = False
    params = list(model.parameters())
    errs = fd_relative_errors(lambda: ssl_mae.mae_loss(model(xm), x, valid), params, h=1e-3)
    assert max(errs) < 1e-3


def test_views_share_crop(small_corpus):
    rng = np.random.default_rng(0)
    clean, masked, mask = ssl_mae.mae_views(small_corpus.recordings[:2], 1.0, rng, AugmentConfig.off(),
                                            SpectrogramConfig())
    assert clean.x.shape == masked.shape
    unmasked = ~mask & clean.valid
    assert np.allclose(clean.x[unmasked], masked[unmasked])


def test_pretrain_mae_deterministic_and_writes(small_corpus, tmp_path):
    from songssl.training import TrainPlan

    plan = TrainPlan(optimizer="adam", weight_decay=0, epochs=2, warmup_epochs=1, batch_size=4, crop_window_s=0.5)
    cfg = ModelConfig(hidden=16, lstm_hidden=16)
    a = ssl_mae.pretrain_mae(small_corpus.recordings, plan, model_cfg=cfg, seed=5, out_dir=tmp_path)
    b = ssl_mae.pretrain_mae(small_corpus.recordings, plan, model_cfg=cfg, seed=5)
    assert a.log.column("loss") == b.log.column("loss")
    assert (tmp_path / "loss.csv").exists() and (tmp_path / "checkpoint.pt").exists()
    assert a.model.cfg.head == "masked_prediction"
