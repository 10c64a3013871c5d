from __future__ import annotations

import numpy as np
import pytest

from itas.checks import check_tca, scale_first_grad
from itas.data import SynthSpec, make_synthetic_corpus
from itas.errors import ConfigError, DomainError, FormatError, ShapeError
from itas.numeric import RandomSource
from itas.tca import (
    TcaModel,
    coherence,
    frame_triples,
    init_zero,
    kl_standard_normal,
    loss_tca,
    mean_recon,
    select_items,
    train_tca,
)


def test_coherence_values():
    assert coherence(1, 5) == 0.0
    assert coherence(5, 5) == 1.0
    assert coherence(3, 5) == 0.5
    assert coherence(1, 1) == 0.0
    for bad in ((0, 5), (6, 5), (1, 0)):
        with pytest.raises(DomainError):
            coherence(*bad)


def test_dimensions():
    m = TcaModel(8, [3, 5, 7], latent_dim=4, hidden=10)
    assert m.enc1.weight.shape == (8 + 3 + 1, 10)
    assert m.enc2.weight.shape == (10, 8)
    assert m.dec1.weight.shape == (4 + 3 + 1, 10)
    assert m.dec2.weight.shape == (10, 8)
    assert m.decode(np.zeros(4), 5, 0.3).shape == (1, 8)


def test_condition_validation():
    m = TcaModel(2, [3, 5], 2, 4)
    assert np.array_equal(m.condition([5, 3], [0.25, 1.0]), [[0, 1, 0.25], [1, 0, 1.0]])
    with pytest.raises(DomainError):
        m.condition(4, 0.5)
    with pytest.raises(DomainError):
        m.condition(3, 1.5)


def test_zero_encoder_gives_standard_posterior():
    m = init_zero(TcaModel(6, [0, 1], 3, 5))
    s = m.encode(np.ones((4, 6)), [0, 1, 0, 1], 0.5, RandomSource(2))
    assert np.array_equal(s.mu, np.zeros((4, 3))) and np.array_equal(s.sigma, np.ones((4, 3)))
    assert np.array_equal(s.z, s.eps)
    assert not m.decode(s.z, [0, 1, 0, 1], 0.5).any()


def test_encode_deterministic_and_sigma_positive():
    m = TcaModel(6, [0, 1], 3, 5, RandomSource(1))
    x = RandomSource(0).normal((5, 6), scale=30.0)
    a = m.encode(x, 1, 0.2, RandomSource(4))
    b = m.encode(x, 1, 0.2, RandomSource(4))
    assert np.array_equal(a.z, b.z)
    assert np.all(a.sigma > 0)
    with pytest.raises(ShapeError):
        m.encode(np.ones((1, 5)), 0, 0.0, RandomSource(0))


def test_decode_continuous_in_c():
    m = TcaModel(6, [0, 1], 3, 32, RandomSource(1))
    z = RandomSource(2).normal((1, 3))
    base = m.decode(z, 0, 0.4)
    gaps = [np.abs(m.decode(z, 0, 0.4 + d) - base).max() for d in (1e-1, 1e-3, 1e-6)]
    assert gaps[0] > 0
    assert gaps[0] >= gaps[1] >= gaps[2] and gaps[2] < 1e-5


def test_kl_identities():
    assert np.all(kl_standard_normal(np.zeros((3, 5)), np.zeros((3, 5))) == 0.0)
    assert kl_standard_normal(np.ones(256), np.zeros(256)) == pytest.approx(128.0)


def test_kl_matches_monte_carlo():
    rng = RandomSource(8)
    for k in range(5):
        mu, sigma = rng.normal(3), np.exp(rng.uniform(-1.0, 0.5, 3))
        z = mu + sigma * rng.normal((100_000, 3))
        log_q = -0.5 * np.sum(((z - mu) / sigma) ** 2 + 2 * np.log(sigma), axis=1)
        log_p = -0.5 * np.sum(z**2, axis=1)
        mc = float(np.mean(log_q - log_p))
        exact = float(kl_standard_normal(mu, 2 * np.log(sigma)))
        assert abs(mc - exact) <= 0.02 * exact


def test_loss_parts():
    m = init_zero(TcaModel(4, [0], 2, 3))
    out = loss_tca(m, np.zeros((5, 4)), 0, 0.0, RandomSource(0), backward=False)
    # zero encoder: mu=0, sigma=1 so KL is 0; zero decoder reconstructs 0 exactly
    assert out.reg == 0.0 and out.recon == 0.0 and out.total == 0.0
    x = RandomSource(1).normal((5, 4))
    out = loss_tca(m, x, 0, 0.0, RandomSource(0), beta=0.5, backward=False)
    assert out.recon == pytest.approx(np.sum(x**2) / 5)
    assert out.total == pytest.approx(out.recon + 0.5 * out.reg)


@pytest.mark.parametrize("beta", [1.0, 0.25])
def test_tca_gradcheck_eight_frames(beta):
    for seed in range(3):
        report = check_tca(seed, D=8, Z=4, batch=8, beta=beta)
        assert report.passed, str(report)


def test_tca_gradcheck_negative_control():
    assert not check_tca(1, corrupt=scale_first_grad()).passed


def test_select_items_ratio():
    ds, _, _ = make_synthetic_corpus(SynthSpec(tasks=1, videos_per_task=25), RandomSource(0))
    task = ds[0]
    n = len(task.train)
    picked = select_items(task, 0.25, RandomSource(3))
    assert len(picked) == int(np.ceil(0.25 * n))
    assert [id(i) for i in picked] == [id(i) for i in select_items(task, 0.25, RandomSource(3))]
    assert len(select_items(task, 1.0, RandomSource(3))) == n
    with pytest.raises(ConfigError):
        select_items(task, 0.0, RandomSource(0))


def test_frame_triples_coherence():
    ds, _, _ = make_synthetic_corpus(SynthSpec(tasks=1, videos_per_task=3), RandomSource(0))
    x, a, c = frame_triples(ds[0].train)
    assert len(x) == len(a) == len(c) == sum(it.features.num_frames for it in ds[0].train)
    assert c.min() == 0.0 and c.max() == 1.0


def test_training_reduces_recon_tenfold():
    spec = SynthSpec(tasks=1, actions_per_task=4, videos_per_task=10, noise=0.0, drift=1.0, base=2.0)
    ds, _, _ = make_synthetic_corpus(spec, RandomSource(1))
    m = TcaModel(spec.dim, sorted(ds[0].classes), 8, 32, RandomSource(2))
    before = mean_recon(m, ds[0].train, RandomSource(0))
    hist = train_tca(m, ds[0], epochs=60, lr=3e-3, rng=RandomSource(3))
    after = mean_recon(m, ds[0].train, RandomSource(0))
    assert len(hist) == 60 and after * 10 <= before


def test_conditioning_separates_actions():
    # action bases far apart relative to drift: class dominates c in the output
    spec = SynthSpec(tasks=1, actions_per_task=4, videos_per_task=20, noise=0.0, drift=0.1, base=3.0)
    ds, _, protos = make_synthetic_corpus(spec, RandomSource(4))
    seps = [np.linalg.norm(protos[a].base - protos[b].base) for a in protos for b in protos if a < b]
    assert min(seps) >= 10 * max(np.linalg.norm(p.drift) for p in protos.values())
    classes = sorted(ds[0].classes)
    m = TcaModel(spec.dim, classes, 8, 32, RandomSource(5))
    train_tca(m, ds[0], epochs=60, lr=3e-3, rng=RandomSource(6))
    z = np.zeros((1, 8))
    across_a = [
        np.linalg.norm(m.decode(z, a, 0.5) - m.decode(z, b, 0.5)) for i, a in enumerate(classes) for b in classes[i + 1 :]
    ]
    across_c = [np.linalg.norm(m.decode(z, a, 0.0) - m.decode(z, a, 1.0)) for a in classes]
    assert np.mean(across_a) > np.mean(across_c)


def test_checkpoint_roundtrip(tmp_path):
    m = TcaModel(5, [2, 4], 3, 6, RandomSource(0))
    m.save(tmp_path / "t.ckpt")
    back = TcaModel.load(tmp_path / "t.ckpt")
    z = RandomSource(1).normal((4, 3))
    assert np.array_equal(back.decode(z, 4, 0.7), m.decode(z, 4, 0.7))
    from itas.segmodel import SegModel

    SegModel(2, [0], 1, 2).save(tmp_path / "s.ckpt")
    with pytest.raises(FormatError):
        TcaModel.load(tmp_path / "s.ckpt")
