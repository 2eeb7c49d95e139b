import math

import numpy as np
import pytest
from scipy import stats

from dtd import detector, numerics as nx
from dtd.data import SyntheticSpec, make_windows, synth_generate
from dtd.detector import GpdFit, ScoreTrace, fit_gpd, fit_pot, label, pot_level
from dtd.trainer import TrainConfig, TrainedModel, train


class Quadratic:
    def f(self, x, params=None):
        return nx.scale(nx.squared_l2(nx.as_tensor(x), axis=-1), -0.5)


# ---------------------------------------------------------------- POT formula

def test_zq_spot_value():
    # qM/N_t = 0.1 with M = 1000, N_t = 20, q = 2e-3
    assert pot_level(10.0, 2.0, 0.5, 2e-3, 1000, 20) == pytest.approx(18.6491, abs=1e-3)
    assert pot_level(10.0, 2.0, 0.5, 2e-3, 1000, 20) == pytest.approx(10 + 4 * (10 ** 0.5 - 1), rel=1e-14)


def test_zq_exponential_limit():
    r = math.exp(-1.0)
    assert pot_level(3.0, 1.0, 0.0, r, 1, 1) == pytest.approx(4.0, rel=1e-14)
    # the general branch converges to the limit
    assert pot_level(3.0, 1.0, 1e-5, r, 1, 1) == pytest.approx(4.0, abs=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_gpd_recovery(seed):
    y = stats.genpareto.rvs(0.2, scale=1.0, size=5000, random_state=seed)
    gamma, sigma, method = fit_gpd(y)
    assert method == "mle"
    assert abs(gamma - 0.2) < 0.1 and abs(sigma - 1.0) < 0.2
    # agrees with an independent maximum-likelihood fit
    c, _, s = stats.genpareto.fit(y, floc=0.0)
    assert gamma == pytest.approx(c, abs=5e-3) and sigma == pytest.approx(s, rel=5e-3)


@pytest.mark.parametrize("shape", [-0.3, 0.0, 0.5])
def test_gpd_other_shapes(shape):
    y = stats.genpareto.rvs(shape, scale=2.0, size=5000, random_state=1)
    gamma, sigma, _ = fit_gpd(y)
    assert abs(gamma - shape) < 0.1 and abs(sigma - 2.0) < 0.4


def test_fit_invariants():
    s = np.random.default_rng(0).gamma(2.0, size=5000)
    fit = fit_pot(s)
    assert fit.n_t >= 20 and fit.sigma > 0 and fit.z_q >= fit.t and fit.M == 5000
    assert fit.t == pytest.approx(np.quantile(s, 0.98))


def test_too_few_excesses():
    with pytest.raises(ValueError, match="at least 20 excesses"):
        fit_pot(np.random.default_rng(0).normal(size=200))
    with pytest.raises(ValueError):
        fit_pot([])


def test_zq_decreasing_in_q():
    s = np.random.default_rng(1).exponential(size=20000)
    z = [fit_pot(s, q=q).z_q for q in (1e-4, 1e-3, 1e-2)]
    assert z[0] > z[1] > z[2]


@pytest.mark.parametrize("dist", ["exponential", "gamma", "lognormal"])
def test_exceedance_frequency(dist):
    gen = np.random.default_rng(2)
    draw = {"exponential": lambda n: gen.exponential(size=n),
            "gamma": lambda n: gen.gamma(3.0, size=n),
            "lognormal": lambda n: gen.lognormal(sigma=0.5, size=n)}[dist]
    q = 1e-3
    fit = fit_pot(draw(20000), q=q)
    held = draw(200000)
    assert np.mean(held > fit.z_q) <= 3 * q


def test_moments_fallback_matches_exponential():
    y = np.random.default_rng(3).exponential(size=20000)
    g, s = detector._moments(y)
    assert abs(g) < 0.05 and s == pytest.approx(1.0, abs=0.05)


def test_gpd_json_roundtrip(tmp_path):
    fit = GpdFit(1.0, 0.1, 2.0, 30, 1500, 1e-3, 5.0)
    fit.save(tmp_path / "f.json")
    assert GpdFit.load(tmp_path / "f.json") == fit


# ---------------------------------------------------------------- labelling

def fit_at(z):
    return GpdFit(0.0, 0.0, 1.0, 20, 1000, 1e-3, z)


def test_label_examples():
    assert label(np.array([1.0, 2.0, 30.0]), fit_at(10.0)).tolist() == [0, 0, 1]
    assert not label(np.array([1.0, 10.0, -3.0]), fit_at(10.0)).any()


def test_label_monotone():
    gen = np.random.default_rng(4)
    s = gen.normal(size=200)
    base = label(s, fit_at(1.0))
    for i in gen.integers(0, 200, 50):
        t = s.copy()
        t[i] += abs(gen.normal())
        assert np.all(label(t, fit_at(1.0)) >= base)


def test_trace_roundtrip(tmp_path):
    tr = ScoreTrace([3, 5, 9], [0.1, 1 / 3, 2e-300], [0, 1, 0])
    detector.write_trace(tmp_path / "t.csv", tr)
    back = detector.read_trace(tmp_path / "t.csv")
    assert np.array_equal(back.index, tr.index) and np.array_equal(back.score, tr.score)
    assert np.array_equal(back.label, tr.label)
    with pytest.raises(ValueError, match="increasing"):
        ScoreTrace([1, 1], [0.0, 0.0])


# ---------------------------------------------------------------- scoring

@pytest.fixture(scope="module")
def trained():
    ds = synth_generate(SyntheticSpec(channels=4, length=3000, seed=0))
    X = ds.values / ds.values.std(axis=0)
    ws = make_windows(X, H=4)
    cfg = TrainConfig(branch="kde", epochs=4, T=100, beta_start=0.01, beta_end=0.2, hidden=32,
                      bank_capacity=1024, seed=0)
    return train(ws.subset(np.arange(2000)), cfg), X, ws


def test_untrained_rejected():
    from dtd.predictor import NoisePredictor, PredictorConfig
    from dtd.diffusion import build_schedule
    m = TrainedModel(TrainConfig(), build_schedule(10), NoisePredictor(PredictorConfig(d=2, H=1, T=10)))
    with pytest.raises(detector.NotTrainedError):
        detector.score_sample(m, np.zeros(2), np.zeros((1, 2)))
    m.config = TrainConfig(branch="ebm")
    with pytest.raises(detector.NotTrainedError):
        detector.score_sample(m, np.zeros(2), np.zeros((1, 2)))


def test_quadratic_energy_score(trained):
    model = trained[0]
    ws = trained[2]
    q = TrainedModel(TrainConfig(branch="ebm", T=100, beta_start=0.01, beta_end=0.2),
                     model.schedule, model.predictor, ebm=Quadratic())
    eps_hat = detector.predicted_noise(q, ws.x0[:10], ws.x_hist[:10], seed=3)
    s = detector.score_windows(q, ws.subset(np.arange(10)), seed=3)
    assert np.allclose(s, 0.5 * np.sum(eps_hat ** 2, axis=1), rtol=1e-14)


def test_same_seed_same_score(trained):
    model, _, ws = trained
    a = detector.score_sample(model, ws.x0[5], ws.x_hist[5], seed=11)
    b = detector.score_sample(model, ws.x0[5], ws.x_hist[5], seed=11)
    assert a == b
    assert detector.score_sample(model, ws.x0[5], ws.x_hist[5], seed=12) != a


def test_batch_matches_single(trained):
    model, _, ws = trained
    sub = ws.subset(np.arange(2000, 2003))
    batch = detector.score_windows(model, sub, seed=1)
    assert batch.shape == (3,) and np.all(np.isfinite(batch))


def test_shifted_sample_above_p99(trained):
    model, X, ws = trained
    held = ws.subset(np.arange(2000, len(ws)))
    p99 = np.percentile(detector.score_windows(model, held, seed=0), 99)
    shifted = [detector.score_sample(model, held.x0[i] + 5.0, held.x_hist[i], seed=i)
               for i in range(0, len(held), 40)]
    assert min(shifted) > p99


def test_n_draws_average(trained):
    model, _, ws = trained
    sub = ws.subset(np.arange(2000, 2010))
    avg = detector.score_windows(model, sub, seed=2, n_draws=3)
    manual = np.mean([detector.branch_scores(model, detector.predicted_noise(
        model, sub.x0, sub.x_hist, 2, draw)) for draw in range(3)], axis=0)
    assert np.allclose(avg, manual, rtol=1e-14)
    with pytest.raises(ValueError):
        detector.score_windows(model, sub, n_draws=0)
