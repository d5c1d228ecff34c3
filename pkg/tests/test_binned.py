import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats as sps

from unfold_kit.binned import (Histogram, ResponseMatrix, bin_index, estimate_response, histogram,
                               ibu, ibu_iterates, poisson_loglik)
from unfold_kit.dataset import SyntheticSample, ToyConfig, generate_gaussian_1d

R2 = np.array([[0.8, 0.2], [0.2, 0.8]])


def hist(contents):
    c = np.asarray(contents, float)
    return Histogram(np.arange(len(c) + 1.0), c)


def random_instance(rng):
    nb = int(rng.integers(5, 21))
    r = rng.uniform(0, 1, (nb, nb)) ** 3 + np.eye(nb)
    r /= r.sum(axis=0)
    truth = rng.uniform(50, 500, nb)
    data = rng.poisson(r @ truth).astype(float)
    prior = rng.uniform(0.5, 2, nb) * truth.mean()
    return ResponseMatrix.from_matrix(r), hist(data), hist(prior)


# ---------------------------------------------------------------------------
# histograms

def test_bin_index_conventions():
    e = np.array([0.0, 1.0, 2.0])
    assert bin_index([-0.1, 0.0, 0.5, 1.0, 2.0, 2.1], e).tolist() == [-1, 0, 0, 1, 1, 2]


def test_histogram_flows_and_sumw2():
    h = histogram([-5, 0.5, 0.5, 1.5, 9], [0, 1, 2], weights=[1, 2, 3, 4, 5])
    assert h.contents.tolist() == [5, 4]
    assert h.sumw2.tolist() == [13, 16]
    assert (h.underflow, h.overflow) == (1, 5)


def test_histogram_rejects_bad_edges():
    with pytest.raises(ValueError):
        Histogram(np.array([0.0, 0.0, 1.0]), np.zeros(2))


def test_histogram_csv_round_trip(tmp_path):
    h = histogram(np.random.default_rng(0).normal(size=100), np.linspace(-2, 2, 9))
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("bin_lo,bin_hi,content\n")
    back = Histogram.from_csv(tmp_path / "h.csv")
    assert np.array_equal(back.edges, h.edges) and np.array_equal(back.contents, h.contents)


# ---------------------------------------------------------------------------
# response

def test_zero_smearing_gives_identity():
    x = np.random.default_rng(1).uniform(0, 5, 1000)
    s = SyntheticSample(x, x, np.ones(1000, bool), np.ones(1000, bool), np.ones(1000))
    e = np.arange(6.0)
    r = estimate_response(s, e, e)
    assert np.array_equal(r.matrix, np.eye(5))
    assert np.all(r.acceptance == 1) and np.all(r.efficiency == 1)


@pytest.fixture(scope="module")
def toy():
    return generate_gaussian_1d(ToyConfig(seed=11))


def test_response_matches_integrated_kernel():
    cfg = ToyConfig(noise_fraction=0, acceptance_loss=0, efficiency_loss=0, seed=12)
    s = generate_gaussian_1d(cfg).synthetic
    e = np.linspace(-3, 3, 21)
    r = estimate_response(s, e, e)
    n_col = histogram(s.gen[:, 0], e).contents
    n_col -= histogram(s.gen[:, 0], e, weights=(bin_index(s.sim[:, 0], e) < 0)
                       | (bin_index(s.sim[:, 0], e) >= 20)).contents
    prior = sps.norm(0, 1)
    for i in range(20):
        lo, hi = e[i], e[i + 1]
        norm = prior.cdf(hi) - prior.cdf(lo)
        for j in range(20):
            def f(g):
                return prior.pdf(g) * (sps.norm.cdf((e[j + 1] - g) / 0.5) - sps.norm.cdf((e[j] - g) / 0.5))
            p_in = integrate.quad(f, lo, hi)[0] / norm
            # probability of landing in bin j given the pair stays in range
            p_range = integrate.quad(lambda g: prior.pdf(g) * (sps.norm.cdf((3 - g) / 0.5)
                                                               - sps.norm.cdf((-3 - g) / 0.5)),
                                     lo, hi)[0] / norm
            p = p_in / p_range
            # exact binomial tails (the normal approximation is useless for
            # cells expecting < 1 count); 3 sigma family-wise over the 400 cells
            k = round(r.matrix[j, i] * n_col[i])
            tail = min(sps.binom.cdf(k, n_col[i], p), sps.binom.sf(k - 1, n_col[i], p))
            assert tail > sps.norm.sf(3) / 400, (i, j, k, p * n_col[i])


def test_response_column_stochastic_and_efficiency(toy):
    e = np.linspace(-3, 3, 21)
    r = estimate_response(toy.synthetic, e, e)
    cols = r.matrix.sum(axis=0)
    assert np.allclose(cols[~r.empty_columns], 1, atol=1e-12)
    assert np.all((r.acceptance >= 0) & (r.acceptance <= 1))
    assert np.all((r.efficiency >= 0) & (r.efficiency <= 1))
    # central bins: in-range sim losses are negligible, so efficiency ~ 0.9
    s = toy.synthetic
    n_gen = histogram(s.gen[s.gen_mask, 0], e).contents
    central = slice(5, 15)
    sigma = np.sqrt(0.09 / n_gen[central])
    edge_loss = sps.norm.sf(1.5 / 0.5)  # sim falls out of [-3, 3] from |g| < 1.5
    assert np.all(np.abs(r.efficiency[central] - 0.9) <= 3 * sigma + edge_loss)
    n_sim = histogram(s.sim[s.sim_mask, 0], e).contents
    assert np.all(np.abs(r.acceptance[central] - 0.9)
                  <= 3 * np.sqrt(0.09 / n_sim[central]) + 0.01)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_estimated_response_is_column_stochastic(seed):
    rng = np.random.default_rng(seed)
    n = 300
    g = rng.normal(size=n)
    s = g + rng.normal(0, rng.uniform(0, 2), n)
    gm, sm = rng.random(n) < 0.9, rng.random(n) < 0.9
    gm |= ~sm
    w = rng.uniform(0, 3, n)
    e = np.linspace(-2, 2, int(rng.integers(2, 10)))
    r = estimate_response(SyntheticSample(g, s, gm, sm, w), e, e)
    assert np.allclose(r.matrix.sum(axis=0)[~r.empty_columns], 1, atol=1e-12)
    assert np.all(r.matrix.sum(axis=0)[r.empty_columns] == 0)
    assert np.all((r.efficiency >= 0) & (r.efficiency <= 1 + 1e-12))
    assert np.all((r.acceptance >= 0) & (r.acceptance <= 1 + 1e-12))


def test_out_of_range_pairs_are_losses():
    g = np.array([0.5, 0.5, 5.0])
    s = np.array([0.5, 5.0, 0.5])
    ones = np.ones(3, bool)
    r = estimate_response(SyntheticSample(g, s, ones, ones, np.ones(3)), [0, 1], [0, 1])
    assert r.matrix.tolist() == [[1.0]]
    assert r.efficiency.tolist() == [0.5] and r.acceptance.tolist() == [0.5]


def test_response_csv_round_trip(tmp_path, toy):
    e = np.linspace(-3, 3, 7)
    r = estimate_response(toy.synthetic, e, e)
    r.to_csv(tmp_path / "r.csv")
    back = ResponseMatrix.from_csv(tmp_path / "r.csv")
    for name in ("matrix", "acceptance", "efficiency", "gen_edges", "sim_edges"):
        assert np.array_equal(getattr(back, name), getattr(r, name))


# ---------------------------------------------------------------------------
# IBU

def test_identity_response_returns_data():
    d = hist([10.0, 30.0, 5.0])
    out = ibu(d, None, ResponseMatrix.from_matrix(np.eye(3)), hist([1.0, 1.0, 1.0]), 1)
    assert np.allclose(out.contents, d.contents, rtol=1e-14)


def test_two_bin_example_converges_to_linear_solve():
    out = ibu(hist([60.0, 40.0]), None, ResponseMatrix.from_matrix(R2), hist([50.0, 50.0]), 1000)
    exact = np.linalg.solve(R2, [60.0, 40.0])
    assert np.allclose(exact, [200 / 3, 100 / 3])
    assert np.all(np.abs(out.contents - exact) / exact < 1e-6)


def test_zero_iterations_returns_prior():
    assert ibu(hist([6.0, 4.0]), None, ResponseMatrix.from_matrix(R2), hist([1.0, 2.0]), 0).contents.tolist() == [1, 2]


@pytest.mark.parametrize("seed", range(50))
def test_em_loglik_non_decreasing(seed):
    r, d, prior = random_instance(np.random.default_rng(seed))
    its = ibu_iterates(d, None, r, prior, 30)
    ll = [poisson_loglik(prior, r, d)] + [poisson_loglik(h, r, d) for h in its]
    diffs = np.diff(ll)
    assert np.all(diffs >= -1e-9 * np.abs(ll[1:]))


@pytest.mark.parametrize("seed", range(10))
def test_mass_conservation(seed):
    r, d, prior = random_instance(np.random.default_rng(100 + seed))
    for h in ibu_iterates(d, None, r, prior, 20):
        assert abs(h.contents.sum() - d.contents.sum()) <= 1e-10 * d.contents.sum()


def test_prior_sensitivity_decays():
    r = ResponseMatrix.from_matrix(R2)
    d = hist([60.0, 40.0])
    a = ibu_iterates(d, None, r, hist([50.0, 50.0]), 40)
    b = ibu_iterates(d, None, r, hist([90.0, 10.0]), 40)
    dist = [np.abs(x.contents - y.contents).sum() for x, y in zip(a, b)]
    assert np.all(np.diff(dist) < 0)


def test_noise_acceptance_efficiency_pipeline():
    r = ResponseMatrix.from_matrix(np.eye(2), acceptance=[0.5, 1.0], efficiency=[0.8, 0.5])
    out = ibu(hist([30.0, 20.0]), hist([10.0, 0.0]), r, hist([1.0, 1.0]), 1)
    # (d - n) * acc = [10, 20]; identity response; divide by efficiency
    assert np.allclose(out.contents, [12.5, 40.0])


def test_negative_bins_clipped_with_warning():
    r = ResponseMatrix.from_matrix(np.eye(2))
    with pytest.warns(RuntimeWarning, match="negative"):
        out = ibu(hist([5.0, 20.0]), hist([10.0, 0.0]), r, hist([1.0, 1.0]), 1)
    assert out.contents.tolist() == [0.0, 20.0]


def test_zero_efficiency_bin_excluded():
    r = ResponseMatrix.from_matrix(np.array([[1.0, 0.0], [0.0, 1.0]]), efficiency=[1.0, 0.0])
    with pytest.warns(RuntimeWarning, match="efficiency"):
        out = ibu(hist([5.0, 5.0]), None, r, hist([1.0, 1.0]), 3)
    assert out.contents[1] == 0 and np.isfinite(out.contents).all()


def test_prior_validation():
    r = ResponseMatrix.from_matrix(R2)
    with pytest.raises(ValueError):
        ibu(hist([1.0, 1.0]), None, r, hist([1.0, 0.0]), 1)
    with pytest.raises(ValueError):
        ibu(hist([1.0, 1.0]), None, r, hist([1.0, 1.0, 1.0]), 1)


def test_ibu_mean_on_toy_within_ensemble_spread():
    e = np.linspace(-3, 3, 21)
    means = []
    for seed in range(10):
        ds = generate_gaussian_1d(ToyConfig(seed=200 + seed))
        r = estimate_response(ds.synthetic, e, e)
        s = ds.synthetic
        prior = histogram(s.gen[s.gen_mask, 0], e)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = ibu(histogram(ds.data.x[:, 0], e), histogram(ds.noise_mc.x[:, 0], e), r, prior, 4)
        means.append(out.mean())
    means = np.array(means)
    assert abs(means.mean() - 0.2) < 2 * means.std(ddof=1)


# ---------------------------------------------------------------------------
# likelihood

def test_loglik_maximal_at_mu_equal_d():
    r = ResponseMatrix.from_matrix(np.eye(3))
    d = np.array([5.0, 7.0, 2.0])
    best = poisson_loglik(d, r, d)
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert poisson_loglik(d * rng.uniform(0.5, 1.5, 3), r, d) <= best


def test_loglik_grid_search_oracle():
    r = ResponseMatrix.from_matrix(R2)
    d = np.array([60.0, 40.0])
    grid = np.linspace(40, 90, 501)
    vals = [[poisson_loglik([a, b], r, d) for b in np.linspace(10, 60, 501)] for a in grid]
    i, j = np.unravel_index(np.argmax(vals), (501, 501))
    assert grid[i] == pytest.approx(200 / 3, abs=0.1)
    assert np.linspace(10, 60, 501)[j] == pytest.approx(100 / 3, abs=0.1)


def test_loglik_minus_inf_when_mu_zero():
    r = ResponseMatrix.from_matrix(np.eye(2))
    assert poisson_loglik([0.0, 1.0], r, [1.0, 1.0]) == -np.inf
