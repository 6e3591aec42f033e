import numpy as np
import pytest

from ecgcl import perturb as pt
from ecgcl.signals import Frame


def rng(seed=0):
    return np.random.default_rng(seed)


def test_flips_by_definition():
    np.testing.assert_array_equal(pt.flip_y(np.array([1.0, 2.0, 3.0])), [3, 2, 1])
    np.testing.assert_array_equal(pt.flip_x(np.array([1.0, -2.0])), [-1, 2])
    pal = np.array([1.0, 4.0, 1.0])
    np.testing.assert_array_equal(pt.flip_y(pal), pal)
    np.testing.assert_array_equal(pt.flip_x(np.zeros(5)), 0)


def test_flips_are_exact_involutions():
    for seed in range(20):
        x = rng(seed).standard_normal(2500)
        assert np.array_equal(pt.flip_y(pt.flip_y(x)), x)
        assert np.array_equal(pt.flip_x(pt.flip_x(x)), x)


def test_flips_keep_frame_identity():
    f = Frame("p7", "V2", 4, np.arange(5.0), (2,))
    out = pt.flip_y(f)
    assert (out.patient, out.lead, out.segment_index, out.labels) == ("p7", "V2", 4, frozenset({2}))


def test_gaussian_noise_statistics():
    x = np.zeros(200_000)
    noise = pt.gaussian(x, 0.3, rng(1))
    assert abs(noise.mean()) < 3 * 0.3 / np.sqrt(len(x)) * 2
    assert abs(noise.std() - 0.3) < 0.005


def test_gaussian_relative_scales_with_range_and_small_sigma_limit():
    x = np.linspace(0, 10, 10_000)
    out = pt.gaussian(x, 0.05, rng(2), relative=True)
    assert abs((out - x).std() - 0.5) < 0.02
    tiny = pt.gaussian(x, 1e-9, rng(3))
    assert np.mean(np.abs(tiny - x)) < 1e-8


def test_gaussian_rejects_non_positive_sigma():
    with pytest.raises(ValueError):
        pt.gaussian(np.zeros(4), 0.0, rng())


def test_stft_round_trip_white_noise():
    for seed in range(100):
        x = rng(seed).standard_normal(2500)
        back = pt.istft(pt.stft(x, 256, 128))
        assert back.shape == x.shape
        assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-5


def test_stft_of_zero_frame_is_zero():
    spec = pt.stft(np.zeros(2500))
    assert not spec.values.any()
    assert not pt.istft(spec).any()


def test_stft_rejects_window_longer_than_frame():
    with pytest.raises(ValueError):
        pt.stft(np.zeros(100), 256)


def test_sinusoid_at_bin_center_concentrates_in_main_lobe():
    W, k0 = 256, 20
    n = np.arange(2500)
    x = np.cos(2 * np.pi * k0 * n / W)
    power = np.abs(pt.stft(x, W, W // 2).values) ** 2
    interior = power[:, 2:-2]
    frac = interior.sum(axis=1) / interior.sum()

    # Oracle: direct DFT of one Hann-windowed full period block.
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(W) / W)
    block = np.abs(np.fft.rfft(win * x[:W])) ** 2
    oracle = block / block.sum()

    np.testing.assert_allclose(frac, oracle, atol=1e-9)
    assert frac[k0] == pytest.approx(2 / 3, abs=1e-9)
    assert frac[k0 - 1:k0 + 2].sum() > 0.9


def test_spec_augment_masks_two_of_ten_frequency_bins():
    x = rng(4).standard_normal(200)
    spec = pt.stft(x, window_len=18)
    assert spec.n_freq == 10
    masked, starts = pt.mask_spectrogram(spec, "f", 0.2, 1, rng(5))
    zero_rows = np.flatnonzero(~masked.values.any(axis=1))
    assert len(zero_rows) == 2
    assert list(zero_rows) == [starts[0], starts[0] + 1]


def test_spec_augment_near_full_width_start_enumeration():
    spec = pt.stft(rng(6).standard_normal(200), window_len=18)
    starts = {pt.mask_spectrogram(spec, "f", 0.999, 1, rng(s))[1][0] for s in range(200)}
    assert starts == {0, 1}
    masked, _ = pt.mask_spectrogram(spec, "f", 0.999, 1, rng(0))
    assert (~masked.values.any(axis=1)).sum() == 9


def test_spec_augment_time_axis_and_length_preserved():
    x = rng(7).standard_normal(2500)
    out = pt.spec_augment(x, "t", 0.2, 1, rng(8))
    assert out.shape == x.shape
    assert not np.allclose(out, x)


def test_spec_augment_without_masked_bins_warns_and_round_trips():
    x = rng(9).standard_normal(2500)
    with pytest.warns(pt.MaskWarning):
        out = pt.spec_augment(x, "f", 0.001, 1, rng(10))
    assert np.linalg.norm(out - x) / np.linalg.norm(x) < 1e-5


def test_chains():
    x = rng(11).standard_normal(300)
    assert np.array_equal(pt.apply_chain(x, [], rng()), x)
    assert np.array_equal(pt.apply_chain(x, [pt.FlipX(), pt.FlipX()], rng()), x)
    chain = pt.parse_chain("gaussian(sigma=0.05r)>sa(axis=f,w=0.3,R=2)>flipy")
    a = pt.apply_chain(x, chain, rng(12))
    b = pt.apply_chain(x, chain, rng(12))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("text", ["gaussian(sigma=0.05r)", "gaussian(sigma=0.1)", "flipx", "flipy",
                                  "sa(axis=t,w=0.2,R=1)", "gaussian(sigma=0.05r)>sa(axis=f,w=0.5,R=3)>flipx"])
def test_chain_grammar_round_trip(text):
    assert pt.format_chain(pt.parse_chain(text)) == text


@pytest.mark.parametrize("text", ["blur", "sa(axis=x)", "sa(w=1.2)", "gaussian(sigma=-1)", "flipx(k=1)"])
def test_chain_grammar_rejects(text):
    with pytest.raises(ValueError):
        pt.parse_chain(text)
