import numpy as np
import pytest

from warpadapt.autograd import Tensor
from warpadapt.errors import ConfigError, FormatError
from warpadapt.scenegen import (DomainShift, SceneSample, apply_domain_shift,
                                generate_scene, read_dataset, render_scene,
                                sample_from_bytes, sample_to_bytes, shift_preset,
                                split_domains, write_dataset)
from warpadapt.warping import warp_by_disparity, warp_by_flow


def stereo_error(sample, valid):
    """Mean |warp(right, disp, +1) - left| over stereo-visible pixels."""
    warped = warp_by_disparity(Tensor(sample.right), sample.disparity_field(), sign=1)
    err = np.abs(warped.data - sample.left).mean(axis=1, keepdims=True)
    m = valid > 0.5
    return err[m].mean()


def flow_error(sample):
    warped = warp_by_flow(Tensor(sample.next_left), sample.flow_field(), sign=1)
    err = np.abs(warped.data - sample.left).mean(axis=1, keepdims=True)
    m = sample.occlusion > 0.5
    return err[m].mean()


class TestGenerate:
    def test_deterministic(self):
        a = generate_scene(seed=7, width=64, height=32)
        b = generate_scene(seed=7, width=64, height=32)
        assert np.array_equal(a.left, b.left)
        assert np.array_equal(a.right, b.right)
        assert np.array_equal(a.flow, b.flow)

    def test_geometry_invariants_many_seeds(self):
        for seed in range(30):
            sample, diag = render_scene(seed, width=64, height=32)
            assert stereo_error(sample, diag.stereo_valid) < 1e-2
            assert flow_error(sample) < 1e-2

    def test_field_ranges(self):
        for seed in range(10):
            s = generate_scene(seed, width=64, height=32, max_disp=16, max_flow=8)
            assert s.disparity.min() >= 0
            assert s.disparity.max() <= 16
            mag = np.sqrt(s.flow[:, 0] ** 2 + s.flow[:, 1] ** 2)
            assert mag.max() <= 8

    def test_single_layer_constant_disparity(self):
        s = generate_scene(seed=3, width=64, height=32, num_layers=0)
        assert np.all(s.disparity == s.disparity.reshape(-1)[0])

    def test_occlusion_fraction(self):
        fractions = []
        for seed in range(20):
            s = generate_scene(seed, width=128, height=64)
            fractions.append(1.0 - s.occlusion.mean())
        assert np.mean(fractions) > 0.01

    def test_images_in_range(self):
        s = generate_scene(seed=5, width=64, height=32)
        for img in (s.left, s.right, s.next_left):
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_degenerate_extent_rejected(self):
        with pytest.raises(ConfigError):
            generate_scene(seed=0, width=30, height=32)


class TestDomainShift:
    def test_identity_shift(self):
        s = generate_scene(seed=11, width=64, height=32)
        shifted = apply_domain_shift(s, DomainShift(), seed=0)
        assert shifted.domain == "real"
        assert np.allclose(shifted.left, s.left, atol=1e-6)
        assert np.array_equal(shifted.disparity, s.disparity)

    def test_gamma_on_constant(self):
        s = generate_scene(seed=12, width=64, height=32)
        s = SceneSample(left=np.full_like(s.left, 0.5), right=s.right,
                        next_left=s.next_left, disparity=s.disparity, flow=s.flow,
                        occlusion=s.occlusion, domain="synthetic")
        shifted = apply_domain_shift(s, DomainShift(gamma_curve=0.7), seed=0)
        assert np.allclose(shifted.left, 0.5 ** 0.7, atol=1e-6)

    def test_geometry_survives_shift(self):
        # identical shift parameters preserve the stereo geometry; checked
        # strictly on the vignette-light preset at the design resolution
        for seed in range(10):
            sample, diag = render_scene(seed, width=128, height=64)
            shifted = apply_domain_shift(sample, shift_preset("mild"), seed=seed)
            assert stereo_error(shifted, diag.stereo_valid) < 1e-2
            assert np.array_equal(shifted.flow, sample.flow)

    def test_default_preset_vignette_bounded_inconsistency(self):
        # the default preset's vignette deliberately breaks cross-view
        # photometry (that is the domain gap); the residual stays within the
        # vignette's analytic bound while the fields remain untouched
        shift = shift_preset("default")
        tol = 1e-2 + 2.0 * shift.vignette_strength * 16 / 128
        for seed in range(10):
            sample, diag = render_scene(seed, width=128, height=64)
            shifted = apply_domain_shift(sample, shift, seed=seed)
            assert stereo_error(shifted, diag.stereo_valid) < tol
            assert np.array_equal(shifted.disparity, sample.disparity)
            assert np.array_equal(shifted.flow, sample.flow)

    def test_statistics_change(self):
        s = generate_scene(seed=13, width=128, height=64)
        shifted = apply_domain_shift(s, shift_preset("default"), seed=1)
        corrs = []
        for c in range(3):
            a = s.left[0, c].reshape(-1)
            b = shifted.left[0, c].reshape(-1)
            corrs.append(np.corrcoef(a, b)[0, 1])
        assert np.mean(corrs) < 0.995

    def test_real_sample_rejected(self):
        s = generate_scene(seed=14, width=64, height=32)
        shifted = apply_domain_shift(s, DomainShift(), seed=0)
        with pytest.raises(ConfigError):
            apply_domain_shift(shifted, DomainShift(), seed=0)


class TestDatasetFormat:
    def test_round_trip_bits(self, tmp_path):
        samples = [generate_scene(seed=s, width=64, height=32) for s in range(3)]
        samples.append(apply_domain_shift(samples[0], shift_preset("mild"), seed=9))
        write_dataset(samples, str(tmp_path))
        back = read_dataset(str(tmp_path))
        assert len(back) == 4
        for a, b in zip(samples, back):
            assert a.domain == b.domain
            for name in ("left", "right", "next_left", "disparity", "flow", "occlusion"):
                assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_truncation_names_offset(self):
        s = generate_scene(seed=1, width=64, height=32)
        buf = sample_to_bytes(s)
        with pytest.raises(FormatError, match="byte"):
            sample_from_bytes(buf[:50])

    def test_bad_magic_names_offset(self):
        s = generate_scene(seed=1, width=64, height=32)
        buf = b"XXXXXXXX" + sample_to_bytes(s)[8:]
        with pytest.raises(FormatError, match="magic"):
            sample_from_bytes(buf)

    def test_mixed_domain_partition(self, tmp_path):
        syn = [generate_scene(seed=s, width=64, height=32) for s in range(2)]
        real = [apply_domain_shift(s, shift_preset("mild"), seed=5) for s in syn]
        write_dataset(syn + real, str(tmp_path))
        back_syn, back_real = split_domains(read_dataset(str(tmp_path)))
        assert len(back_syn) == 2 and len(back_real) == 2

    def test_optional_fields_roundtrip(self, tmp_path):
        s = generate_scene(seed=2, width=64, height=32)
        bare = SceneSample(left=s.left, right=s.right, next_left=s.next_left,
                           disparity=None, flow=None, occlusion=None, domain="real")
        back = sample_from_bytes(sample_to_bytes(bare))
        assert back.disparity is None and back.flow is None and back.occlusion is None
        assert np.array_equal(back.left, bare.left)
