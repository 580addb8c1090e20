import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdrbracket import io
from hdrbracket.imaging import (Crf, DorfParseError, ExposureMeta, ExposureStack, LdrImage, RadianceMap,
                                apply_crf, builtin_crfs, format_dorf, gamma_crf, identity_crf, invert_crf,
                                load_dorf, simulate_ldr, strided_indices, strictly_increasing_mask,
                                synth_dataset, synth_stack, synthetic_radiance, synthetic_response_curves)


def _const(v, shape=(4, 5)):
    return RadianceMap(np.full(shape + (3,), v, dtype=np.float64))


# --- curves -----------------------------------------------------------------


def test_crf_normalizes_samples():
    c = Crf("raw", np.linspace(2, 4, 11), np.linspace(10, 30, 11) ** 1.5)
    assert c.samples_x[0] == 0 and c.samples_x[-1] == 1
    assert c.samples_b[0] == 0 and c.samples_b[-1] == 1


def test_crf_rejects_decreasing_brightness():
    b = np.linspace(0, 1, 1024)
    b[500] = b[499] - 0.01
    with pytest.raises(ValueError, match="index 500"):
        Crf("bad", np.linspace(0, 1, 1024), b)


def test_crf_rejects_length_mismatch():
    with pytest.raises(ValueError):
        Crf("bad", np.linspace(0, 1, 5), np.linspace(0, 1, 6))


def test_apply_identity_and_clip():
    c = identity_crf()
    assert apply_crf(c, 0.37) == pytest.approx(0.37, abs=1e-12)
    assert apply_crf(c, 1.7) == 1.0
    out, clipped = apply_crf(c, np.array([-0.1, 0.5, 1.2]), return_clipped=True)
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
    assert clipped.tolist() == [True, False, True]


def test_gamma_forward_and_inverse():
    c = gamma_crf(2.2)
    expected = 0.25 ** (1 / 2.2)
    assert expected == pytest.approx(0.5325, abs=1e-4)
    assert apply_crf(c, 0.25) == pytest.approx(0.5325, abs=1e-3)
    assert invert_crf(c, 0.5325) == pytest.approx(0.25, abs=2e-3)
    assert invert_crf(identity_crf(), 0.8) == pytest.approx(0.8, abs=1e-12)


def test_flat_segment_inverts_to_midpoint():
    x = np.linspace(0, 1, 1024)
    c = Crf("knee", x, np.minimum(x / 0.9, 1.0))
    # last flat run starts at the first sample >= 0.9
    first = x[np.argmax(x >= 0.9)]
    assert invert_crf(c, 1.0) == pytest.approx(0.5 * (first + 1.0), abs=1e-12)
    assert invert_crf(c, 1.0) == pytest.approx(0.95, abs=1e-3)


@pytest.mark.parametrize("crf", builtin_crfs(), ids=lambda c: c.name)
def test_round_trip_on_increasing_region(crf):
    x = np.linspace(0, 1, 10_000)
    keep = strictly_increasing_mask(crf, x)
    err = np.abs(invert_crf(crf, apply_crf(crf, x[keep])) - x[keep])
    assert err.max() <= 2 / 1024


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=40), st.sampled_from(range(5)))
def test_apply_crf_is_monotone(xs, k):
    crf = builtin_crfs()[k]
    xs = np.sort(np.array(xs))
    assert np.all(np.diff(apply_crf(crf, xs)) >= 0)


# --- DoRF files -------------------------------------------------------------


def test_strided_indices():
    assert strided_indices(201, 5) == [0, 50, 100, 150, 200]
    assert strided_indices(7, 1) == [0]
    with pytest.raises(ValueError):
        strided_indices(3, 4)


def test_load_dorf_count_and_names(tmp_path):
    curves = synthetic_response_curves(201)
    p = tmp_path / "dorf.txt"
    p.write_text(format_dorf(curves))
    picked = load_dorf(p, 5)
    assert [c.name for c in picked] == [curves[i].name for i in (0, 50, 100, 150, 200)]
    named = load_dorf(p, [curves[7].name, curves[3].name])
    assert [c.name for c in named] == [curves[3].name, curves[7].name]  # file order
    with pytest.raises(KeyError):
        load_dorf(p, ["nope"])


def test_load_dorf_identity(tmp_path):
    p = tmp_path / "id.txt"
    p.write_text(format_dorf([identity_crf()]))
    (c,) = load_dorf(p, 1)
    np.testing.assert_allclose(c.samples_b, c.samples_x, atol=1e-6)


def test_load_dorf_labels_inline(tmp_path):
    x = np.linspace(0, 1, 1024)
    text = "curve A\ngraph\nI = " + " ".join(map(str, x)) + "\nB = " + " ".join(map(str, x**0.5)) + "\n"
    p = tmp_path / "inline.txt"
    p.write_text(text)
    (c,) = load_dorf(p)
    assert c.name == "curve A"
    assert apply_crf(c, 0.25) == pytest.approx(0.5, abs=1e-3)


def test_load_dorf_decreasing_names_curve(tmp_path):
    x = np.linspace(0, 1, 1024)
    b = x.copy()
    b[500] = b[498]
    p = tmp_path / "bad.txt"
    p.write_text(f"broken\ngraph\nI =\n{' '.join(map(str, x))}\nB =\n{' '.join(map(str, b))}\n")
    with pytest.raises(DorfParseError, match="broken.*index 500"):
        load_dorf(p)


def test_load_dorf_truncated(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("lonely\ngraph\nI =\n0 0.5 1\n")
    with pytest.raises(DorfParseError, match="lonely"):
        load_dorf(p)


# --- exposure model ---------------------------------------------------------


def test_exposure_meta():
    m = ExposureMeta.from_ev(2)
    assert m.delta_t == 4.0 and m.ev_offset == 2.0
    assert ExposureMeta.from_delta_t(0.5).ev_offset == -1.0
    with pytest.raises(ValueError):
        ExposureMeta.from_delta_t(0.0)


def test_simulate_ldr_examples():
    ones = simulate_ldr(_const(1.0), ExposureMeta.from_ev(0), identity_crf(), 8)
    assert np.all(ones.pixels == 1.0)
    q = simulate_ldr(_const(0.5), ExposureMeta.from_delta_t(0.5), identity_crf(), 8)
    assert np.all(q.pixels == 64 / 255)
    g = simulate_ldr(_const(0.5), ExposureMeta.from_delta_t(0.5), gamma_crf(2.2), 16)
    assert np.abs(g.pixels - 0.25 ** (1 / 2.2)).max() <= 1 / (2 * 65535) + 1e-6


def test_simulate_ldr_quantization_bound():
    E = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    img = simulate_ldr(E, ExposureMeta.from_ev(0), identity_crf(), 16)
    assert np.abs(img.pixels - E).max() <= 1 / (2 * 65535) + 1e-12
    k = img.pixels * 65535
    np.testing.assert_allclose(k, np.round(k), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(-4, 4), st.integers(0, 2**16))
def test_ev_semantics_bit_exact(k, seed):
    E = np.random.default_rng(seed).uniform(0, 2, (4, 4, 3))
    crf = builtin_crfs()[seed % 5]
    a = simulate_ldr(E, ExposureMeta.from_ev(k), crf, 8).pixels
    b = simulate_ldr(2.0**k * E, ExposureMeta.from_ev(0), crf, 8).pixels
    assert np.array_equal(a, b)


def test_synth_stack():
    E = synthetic_radiance(16, 16, seed=3)
    s = synth_stack(E, list(range(-4, 5)), gamma_crf(), 16, "x")
    assert len(s) == 9 and s.evs == list(map(float, range(-4, 5)))
    single = synth_stack(E, [0], gamma_crf(), 8)
    ref = simulate_ldr(E, ExposureMeta.from_ev(0), gamma_crf(), 8)
    assert np.array_equal(single[0].pixels, ref.pixels)
    with pytest.raises(ValueError):
        synth_stack(E, [1, 0])
    with pytest.raises(ValueError):
        synth_stack(E, [0, 0])


def test_stack_invariants():
    a = LdrImage(np.zeros((4, 4, 3)), ExposureMeta.from_ev(0))
    b = LdrImage(np.zeros((4, 4, 3)), ExposureMeta.from_ev(0))
    with pytest.raises(ValueError):
        ExposureStack([a, b])
    c = LdrImage(np.zeros((5, 4, 3)), ExposureMeta.from_ev(1))
    with pytest.raises(ValueError):
        ExposureStack([a, c])


def test_ldr_rejects_out_of_range():
    with pytest.raises(ValueError):
        LdrImage(np.full((2, 2, 3), 1.5), ExposureMeta.from_ev(0))
    with pytest.raises(ValueError):
        RadianceMap(np.full((2, 2, 3), -1.0))


def test_synth_dataset_counts(tmp_path, caplog):
    hdr = tmp_path / "hdr"
    hdr.mkdir()
    for i in range(2):
        io.write_pfm(hdr / f"scene{i}.pfm", synthetic_radiance(8, 8, seed=i).pixels)
    (hdr / "junk.hdr").write_bytes(b"not an image")
    out = tmp_path / "out"
    rows = synth_dataset(hdr, builtin_crfs()[:5], list(range(-4, 5)), out, 8)
    assert len(rows) == 90
    assert len(list(out.glob("*.png"))) == 90
    assert "junk.hdr" in caplog.text
    stacks = io.load_stacks(out / "manifest.tsv")
    assert len(stacks) == 10 and all(len(s) == 9 for s in stacks)


def test_synth_dataset_single(tmp_path):
    hdr = tmp_path / "hdr"
    hdr.mkdir()
    io.write_hdr(hdr / "one.hdr", synthetic_radiance(8, 8).pixels)
    rows = synth_dataset(hdr, [gamma_crf()], list(range(-4, 5)), tmp_path / "o")
    assert len(rows) == 9
    assert len(io.load_stacks(tmp_path / "o" / "manifest.tsv")) == 1


def test_synth_dataset_empty(tmp_path):
    with pytest.raises(RuntimeError):
        synth_dataset(tmp_path, [gamma_crf()], [0], tmp_path / "o")


def test_full_scale_count():
    assert 1043 * 5 * 9 == 46_935
    assert math.isclose(2.0 ** -4, ExposureMeta.from_ev(-4).delta_t)
