import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from zsqbench import model as M
from zsqbench import quant as Q
from zsqbench.errors import CalibrationError, ContractError, DomainError, FormatError, ParameterError, StateError
from zsqbench.tensor import Tensor, backward

from conftest import tiny_spec
from oracles import nearest_code_oracle


# -- parameter examples -------------------------------------------------------------------

def test_minmax_two_bit_example():
    qp = Q.compute_minmax_params(np.array([-1.0, 0.0, 1.0]), 2)
    assert (qp.alpha, qp.beta) == (-1.0, 1.0)
    assert qp.scale == pytest.approx(2 / 3)
    assert qp.zero_point == pytest.approx(0.5)
    assert Q.quantize_rtn([-1.0, 0.0, 1.0], qp).tolist() == [-2, 0, 1]


def test_minmax_four_bit_example():
    qp = Q.compute_minmax_params(np.array([0.0, 15.0]), 4)
    assert qp.scale == 1.0 and qp.zero_point == 8.0
    assert Q.quantize_rtn([15.0], qp).tolist() == [7]


def test_constant_tensor_degenerate_range():
    qp = Q.compute_minmax_params(np.full(5, 0.25), 4)
    assert qp.scale == 1.0 and qp.zero_point == 0.25
    codes = Q.quantize_rtn(np.full(5, 0.25), qp)
    assert np.all(codes == 0)
    np.testing.assert_array_equal(Q.dequantize(codes, qp), np.full(5, 0.25, np.float32))


def test_value_at_beta_maps_to_top_code_and_below_alpha_to_bottom():
    qp = Q.params_from_range(-0.3, 1.7, 3)
    assert Q.quantize_rtn([1.7], qp).tolist() == [qp.qmax]
    assert Q.quantize_rtn([-5.0], qp).tolist() == [qp.qmin]
    assert Q.quantize_rtn([50.0], qp).tolist() == [qp.qmax]


def test_dequantize_examples():
    qp = Q.compute_minmax_params(np.array([-1.0, 0.0, 1.0]), 2)
    np.testing.assert_allclose(Q.dequantize([1, -2], qp), [1.0, -1.0], rtol=1e-6)


def test_dequantize_rejects_out_of_range_codes():
    qp = Q.params_from_range(0.0, 1.0, 2)
    with pytest.raises(ContractError):
        Q.dequantize([2], qp)


@pytest.mark.parametrize("values", [np.array([]), np.zeros((0, 3))])
def test_empty_tensor_is_domain_error(values):
    with pytest.raises(DomainError):
        Q.compute_minmax_params(values, 4)


def test_nonfinite_values_are_domain_error():
    with pytest.raises(DomainError):
        Q.compute_minmax_params(np.array([0.0, np.nan]), 4)


@pytest.mark.parametrize("bits", [1, 0, 2.5])
def test_invalid_bits(bits):
    with pytest.raises(ParameterError):
        Q.params_from_range(0.0, 1.0, bits)


def test_inverted_range():
    with pytest.raises(ParameterError):
        Q.params_from_range(1.0, 0.0, 4)


# -- brute-force oracle -------------------------------------------------------------------

@pytest.mark.parametrize("draw", range(20))
def test_rtn_matches_exhaustive_nearest_code(draw):
    rng = np.random.default_rng(draw)
    bits = int(rng.integers(2, 9))
    alpha = float(rng.normal(0, 2))
    beta = alpha + float(rng.uniform(1e-3, 5))
    qp = Q.params_from_range(alpha, beta, bits)
    # include out-of-range values so clamping is exercised
    span = beta - alpha
    values = rng.uniform(alpha - 0.2 * span, beta + 0.2 * span, 10_000)
    np.testing.assert_array_equal(Q.quantize_rtn(values, qp), nearest_code_oracle(values, qp))


def test_exact_half_ties_round_up():
    qp = Q.params_from_range(0.0, 15.0, 4)   # s = 1, z = 8
    # 2.5 sits halfway between the representable values 2 and 3
    assert Q.quantize_rtn([2.5], qp).tolist() == [-5]
    assert nearest_code_oracle(np.array([2.5]), qp).tolist() == [-5]


# -- invariants -----------------------------------------------------------------------------

ranges = st.tuples(st.floats(-100, 100), st.floats(1e-3, 100), st.integers(2, 8))


@settings(max_examples=200, deadline=None)
@given(ranges, hnp.arrays(np.float64, 64, elements=st.floats(0, 1)))
def test_round_trip_error_within_half_step(r, u):
    alpha, width, bits = r
    qp = Q.params_from_range(alpha, alpha + width, bits)
    w = alpha + u * width
    err = np.abs(Q.dequantize(Q.quantize_rtn(w, qp), qp).astype(np.float64) - w)
    # float32 storage of the dequantized value adds relative rounding on top
    tol = qp.scale / 2 + 1e-6 + 1e-6 * np.maximum(np.abs(w), 1.0)
    assert np.all(err <= tol)


@settings(max_examples=200, deadline=None)
@given(ranges, hnp.arrays(np.float64, 64, elements=st.floats(-1e3, 1e3)))
def test_codes_in_range_and_monotone(r, w):
    alpha, width, bits = r
    qp = Q.params_from_range(alpha, alpha + width, bits)
    w = np.sort(w)
    codes = Q.quantize_rtn(w, qp)
    assert codes.min() >= -(2 ** (bits - 1)) and codes.max() <= 2 ** (bits - 1) - 1
    assert np.all(np.diff(codes) >= 0)


@settings(max_examples=200, deadline=None)
@given(ranges, hnp.arrays(np.float64, 32, elements=st.floats(0, 1)))
def test_requantizing_dequantized_values_is_a_fixed_point(r, u):
    alpha, width, bits = r
    qp = Q.params_from_range(alpha, alpha + width, bits)
    codes = Q.quantize_rtn(alpha + u * width, qp)
    again = Q.quantize_rtn(Q.dequantize(codes, qp), qp)
    np.testing.assert_array_equal(again, codes)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 50), elements=st.floats(-10, 10)), st.integers(2, 8))
def test_minmax_params_satisfy_defining_relations(v, bits):
    assume(v.max() > v.min())
    qp = Q.compute_minmax_params(v, bits)
    assert qp.scale == pytest.approx((v.max() - v.min()) / (2 ** bits - 1))
    assert qp.zero_point == pytest.approx(v.min() / qp.scale + 2 ** (bits - 1))


# -- straight-through estimator ------------------------------------------------------------

def test_ste_gradient_is_one_inside_zero_outside():
    qp = Q.params_from_range(-1.0, 1.0, 4)
    x = Tensor(np.array([-2.0, -0.5, 0.0, 0.7, 1.5]), requires_grad=True)
    backward(Q.fake_quant(x, qp).sum())
    np.testing.assert_array_equal(x.grad, [0, 1, 1, 1, 0])


def test_fake_quant_forward_equals_dequantized_codes():
    rng = np.random.default_rng(0)
    w = rng.normal(size=100).astype(np.float32)
    qp = Q.compute_minmax_params(w, 3)
    np.testing.assert_array_equal(Q.fake_quant(Tensor(w), qp).data, Q.dequantize(Q.quantize_rtn(w, qp), qp))


# -- quantized model -----------------------------------------------------------------------

@pytest.fixture
def calib(rng):
    return [rng.normal(size=(8, 3, 8, 8)).astype(np.float32) for _ in range(2)]


def test_bypass_mode_matches_full_precision(tiny_model, calib):
    q = Q.quantize_model(tiny_model, None, None)
    x = calib[0]
    np.testing.assert_allclose(Q.fake_quant_forward(q, Tensor(x)).data, M.predict_logits(tiny_model, x), atol=1e-5)


def test_uncalibrated_activation_site_is_state_error(tiny_model, calib):
    q = Q.quantize_model(tiny_model, 4, 4)
    with pytest.raises(StateError):
        Q.fake_quant_forward(q, Tensor(calib[0]))


def test_calibration_needs_a_batch(tiny_model):
    q = Q.quantize_model(tiny_model, 4, 4)
    with pytest.raises(CalibrationError):
        Q.calibrate_activation_ranges(q, [])


def test_single_batch_sets_ranges_to_batch_extremes(tiny_model, calib):
    q = Q.quantize_model(tiny_model, 4, 4)
    seen = {}

    def record(site, x):
        seen[site] = (float(x.data.min()), float(x.data.max()))
        return x

    tiny_model.forward(Tensor(calib[0]), "eval", weight_fn=q._weight_fn, act_fn=record)
    Q.calibrate_activation_ranges(q, [calib[0]])
    for i, s in enumerate(q.sites):
        assert (s.running_min, s.running_max) == seen[i]


def test_relu_sites_have_zero_lower_bound(tiny_model, calib):
    q = Q.quantize_model(tiny_model, 4, 4)
    params = Q.calibrate_activation_ranges(q, calib)
    relu_sites = [q.model.act_sites[i] for i, l in enumerate(q.model.layers) if l.kind == "relu"]
    assert all(abs(params[s].alpha) <= 1e-6 for s in relu_sites)


def test_repeated_batch_is_an_ema_fixed_point(tiny_model, calib):
    a = Q.quantize_model(tiny_model, 4, 4)
    b = Q.quantize_model(tiny_model, 4, 4)
    pa = Q.calibrate_activation_ranges(a, [calib[0]])
    pb = Q.calibrate_activation_ranges(b, [calib[0], calib[0]])
    for x, y in zip(pa, pb):
        assert x.alpha == pytest.approx(y.alpha, abs=1e-7) and x.beta == pytest.approx(y.beta, abs=1e-7)


def test_quantize_model_leaves_source_untouched(tiny_model):
    before = {k: v.data.copy() for k, v in tiny_model.params.items()}
    q = Q.quantize_model(tiny_model, 4, 4)
    q.model.params["0.weight"].data[:] = 0
    assert all(np.array_equal(before[k], v.data) for k, v in tiny_model.params.items())


def test_gradients_reach_shadow_weights(tiny_model, calib):
    q = Q.quantize_model(tiny_model, 4, 4)
    Q.calibrate_activation_ranges(q, calib)
    logits = Q.fake_quant_forward(q, Tensor(calib[0]))
    backward(logits.sum())
    assert all(p.grad is not None and np.any(p.grad != 0) for n, p in q.model.params.items() if n.endswith("weight"))


def test_ends_8bit_flag_only_touches_first_and_last_weights(tiny_model):
    q = Q.quantize_model(tiny_model, 4, 4, ends_8bit=True)
    names = q.model.weight_names()
    assert q.weight_params[names[0]].bits == 8 and q.weight_params[names[-1]].bits == 8
    assert all(q.weight_params[n].bits == 4 for n in names[1:-1])
    plain = Q.quantize_model(tiny_model, 4, 4)
    assert all(p.bits == 4 for p in plain.weight_params.values())


def test_rtn_quantization_lowers_logit_fidelity(tiny_model, calib):
    ref = M.predict_logits(tiny_model, calib[0])
    errs = []
    for bits in (8, 4, 2):
        q = Q.quantize_model(tiny_model, bits, bits)
        Q.calibrate_activation_ranges(q, calib)
        errs.append(np.abs(Q.fake_quant_forward(q, Tensor(calib[0])).data - ref).mean())
    assert errs[0] < errs[1] < errs[2]


# -- quantized checkpoint --------------------------------------------------------------------

def test_quantized_checkpoint_round_trip(tmp_path, tiny_model, calib):
    q = Q.quantize_model(tiny_model, 3, 4)
    Q.calibrate_activation_ranges(q, calib)
    Q.save_quantized(q, tmp_path / "q")
    loaded, codes = Q.load_quantized(tmp_path / "q")
    for name, qp in q.weight_params.items():
        assert loaded.weight_params[name] == qp
        np.testing.assert_array_equal(codes[name], Q.quantize_rtn(q.model.params[name].data, qp))
        assert codes[name].dtype == np.int8
    x = Tensor(calib[1])
    assert Q.fake_quant_forward(loaded, x).data.tobytes() == Q.fake_quant_forward(q, x).data.tobytes()


def test_quantized_checkpoint_bytes_are_reproducible(tmp_path, tiny_model, calib):
    for tag in ("a", "b"):
        q = Q.quantize_model(tiny_model, 4, 4)
        Q.calibrate_activation_ranges(q, calib)
        Q.save_quantized(q, tmp_path / tag)
    for ext in (".codes", ".blob", ".manifest.json"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()


def test_loading_plain_checkpoint_as_quantized_is_format_error(tmp_path, tiny_model):
    M.save_checkpoint(tiny_model, tmp_path / "p")
    with pytest.raises(FormatError):
        Q.load_quantized(tmp_path / "p")


def test_truncated_codes_file_is_format_error(tmp_path, tiny_model, calib):
    q = Q.quantize_model(tiny_model, 4, 4)
    Q.calibrate_activation_ranges(q, calib)
    Q.save_quantized(q, tmp_path / "q")
    p = tmp_path / "q.codes"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        Q.load_quantized(tmp_path / "q")
