import numpy as np
import pytest

from bsdedensity.coeffs import (
    CoefficientFamily,
    Driver,
    ProblemSpec,
    affine,
    check_hypotheses,
    constant,
    eval_derivative,
    family_to_string,
    iterated_bracket,
    lie_bracket,
    parse_family,
    polynomial,
    quadratic,
    scaled_sigmoid,
    trig_affine,
)
from bsdedensity.errors import CoefficientError, GlobalDomainError

from oracles import FD_STEPS, central_diff

ALL_FAMILIES = [
    constant(2.5),
    affine(a=2, b=3),
    trig_affine(a=2, b=1),
    trig_affine(a=0.3, b=-1.2, c=0.7, d=0.4),
    scaled_sigmoid(a=2.0, k=1.5, b=0.2),
    quadratic(a=1, b=-2, c=0.5),
    polynomial(0.5, -1, 0.25, 2, -0.125),
]


def test_eval_examples():
    assert eval_derivative(affine(a=2, b=3), 1, 7.0) == 3.0
    sig = trig_affine(a=2, b=1)
    assert eval_derivative(sig, 0, 0.0) == 3.0
    assert abs(eval_derivative(sig, 2, np.pi / 2)) < 1e-12


def test_eval_vectorized_matches_scalar():
    fam = quadratic(a=1, b=-2, c=0.5)
    xs = np.linspace(-3, 3, 7)
    vec = eval_derivative(fam, 1, xs)
    assert vec.shape == xs.shape
    for x, v in zip(xs, vec):
        assert eval_derivative(fam, 1, float(x)) == v


def test_order_out_of_range():
    with pytest.raises(CoefficientError):
        eval_derivative(affine(a=1, b=1), 4, 0.0)
    with pytest.raises(CoefficientError):
        eval_derivative(affine(a=1, b=1), -1, 0.0)


def test_unknown_family_and_params():
    with pytest.raises(CoefficientError):
        CoefficientFamily("cubic-spline", {})
    with pytest.raises(CoefficientError):
        CoefficientFamily("affine", {"slope": 1.0})


@pytest.mark.parametrize("fam", ALL_FAMILIES, ids=lambda f: f.family)
@pytest.mark.parametrize("order", [1, 2, 3])
def test_derivatives_match_finite_differences(fam, order):
    xs = np.linspace(-5, 5, 100)
    f0 = lambda x: eval_derivative(fam, 0, x)  # noqa: E731
    worst = 0.0
    for x in xs:
        ana = eval_derivative(fam, order, float(x))
        num = central_diff(f0, float(x), order, FD_STEPS[order])
        worst = max(worst, abs(ana - num) / (1.0 + abs(ana)))
    assert worst < 1e-6


def test_lie_bracket_examples():
    h = polynomial(0, 1)          # x
    g = polynomial(0, 0, 1)       # x^2
    assert lie_bracket(h, g, 2.0) == 4.0
    assert lie_bracket(trig_affine(c=1), trig_affine(a=2, b=1), 0.0) == -3.0


def test_lie_bracket_antisymmetry_exact():
    rng = np.random.default_rng(0)
    xs = rng.uniform(-4, 4, 25)
    for h in ALL_FAMILIES[:4]:
        for g in ALL_FAMILIES[3:]:
            for x in xs:
                assert lie_bracket(h, g, float(x)) == -lie_bracket(g, h, float(x))
    # the diagonal vanishes identically
    for fam in ALL_FAMILIES:
        assert lie_bracket(fam, fam, 1.3) == 0.0


def test_iterated_bracket_examples():
    assert iterated_bracket(constant(2), polynomial(0, 0, 1), 1.0) == 8.0
    assert iterated_bracket(constant(2), affine(a=1, b=3), 0.7) == 0.0
    assert iterated_bracket(trig_affine(a=2, b=1), constant(0), 1.1) == 0.0


def test_parse_family_roundtrip():
    for fam in ALL_FAMILIES:
        back = parse_family(family_to_string(fam))
        assert back.family == fam.family
        assert back.params == fam.params
    assert parse_family("trig-affine(a=2, b=1)")(0.0) == 3.0
    with pytest.raises(CoefficientError):
        parse_family("affine[a=1]")
    with pytest.raises(CoefficientError):
        parse_family("affine(a=one)")


def test_driver_partials_match_finite_differences():
    drv = Driver(
        f_of_x=quadratic(a=0, b=0.5, c=0.25),
        f_of_y=trig_affine(a=1, c=0.5),
        cross_x=affine(a=0, b=1),
        cross_y=scaled_sigmoid(a=1, k=1),
        alpha=0.2,
    )
    h = 1e-5
    rng = np.random.default_rng(1)
    for x, y in rng.uniform(-2, 2, (20, 2)):
        f = lambda a, b: float(drv.f(a, b))  # noqa: E731
        num_fx = (f(x + h, y) - f(x - h, y)) / (2 * h)
        num_fy = (f(x, y + h) - f(x, y - h)) / (2 * h)
        num_fxy = (
            f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h)
        ) / (4 * h * h)
        assert abs(float(drv.fx(x, y)) - num_fx) < 1e-8 * (1 + abs(num_fx))
        assert abs(float(drv.fy(x, y)) - num_fy) < 1e-8 * (1 + abs(num_fy))
        assert abs(float(drv.fxy(x, y)) - num_fxy) < 1e-5


def _problem(b, sigma, phi=None, driver=None, terminal="phi-of-wt"):
    return ProblemSpec(
        x0=0.0,
        T=1.0,
        b=b,
        sigma=sigma,
        driver=driver or Driver(),
        terminal=terminal,
        phi=phi or affine(a=0, b=1),
        box=(-8, 8),
    )


def test_h3_pass_with_constants():
    prob = _problem(trig_affine(c=1), trig_affine(a=2, b=1))
    rep = check_hypotheses(prob, (-4, 4), 1000)
    h3 = rep.checks["H3"]
    assert h3.status == "pass"
    assert h3.constants["M"] <= 3 + 1e-9
    assert 1 - 1e-4 <= h3.constants["sigma_min"]
    assert h3.constants["sigma_max"] <= 3 + 1e-12


def test_h3_fail_sign_witness():
    prob = _problem(constant(0), affine(a=0, b=1))
    rep = check_hypotheses(prob, (-1, 1), 101)
    h3 = rep.checks["H3"]
    assert h3.status == "fail"
    assert h3.witness == -1.0
    # report soundness: the quoted inequality is violated at the witness
    assert eval_derivative(prob.sigma, 0, h3.witness) == h3.value < 0


def test_h7_fail_witness_near_half_pi():
    prob = _problem(constant(0), constant(1), phi=trig_affine(c=0.1, d=1))
    rep = check_hypotheses(prob, (-3, 3), 601)
    h7 = rep.checks["H7"]
    assert h7.status == "fail"
    assert abs(h7.witness - np.pi / 2) < 0.02
    assert eval_derivative(prob.phi, 2, h7.witness) <= 0


def test_global_domain_refused():
    prob = _problem(constant(0), constant(1))
    with pytest.raises(GlobalDomainError):
        check_hypotheses(prob, (-np.inf, np.inf), 100)


def test_h6_pass_and_fail():
    ok = _problem(polynomial(0, 0, 1), constant(2), phi=quadratic(c=0.5))
    rep = check_hypotheses(ok, (-2, 2), 301)
    assert rep.checks["H6"].status == "pass"
    bad = _problem(constant(0), trig_affine(a=2, b=1))
    rep2 = check_hypotheses(bad, (-2, 2), 301)
    assert rep2.checks["H6"].status == "fail"  # sigma' = -sin changes sign


def test_h5_cross_driver():
    drv = Driver(cross_x=quadratic(c=1), cross_y=quadratic(c=1))  # x^2 y^2
    prob = _problem(constant(0), constant(1), driver=drv)
    rep = check_hypotheses(prob, (0.5, 2.0), 101)
    assert rep.checks["H5"].status == "pass"
    rep2 = check_hypotheses(prob, (-2.0, 2.0), 101)
    assert rep2.checks["H5"].status == "fail"  # f_xy = 4xy < 0 in two quadrants
    assert rep2.checks["H5"].witness is not None


def test_sign_normalization():
    prob = _problem(trig_affine(c=1), trig_affine(a=-2, b=-1))  # sigma < 0 everywhere
    rep = check_hypotheses(prob, (-4, 4), 501)
    assert rep.sign_normalized
    assert rep.checks["H3"].status == "pass"


def test_h1_h4_terminal_reductions():
    steep = _problem(constant(0), constant(1), phi=quadratic(a=0, b=2, c=0.5))
    rep = check_hypotheses(steep, (-1, 1), 201)
    assert rep.checks["H1"].status == "pass"   # phi' = 2 + x > 0 on box
    assert rep.checks["H4"].status == "pass"   # phi'' = 1 > 0
    flat = _problem(constant(0), constant(1))  # phi = x, phi'' = 0
    rep2 = check_hypotheses(flat, (-1, 1), 201)
    assert rep2.checks["H1"].status == "pass"
    assert rep2.checks["H4"].status == "fail"


def test_h8_univariate_only():
    uni = _problem(constant(0), constant(1),
                   driver=Driver(f_of_y=quadratic(a=0, b=1, c=0.5)))
    rep = check_hypotheses(uni, (0.1, 3), 201)
    assert rep.checks["H8"].status == "pass"
    sig = _problem(constant(0), constant(1),
                   driver=Driver(f_of_y=scaled_sigmoid(a=1, k=1)))
    rep_sig = check_hypotheses(sig, (0.1, 3), 201)
    assert rep_sig.checks["H8"].status == "fail"  # f'' < 0 for y > 0
    mixed = _problem(constant(0), constant(1),
                     driver=Driver(f_of_x=affine(b=1), f_of_y=affine(b=1)))
    rep2 = check_hypotheses(mixed, (0.1, 3), 201)
    assert rep2.checks["H8"].status == "not-applicable"


def test_report_caveats_present():
    rep = check_hypotheses(_problem(constant(0), constant(1)), (-1, 1), 11)
    assert any("compact box" in c for c in rep.caveats)
