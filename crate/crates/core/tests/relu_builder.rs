use icreg_core::dd::DoubleDouble;
use icreg_core::linalg::Matrix;
use icreg_core::relu::*;
use icreg_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line reference: one flat loop over layers, no shared code with the library.
fn interpret(net: &NetSpec, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for (i, layer) in net.layers.iter().enumerate() {
        let w = layer.weight.as_slice();
        let cols = layer.weight.cols();
        let mut out = vec![0.0; layer.bias.len()];
        for r in 0..out.len() {
            let mut acc = 0.0;
            for c in 0..cols {
                let wv = w[r * cols + c];
                if wv != 0.0 {
                    acc += wv * cur[c];
                }
            }
            acc += layer.bias[r];
            out[r] = if i + 1 < net.layers.len() && acc < 0.0 { 0.0 } else { acc };
        }
        cur = out;
    }
    cur
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Weights on the grid `ℤ/8 ∩ [−1, 1]` so fused and sequential evaluation are both exact.
fn random_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> NetSpec {
    let mut dyadic = || rng.random_range(-8..=8) as f64 / 8.0;
    let layers: Vec<Affine> = dims
        .windows(2)
        .map(|w| {
            let data = (0..w[0] * w[1]).map(|_| dyadic()).collect();
            let bias = (0..w[1]).map(|_| dyadic()).collect();
            Affine::new(Matrix::from_vec(w[1], w[0], data), bias)
        })
        .collect();
    NetSpec::new(layers, 1.0, 0.0, vec![(-1.0, 1.0); dims[0]]).unwrap()
}

#[test]
fn product_net_unit_box_error() {
    let net = build_product_net(1.0, 2, 6).unwrap();
    assert_eq!(net.cert_error, 0.375);
    let g = grid(-1.0, 1.0, 101);
    let mut worst: f64 = 0.0;
    for x in &g {
        for y in &g {
            worst = worst.max((net.eval(&[*x, *y])[0] - x * y).abs());
        }
    }
    assert!(worst <= 0.375, "{worst}");
    assert!(net.eval(&[0.0, 0.0])[0].abs() <= net.cert_error);
}

#[test]
fn product_net_shape_matches_lemma() {
    for (c, n, l) in [(1.0, 1, 1), (2.0, 3, 4), (5.0, 2, 2)] {
        let net = build_product_net(c, n, l).unwrap();
        assert_eq!(net.depth(), l);
        assert_eq!(net.width(), 9 * n + 1);
        assert_eq!(net.param_bound, 32.0 * c * c * n as f64);
        assert!(net.max_abs_param() <= net.param_bound);
        assert_eq!(net.cert_error, 24.0 * c * c * (n as f64).powi(-(l as i32)));
    }
}

#[test]
fn product_net_scales_with_domain() {
    let c = 4.0;
    let unit = build_product_net(1.0, 2, 3).unwrap();
    let big = build_product_net(c, 2, 3).unwrap();
    for x in grid(-c, c, 41) {
        for y in grid(-c, c, 41) {
            let scaled = c * c * unit.eval(&[x / c, y / c])[0];
            assert!((big.eval(&[x, y])[0] - scaled).abs() <= 1e-12 * c * c);
        }
    }
}

#[test]
fn product_net_error_bound_across_sizes() {
    for (c, n, l) in [(1.0, 1, 1), (1.0, 1, 3), (3.0, 2, 2), (2.0, 5, 2)] {
        let net = build_product_net(c, n, l).unwrap();
        let g = grid(-c, c, 81);
        for x in &g {
            for y in &g {
                assert!((net.eval(&[*x, *y])[0] - x * y).abs() <= net.cert_error);
            }
        }
    }
}

#[test]
fn multiprod_pair_is_a_product_net() {
    let (c, n, l) = (1.5, 1, 1);
    let net = build_multiprod_net(c, 2, n, l).unwrap();
    assert_eq!(net.depth(), 7 * 2 * l);
    assert_eq!(net.cert_error, 30.0 * c * c * 2f64.powi(-14));
    assert_eq!(net.width(), 9 * (n + 1) + 3);
    for x in grid(-c, c, 31) {
        for y in grid(-c, c, 31) {
            assert!((net.eval(&[x, y])[0] - x * y).abs() <= net.cert_error);
        }
    }
}

#[test]
fn multiprod_triple_grid() {
    let net = build_multiprod_net(1.0, 3, 1, 1).unwrap();
    let bound = 30.0 * 2.0 * 2f64.powi(-21);
    assert_eq!(net.cert_error, bound);
    assert!((net.eval(&[1.0, 1.0, 1.0])[0] - 1.0).abs() <= bound);
    let g = grid(-1.0, 1.0, 21);
    let mut worst: f64 = 0.0;
    for a in &g {
        for b in &g {
            for c in &g {
                worst = worst.max((net.eval(&[*a, *b, *c])[0] - a * b * c).abs());
            }
        }
    }
    assert!(worst <= bound, "{worst}");
}

#[test]
fn monomial_structure() {
    for nu in [vec![0, 0], vec![1, 0], vec![1, 1], vec![2, 1], vec![0, 3]] {
        let (k, c, n, l) = (3, 2.0, 2, 1);
        let net = build_monomial_net(&nu, k, c, n, l).unwrap();
        assert_eq!(net.depth(), 7 * k * l * (k - 1) + 1);
        assert_eq!(net.width(), 9 * (n + 1) + 2 * k - 1);
        let declared = 3.0 * (k as f64 + 1.0) * c.powi(k as i32) * (40.0 * (n as f64 + 1.0)).powi(2);
        assert_eq!(net.param_bound, declared);
        assert!(net.max_abs_param() <= declared);
    }
}

#[test]
fn monomial_low_degrees_are_exact() {
    let constant = build_monomial_net(&[0, 0], 2, 1.0, 1, 1).unwrap();
    let coord = build_monomial_net(&[0, 1], 2, 1.0, 1, 1).unwrap();
    assert_eq!(constant.cert_error, 0.0);
    for x in grid(-1.0, 1.0, 11) {
        for y in grid(-1.0, 1.0, 11) {
            assert_eq!(constant.eval(&[x, y])[0], 1.0);
            assert_eq!(coord.eval(&[x, y])[0], y);
        }
    }
}

#[test]
fn monomial_cross_term_grid() {
    let net = build_monomial_net(&[1, 1], 2, 1.0, 1, 1).unwrap();
    for x in grid(-1.0, 1.0, 51) {
        for y in grid(-1.0, 1.0, 51) {
            assert!((net.eval(&[x, y])[0] - x * y).abs() <= net.cert_error);
        }
    }
}

#[test]
fn monomial_rejects_degree_over_cap() {
    assert!(matches!(build_monomial_net(&[2, 2], 3, 1.0, 1, 1), Err(Error::DegreeExceedsCap { degree: 4, cap: 3 })));
}

#[test]
fn double_double_evaluation_resolves_tiny_certificates() {
    let net = build_monomial_net(&[2], 2, 2.0, 2, 3).unwrap();
    assert!(net.cert_error < 1e-15);
    for x in grid(-2.0, 2.0, 51) {
        let xd = DoubleDouble::new(x);
        let out = net.eval_in(&[xd])[0];
        let err = (out - xd * xd).abs().to_f64();
        assert!(err <= net.cert_error, "{x}: {err} > {}", net.cert_error);
    }
}

#[test]
fn compose_with_identity_affine_is_noop() {
    let f = build_product_net(1.0, 1, 2).unwrap();
    let id = NetSpec::new(vec![Affine::new(Matrix::identity(1), vec![0.0])], 1.0, 0.0, vec![(-2.0, 2.0)]).unwrap();
    let g = compose_nets(&f, &id).unwrap();
    assert_eq!(g.depth(), f.depth());
    for x in grid(-1.0, 1.0, 21) {
        for y in grid(-1.0, 1.0, 21) {
            assert_eq!(g.eval(&[x, y]), f.eval(&[x, y]));
        }
    }
}

#[test]
fn compose_matches_sequential_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f1 = random_net(&mut rng, &[3, 5, 4]);
    let f2 = random_net(&mut rng, &[4, 6, 2]);
    let g = compose_nets(&f1, &f2).unwrap();
    assert_eq!(g.depth(), 2);
    assert!(g.param_bound >= f1.param_bound.max(f2.param_bound));
    assert!(g.max_abs_param() <= g.param_bound);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-8..=8) as f64 / 8.0).collect();
        assert_eq!(f2.eval(&f1.eval(&x)), g.eval(&x));
    }
    assert!(matches!(compose_nets(&f2, &f1), Err(Error::Shape(_))));
}

#[test]
fn absorb_zero_map_cancels_input() {
    let z = Matrix::zeros(4, 4);
    let rw = absorb_residual(&z, &z, &[0.0; 4], &[0.0; 4], 1.0).unwrap();
    assert_eq!(rw.w1.shape(), (12, 4));
    assert_eq!(rw.w2.shape(), (4, 12));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        assert!(rw.apply(&x).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn absorb_random_map_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (w1, w2) = (Matrix::from_vec(3, 3, draw(9)), Matrix::from_vec(3, 3, draw(9)));
    let (b1, b2) = (draw(3), draw(3));
    let rw = absorb_residual(&w1, &w2, &b1, &b2, 1.0).unwrap();
    assert_eq!(rw.w1.rows(), 9);
    for _ in 0..1000 {
        let x = draw(3);
        let hidden: Vec<f64> = w1.mat_vec(&x).iter().zip(&b1).map(|(h, b)| (h + b).max(0.0)).collect();
        let target: Vec<f64> = w2.mat_vec(&hidden).iter().zip(&b2).map(|(o, b)| o + b).collect();
        for (a, b) in rw.apply(&x).iter().zip(&target) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn absorb_rejects_small_bound() {
    let z = Matrix::zeros(2, 2);
    assert!(matches!(absorb_residual(&z, &z, &[0.0; 2], &[0.0; 2], 0.5), Err(Error::BoundTooSmall(_))));
}

#[test]
fn interpreter_agrees_bitwise() {
    let nets = [
        build_product_net(1.0, 2, 3).unwrap(),
        build_multiprod_net(1.0, 3, 1, 1).unwrap(),
        build_monomial_net(&[1, 2], 3, 2.0, 1, 1).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for net in &nets {
        for _ in 0..200 {
            let x: Vec<f64> = net.input_box.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect();
            assert_eq!(net.eval(&x), interpret(net, &x));
        }
    }
}

#[test]
fn trimmed_monomials_keep_values() {
    let net = build_monomial_net(&[1, 2], 3, 2.0, 1, 1).unwrap();
    let t = net.trimmed();
    assert!(t.width() <= net.width());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        assert_eq!(net.eval(&x), t.eval(&x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn composition_is_associative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f1 = random_net(&mut rng, &[2, 3, 3]);
        let f2 = random_net(&mut rng, &[3, 4, 2]);
        let f3 = random_net(&mut rng, &[2, 2, 1]);
        let left = compose_nets(&compose_nets(&f1, &f2).unwrap(), &f3).unwrap();
        let right = compose_nets(&f1, &compose_nets(&f2, &f3).unwrap()).unwrap();
        for _ in 0..20 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            prop_assert!((left.eval(&x)[0] - right.eval(&x)[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn product_net_certificate_holds(c in 1.0f64..6.0, n in 1usize..5, l in 1usize..4, x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let net = build_product_net(c, n, l).unwrap();
        prop_assert!((net.eval(&[c * x, c * y])[0] - c * c * x * y).abs() <= net.cert_error);
    }
}
