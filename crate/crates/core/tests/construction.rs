use icreg_core::construction::*;
use icreg_core::datagen::{sample_sequence, CovariateSpec, DataSpec, HolderSpec, NoiseSpec, Prompt};
use icreg_core::linalg::{self, Matrix};
use icreg_core::locpol::{self, BasisSpec, KernelSpec};
use icreg_core::transformer::{block_forward, embed, read, ForwardPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data_spec(d: usize, alpha: f64) -> DataSpec {
    DataSpec::new(HolderSpec::new(d, alpha, 1.0).unwrap(), CovariateSpec::uniform(d), NoiseSpec::default(), 8).unwrap()
}

fn manual_config(n: usize, d: usize, alpha: f64, h: f64) -> ConstructionConfig {
    let degree = locpol::default_degree(alpha);
    ConstructionConfig {
        n,
        dim: d,
        smoothness: alpha,
        clamp: 1.0,
        degree,
        basis_size: locpol::binomial(d + degree, degree),
        bandwidth: h,
        depth_multiplier: 1,
        steps: 1,
        step_size: 0.5,
        c_lo: 1.0,
        c_hi: 1.0,
    }
}

fn run_blocks(blocks: &[icreg_core::transformer::BlockParams], mut z: Matrix) -> Matrix {
    for b in blocks {
        z = block_forward(b, &z).unwrap();
    }
    z
}

#[test]
fn preprocessing_hand_example() {
    let cfg = manual_config(2, 1, 1.0, 0.5);
    let layout = RegisterLayout::new(1, cfg.basis_size, 0);
    let blocks = build_preprocess_blocks(&cfg, &layout, 4).unwrap();
    let prompt = Prompt {
        xs: vec![vec![0.2], vec![0.9]],
        ys: vec![1.0, -1.0],
        query: vec![0.3],
        query_response: 0.0,
        truth_at_query: None,
    };
    let z = run_blocks(&blocks, embed(&prompt, layout.embed_dim()).unwrap());
    assert!((z[(0, layout.centered(0))] + 0.2).abs() < 1e-12);
    assert!((z[(1, layout.centered(0))] - 1.2).abs() < 1e-12);
    assert!((z[(0, layout.sqrt_kernel())] - 0.8).abs() < 1e-12);
    assert_eq!(z[(1, layout.sqrt_kernel())], 0.0);
    assert!((z[(2, layout.sqrt_kernel())] - cfg.kernel_scale()).abs() < 1e-12);
    assert!(z[(2, layout.centered(0))].abs() < 1e-12);
    for i in 0..3 {
        assert_eq!(z[(i, layout.ones())], 1.0);
    }
}

#[test]
fn preprocessing_matches_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (n, d) in [(8, 1), (64, 2), (33, 2)] {
        let h = locpol::default_bandwidth(n, d, 1.5);
        let cfg = manual_config(n, d, 1.5, h);
        let layout = RegisterLayout::new(d, cfg.basis_size, 0);
        let blocks = build_preprocess_blocks(&cfg, &layout, 2 * d + 2).unwrap();
        let bound = 1f64.max(d as f64 / h).max(cfg.kernel_scale());
        assert!(blocks.iter().all(|b| b.max_abs() <= bound));
        let spec = data_spec(d, 1.5);
        let (_, prompt) = spec.draw(n, &mut rng).unwrap();
        let z = run_blocks(&blocks, embed(&prompt, layout.embed_dim()).unwrap());
        for i in 0..n {
            let diff: Vec<f64> = (0..d).map(|j| prompt.xs[i][j] - prompt.query[j]).collect();
            for j in 0..d {
                assert!((z[(i, layout.centered(j))] - diff[j] / h).abs() <= 1e-12);
                assert_eq!(z[(i, layout.x_raw(j))], prompt.xs[i][j]);
            }
            let expect = (locpol::kernel_eval(&diff, h) / n as f64).sqrt();
            assert!((z[(i, layout.sqrt_kernel())] - expect).abs() <= 1e-12);
            assert_eq!(z[(i, layout.y())], prompt.ys[i]);
            assert_eq!(z[(i, layout.query_flag())], 0.0);
        }
        assert!((z[(n, layout.sqrt_kernel())] - cfg.kernel_scale()).abs() <= 1e-12);
        assert_eq!(z[(n, layout.query_flag())], 1.0);
    }
}

#[test]
fn gd_block_hand_case() {
    let cfg = ConstructionConfig { step_size: 0.25, ..manual_config(2, 1, 1.0, 0.5) };
    let layout = RegisterLayout::new(1, 2, 0);
    let block = build_gd_block(&cfg, &layout, 1);
    assert!(block.max_abs() <= (2.0 * cfg.step_size).max(1.0));
    let r = 0.5f64.sqrt();
    let mut z = Matrix::zeros(3, layout.embed_dim());
    z[(0, layout.basis(0))] = r;
    z[(1, layout.basis(1))] = r;
    z[(0, layout.response())] = r;
    z[(1, layout.response())] = r;
    for i in 0..3 {
        z[(i, layout.ones())] = 1.0;
    }
    z[(2, layout.query_flag())] = 1.0;
    let out = block_forward(&block, &z).unwrap();
    for i in 0..3 {
        let w = layout.read_weights(&out, i);
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
    }
}

#[test]
fn gd_block_fixed_point_at_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layout = RegisterLayout::new(1, 3, 0);
    let cfg = ConstructionConfig { step_size: 0.1, ..manual_config(6, 1, 2.0, 0.5) };
    let block = build_gd_block(&cfg, &layout, 1);
    let rows = 7;
    let mut x = Matrix::zeros(rows, 3);
    let mut y = vec![0.0; rows];
    for i in 0..rows {
        for j in 0..3 {
            x[(i, j)] = rng.random_range(-1.0..1.0);
        }
        y[i] = rng.random_range(-1.0..1.0);
    }
    let w_star = linalg::solve_spd(&x.gram(), &x.tr_mat_vec(&y)).unwrap();
    let mut z = Matrix::zeros(rows, layout.embed_dim());
    for i in 0..rows {
        for j in 0..3 {
            z[(i, layout.basis(j))] = x[(i, j)];
            z[(i, layout.weight(j))] = w_star[j];
        }
        z[(i, layout.response())] = y[i];
        z[(i, layout.ones())] = 1.0;
    }
    let out = block_forward(&block, &z).unwrap();
    for i in 0..rows {
        assert!(linalg::dist2(&layout.read_weights(&out, i), &w_star) < 1e-12);
    }

    // From a generic point the update is exactly one gradient step.
    let w0 = [0.3, -0.2, 0.5];
    for i in 0..rows {
        for j in 0..3 {
            z[(i, layout.weight(j))] = w0[j];
        }
    }
    let out = block_forward(&block, &z).unwrap();
    let g = least_squares_gradient(&x, &y, &w0);
    for j in 0..3 {
        assert!((out[(0, layout.weight(j))] - (w0[j] - 0.1 * g[j])).abs() < 1e-13);
    }
}

#[test]
fn reference_gd_examples() {
    // ‖w − 1‖² through X = I, Y = 1, with C₁ = C₂ = 2.
    let x = Matrix::identity(4);
    let trace = exact_gd_reference(&x, &[1.0; 4], 1, 0.5);
    assert_eq!(trace.iterates[0], vec![0.0; 4]);
    assert_eq!(trace.iterates[1], vec![1.0; 4]);

    let zero = exact_gd_reference(&Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]), &[0.0, 0.0], 25, 0.1);
    assert!(zero.iterates.iter().all(|w| w.iter().all(|v| *v == 0.0)));
    assert_eq!(zero.iterates.len(), 26);
}

#[test]
fn reference_gd_meets_contraction_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let m = rng.random_range(2..6);
        let rows = m + 4;
        let mut x = Matrix::zeros(rows, m);
        for v in x.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        for j in 0..m {
            x[(j, j)] += 3.0;
        }
        let y: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ev = linalg::sym_eigenvalues(&x.gram());
        let (c1, c2) = (2.0 * ev[0], 2.0 * ev[m - 1]);
        let w_star = linalg::solve_spd(&x.gram(), &x.tr_mat_vec(&y)).unwrap();
        let steps = 40;
        let trace = exact_gd_reference(&x, &y, steps, 1.0 / c2);
        let err = linalg::dist2(trace.last(), &w_star);
        assert!(err <= gd_error_bound(c1, c2, steps, 0.0, linalg::norm2(&w_star)) + 1e-12);
    }
}

#[test]
fn construction_pipeline_small() {
    let (n, d, alpha) = (64, 1, 1.0);
    let spec = data_spec(d, alpha);
    let cfg = ConstructionConfig::calibrated(&spec, n, 1.0, 7).unwrap();
    assert_eq!(cfg.step_size, 1.0 / (2.0 * cfg.c_hi));
    assert!(cfg.basis_error() <= (n as f64).powi(-3));
    let model = build_locpol_transformer(&cfg).unwrap();
    let r = &model.report;
    assert_eq!(r.basis_blocks, cfg.basis_depth());
    assert_eq!(r.block_count, 3 + r.basis_blocks + cfg.steps + 1);
    assert_eq!(r.embed_dim, 2 * d + 2 * cfg.basis_size + 5 + r.scratch_width);
    assert!(model.params.max_abs_param() <= cfg.param_bound());

    let plan = ForwardPlan::new(&model.params);
    let basis = BasisSpec::new(d, cfg.degree);
    let kernel = KernelSpec::new(cfg.bandwidth).unwrap();
    let xi = cfg.basis_error();
    for seed in 0..20u64 {
        let prompt = sample_sequence(&spec, n, 99, seed).unwrap().prompt;
        let mut z = embed(&prompt, model.layout.embed_dim()).unwrap();
        plan.forward_blocks(&mut z, model.preprocess_range()).unwrap();
        plan.forward_blocks(&mut z, model.basis_range()).unwrap();
        let (xc, yc) = model.layout.read_system(&z);
        let (xt, yt) = locpol::build_weighted_system(&prompt, &kernel, &basis);
        for i in 0..n {
            for j in 0..cfg.basis_size {
                assert!((xc[(i, j)] - xt[(i, j)]).abs() <= xi);
            }
            assert!((yc[i] - yt[i]).abs() <= xi);
            assert_eq!(xc[(i, 0)], z[(i, model.layout.sqrt_kernel())]);
        }
        for j in 0..cfg.basis_size {
            assert!(xc[(n, j)].abs() <= xi);
        }
        assert!(yc[n].abs() <= xi);
        for j in 0..model.layout.scratch {
            assert!((0..=n).all(|i| z[(i, model.layout.scratch(j))] == 0.0));
        }

        let trace = exact_gd_reference(&xc, &yc, cfg.steps, cfg.step_size);
        let w_exact = linalg::solve_spd(&xt.gram(), &xt.tr_mat_vec(&yt)).unwrap();
        let radius = trace.iterates.iter().map(|w| linalg::norm2(w)).fold(linalg::norm2(&w_exact), f64::max);
        for (t, block) in model.gd_range().enumerate() {
            plan.forward_blocks(&mut z, block..block + 1).unwrap();
            for i in [0, n / 2, n] {
                let w = model.layout.read_weights(&z, i);
                assert!(linalg::dist2(&w, &trace.iterates[t + 1]) <= 1e-10);
            }
            let exact_grad = least_squares_gradient(&xt, &yt, &trace.iterates[t]);
            let used = least_squares_gradient(&xc, &yc, &trace.iterates[t]);
            assert!(linalg::dist2(&used, &exact_grad) <= cfg.gradient_error_bound(radius));
        }
        let before = z.clone();
        let last = model.transfer_index();
        plan.forward_blocks(&mut z, last..last + 1).unwrap();
        for i in 0..=n {
            for c in 0..z.cols() {
                if c != d {
                    assert_eq!(z[(i, c)], before[(i, c)]);
                }
            }
        }
        let w_last = trace.last()[0];
        assert!((read(&z, cfg.clamp, d) - w_last.clamp(-cfg.clamp, cfg.clamp)).abs() <= 1e-10);
    }
}

#[test]
fn constant_task_is_reproduced() {
    let (n, d, alpha) = (64, 1, 1.0);
    let spec = data_spec(d, alpha);
    let cfg = ConstructionConfig::calibrated(&spec, n, 1.0, 3).unwrap();
    let model = build_locpol_transformer(&cfg).unwrap();
    let plan = ForwardPlan::new(&model.params);
    let est = locpol::LocPolEstimator::paper_default(n, d, alpha, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let mut prompt = spec.draw(n, &mut rng).unwrap().1;
        prompt.query = vec![rng.random_range(0.2..0.8)];
        prompt.ys.iter_mut().for_each(|y| *y = 0.4);
        let fit = est.fit(&prompt).unwrap();
        assert!((fit.estimate - 0.4).abs() < 1e-10);
        let tf = plan.predict(&prompt).unwrap();
        assert!((tf - 0.4).abs() < 1e-4, "{tf}");
    }
}
