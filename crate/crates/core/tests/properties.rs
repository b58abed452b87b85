use dnpgam::basis::AdditiveDesign;
use dnpgam::dnp::{confidence_bands, dnp_maximize, DnpOptions};
use dnpgam::gam::{pirls_fit, plugin_lambda, LambdaGrid, PirlsOptions, VarianceFamily, VarianceKind};
use dnpgam::harness::{run_coverage, CoverageOptions, Method};
use dnpgam::link::Link;
use dnpgam::simulation::{generate_replication, SimDataset, SimSetting};
use nalgebra::{DMatrix, DVector};

fn design(data: &SimDataset) -> AdditiveDesign {
    AdditiveDesign::build_with_quantile_knots(&data.x, 3, 10, &[1.0; 4]).unwrap()
}

fn setting3(n: usize, seed: u64) -> (SimDataset, AdditiveDesign, Vec<f64>) {
    let s = SimSetting::new(3, n, seed).unwrap();
    let data = generate_replication(&s, 0).unwrap();
    let d = design(&data);
    let plug = plugin_lambda(&d, &data.y, None, s.response_type(), &LambdaGrid::default()).unwrap();
    (data, d, plug.dnp_lambda())
}

/// Log-partition by bisection on the mean equation, independent of the library solver.
fn tilt_by_bisection(y: &[f64], p: &[f64], mu: f64) -> (f64, f64) {
    let eval = |t: f64| {
        let m = y.iter().map(|v| t * v).fold(f64::NEG_INFINITY, f64::max);
        let (mut s0, mut s1) = (0.0, 0.0);
        for (v, pi) in y.iter().zip(p) {
            let w = pi * (t * v - m).exp();
            s0 += w;
            s1 += w * v;
        }
        (s1 / s0, m + s0.ln())
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while eval(lo).0 > mu {
        lo *= 2.0;
    }
    while eval(hi).0 < mu {
        hi *= 2.0;
    }
    while hi - lo > 1e-15 * (1.0 + lo.abs()) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eval(mid).0 < mu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    (t, eval(t).1)
}

#[test]
fn loglik_recomputed_from_scratch() {
    let (data, d, lambda) = setting3(200, 21);
    let fit = dnp_maximize(&d, &data.y, Link::Log, &lambda, &DnpOptions::default()).unwrap();
    assert!(fit.converged);
    let y = &data.y;
    let p = fit.f_hat.masses();
    let eta = &d.matrix * &fit.beta_hat;
    let n = y.len() as f64;
    let mut sum = 0.0;
    for i in 0..y.len() {
        let (t, b) = tilt_by_bisection(y, p, eta[i].exp());
        sum += p[i].ln() + t * y[i] - b;
    }
    let pen = d.penalty_for(&lambda).unwrap();
    let value = sum / n - 0.5 * fit.beta_hat.dot(&(pen * &fit.beta_hat));
    assert!((value - fit.penalized_loglik).abs() < 1e-10, "{value} vs {}", fit.penalized_loglik);
}

#[test]
fn ascent_is_monotone() {
    let (data, d, lambda) = setting3(120, 5);
    let mut last = f64::NEG_INFINITY;
    // the iteration is deterministic, so capping the sweeps replays a prefix of one path
    for sweeps in 1..=12 {
        let opts = DnpOptions {
            max_outer: sweeps,
            compute_covariance: false,
            ..DnpOptions::default()
        };
        let fit = dnp_maximize(&d, &data.y, Link::Log, &lambda, &opts).unwrap();
        assert!(fit.penalized_loglik >= last - 1e-12, "sweep {sweeps}: {} < {last}", fit.penalized_loglik);
        last = fit.penalized_loglik;
        if fit.converged {
            break;
        }
    }
}

#[test]
fn permutation_invariance() {
    let (data, d, lambda) = setting3(100, 8);
    let n = data.y.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
    let x = DMatrix::from_fn(n, 4, |i, j| data.x[(perm[i], j)]);
    let y: Vec<f64> = perm.iter().map(|&i| data.y[i]).collect();
    let dp = AdditiveDesign::build_with_quantile_knots(&x, 3, 10, &[1.0; 4]).unwrap();
    // f3 is nearly unpenalized here, so β̂ is only pinned to 1e-8 by a much tighter KKT bound
    let opts = DnpOptions {
        tol: 1e-12,
        tilt_tol: 1e-14,
        ..DnpOptions::default()
    };
    let a = dnp_maximize(&d, &data.y, Link::Log, &lambda, &opts).unwrap();
    let b = dnp_maximize(&dp, &y, Link::Log, &lambda, &opts).unwrap();
    assert!(a.converged && b.converged);
    let diff = (&a.beta_hat - &b.beta_hat).amax();
    assert!(diff < 1e-8, "beta differs by {diff}");
    for (i, &src) in perm.iter().enumerate() {
        assert!((b.f_hat.masses()[i] - a.f_hat.masses()[src]).abs() < 1e-8);
    }
}

#[test]
fn gam_setting3_score_tolerance() {
    let s = SimSetting::new(3, 200, 3).unwrap();
    let data = generate_replication(&s, 0).unwrap();
    let d = design(&data);
    let fam = VarianceFamily::default_for(VarianceKind::Mu, s.response_type());
    let fit = pirls_fit(&d, &data.y, None, Link::Log, fam, &[0.5; 4], &PirlsOptions::default()).unwrap();
    let mut score = -(d.penalty_for(&[0.5; 4]).unwrap() * &fit.beta_hat);
    for i in 0..data.y.len() {
        let mu = (d.matrix.row(i) * &fit.beta_hat)[0].exp();
        score += d.matrix.row(i).transpose() * (data.y[i] - mu);
    }
    assert!(score.amax() < 1e-8, "{}", score.amax());
}

#[test]
fn band_half_width_definition() {
    let (data, d, lambda) = setting3(120, 3);
    let fit = dnp_maximize(&d, &data.y, Link::Log, &lambda, &DnpOptions::default()).unwrap();
    assert!(fit.converged);
    let grids: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0, 0.13, 0.5, 0.91, 1.0]).collect();
    let bands = confidence_bands(&d, &fit.beta_hat, &fit.cov_beta, Link::Log, &grids, &d.matrix, 0.95).unwrap();
    for (j, rows) in bands.smooths.iter().enumerate() {
        let r = d.block_range(j);
        for row in rows {
            let mut b = DVector::zeros(d.ncols());
            b.rows_mut(r.start, r.len()).copy_from(&DVector::from_vec(d.blocks[j].row(row.x)));
            let half = 1.959963984540054 * b.dot(&(&fit.cov_beta * &b)).sqrt();
            assert!(((row.hi - row.lo) / 2.0 - half).abs() < 1e-12 * (1.0 + half));
        }
    }
    for row in &bands.mean {
        let b = d.matrix.row(row.index).transpose();
        let half = 1.959963984540054 * b.dot(&(&fit.cov_beta * &b)).sqrt();
        assert!(((row.hi.ln() - row.lo.ln()) / 2.0 - half).abs() < 1e-10);
    }
}

#[test]
fn replication_accounting() {
    let s = SimSetting::new(2, 80, 4).unwrap();
    let methods = Method::parse_list("all", &s).unwrap();
    let reports = run_coverage(&s, &methods, 3, &CoverageOptions::default()).unwrap();
    for r in &reports {
        assert_eq!(r.successes + r.failures, 3);
    }
}

#[test]
fn correctly_specified_gam_mean_coverage() {
    let s = SimSetting::new(3, 500, 77).unwrap();
    let reports = run_coverage(&s, &[Method::Gam(VarianceKind::Mu)], 200, &CoverageOptions::default()).unwrap();
    let mu = reports[0].coverage[4].unwrap();
    assert!((86.0..=96.0).contains(&mu), "{mu}");
}
