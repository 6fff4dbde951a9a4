//! Integrators driven by the closed-form Gaussian velocity field.

use dod_core::flow::GaussianSpec;
use dod_core::numerics::Tensor;
use dod_core::sampler::{adaptive_integrate, integrate_fixed, stage_noise, uniform_grid};

const SAMPLES: usize = 4096;

fn moments(x: &Tensor<f64>) -> (f64, f64) {
    let n = x.numel() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn target() -> GaussianSpec {
    GaussianSpec::scalar(2.0, 0.5)
}

#[test]
fn euler_512_transports_noise_to_target() {
    let spec = target();
    let z1 = stage_noise::<f64>(1, 1, &[SAMPLES]);
    let z0 = integrate_fixed(&z1, &uniform_grid(512), false, |x, t| Ok(spec.field(x, t))).unwrap();
    let (m, s) = moments(&z0);
    assert!((m - 2.0).abs() <= 0.05 && (s - 0.5).abs() <= 0.05, "mean {m} std {s}");
}

#[test]
fn standard_normal_self_transport_is_identity_in_law() {
    let spec = GaussianSpec::scalar(0.0, 1.0);
    let z1 = stage_noise::<f64>(2, 1, &[SAMPLES]);
    let z0 = integrate_fixed(&z1, &uniform_grid(512), false, |x, t| Ok(spec.field(x, t))).unwrap();
    let (m, s) = moments(&z0);
    // three Monte-Carlo standard errors at n = 4096
    assert!(m.abs() <= 3.0 / 64.0 && (s - 1.0).abs() <= 3.0 / 8192f64.sqrt(), "mean {m} std {s}");
}

/// Terminal moment error against the exact map `mu + sigma * x1` on the same noise.
fn moment_error(z1: &Tensor<f64>, steps: usize, heun: bool) -> f64 {
    let spec = target();
    let z0 = integrate_fixed(z1, &uniform_grid(steps), heun, |x, t| Ok(spec.field(x, t))).unwrap();
    let exact = z1.map(|x| 2.0 + 0.5 * x);
    let ((m, s), (me, se)) = (moments(&z0), moments(&exact));
    (m - me).abs() + (s - se).abs()
}

fn ratios(heun: bool) -> Vec<f64> {
    let z1 = stage_noise::<f64>(3, 1, &[SAMPLES]);
    let errs: Vec<f64> = [16, 32, 64, 128].iter().map(|&n| moment_error(&z1, n, heun)).collect();
    errs.windows(2).map(|w| w[0] / w[1]).collect()
}

#[test]
fn euler_is_first_order() {
    let r = ratios(false);
    assert!(r.iter().all(|&x| (1.7..=2.3).contains(&x)), "{r:?}");
}

#[test]
fn heun_is_second_order() {
    let r = ratios(true);
    assert!(r.iter().all(|&x| (3.4..=4.6).contains(&x)), "{r:?}");
}

#[test]
fn heun_and_euler_agree_as_steps_shrink() {
    let spec = target();
    let z1 = stage_noise::<f64>(4, 1, &[256]);
    let f = |x: &Tensor<f64>, t: f64| Ok(spec.field(x, t));
    let gap = |n| {
        let a = integrate_fixed(&z1, &uniform_grid(n), false, f).unwrap();
        let b = integrate_fixed(&z1, &uniform_grid(n), true, f).unwrap();
        a.max_abs_diff(&b)
    };
    let (g1, g2) = (gap(64), gap(256));
    assert!(g2 < g1 / 3.0, "{g1} {g2}");
}

#[test]
fn adaptive_oracle_transport_and_tolerance_sweep() {
    let spec = target();
    let z1 = stage_noise::<f64>(5, 1, &[SAMPLES]);
    let f = |x: &Tensor<f64>, t: f64| Ok(spec.field(x, t));
    let (loose, st_loose) = adaptive_integrate(&z1, f, 1e-3, 1e-4).unwrap();
    let (tight, st_tight) = adaptive_integrate(&z1, f, 1e-5, 1e-6).unwrap();
    let (m, s) = moments(&loose);
    // Monte-Carlo standard errors of the mean and std at n = 4096
    let (se_m, se_s) = (0.5 / 64.0, 0.5 / (2.0f64 * 4096.0).sqrt());
    assert!((m - 2.0).abs() <= 4.0 * se_m && (s - 0.5).abs() <= 4.0 * se_s, "mean {m} std {s}");
    let (mt, stt) = moments(&tight);
    assert!((m - mt).abs() <= se_m && (s - stt).abs() <= se_s);
    assert!(st_tight.accepted > st_loose.accepted);
}
