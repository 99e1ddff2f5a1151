use nalgebra::dvector;
use quadstab_core::dataset::{make_fixed_radius_bounds, simulate, chi2_radius, InputPolicy, NoiseSampler, Plant};
use quadstab_core::synthesis::{build_alternatives_program, extract_certificate, Scheme, SynthesisConfig};

#[test]
fn time_example_scale_solve() {
    let plant = Plant::example_2x2();
    let delta = 0.95f64.powf(1.0 / 27.0);
    let r = chi2_radius(delta, 2).unwrap();
    let (rx, ru) = (0.04 * r, 0.03 * r);
    let data = simulate(
        &plant, 14, &dvector![1.0, 1.0],
        &InputPolicy::Gaussian { amplitude: 1.0 },
        &NoiseSampler::Gaussian { sigma_x: 0.04, sigma_u: 0.03 },
        424242,
    ).unwrap();
    let noise = make_fixed_radius_bounds(2, 2, rx, ru, 14).unwrap();
    let cfg = SynthesisConfig { scheme: Scheme::AltDense, ..SynthesisConfig::default() };
    let t0 = std::time::Instant::now();
    let sp = build_alternatives_program(&data, &noise, &cfg).unwrap();
    let build_t = t0.elapsed();
    eprintln!("build: {:?}  vars {} rows {} nnz {}", build_t, sp.program.num_vars(), sp.program.num_rows(), sp.program.a.nnz());
    let t1 = std::time::Instant::now();
    let sol = sp.solve(&cfg.backend, &cfg.solve).unwrap();
    eprintln!("solve: {:?}  status {:?} iters {}", t1.elapsed(), sol.status, sol.iterations);
    let t2 = std::time::Instant::now();
    let cert = extract_certificate(&sp, &sol).unwrap();
    eprintln!("extract: {:?}  lambda {}  wsos_res {:.2e} eq_res {:.2e}", t2.elapsed(), cert.lambda, cert.wsos_residual, cert.identity_residual);
}
