//! Acceptance suite: end-to-end checks against the reference four-pixel
//! device calibration. Each test prints one PASS line; run with
//! `cargo test -p pnr-core --test acceptance -- --nocapture` to see them.

use std::time::Instant;

use pnr_core::{
    build_p_matrix, closed_form_click_probability, fit_efficiencies, flux_relative_uncertainty,
    forward_map, matrix_uncertainty, poisson_statistics, reconstruct_statistics, simulate_pulses,
    FitOptions, FluxErrorBudget, PixelEfficiencies, PulseSource, SimulationConfig,
    UncertaintyOptions,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fitted pixel efficiencies of the reference device.
const REFERENCE_ETAS: [f64; 4] = [0.0248, 0.3565, 0.4862, 0.0566];

/// Click-probability matrix of the reference device, rows n = 0..=4 over
/// columns m = 0..=9, rounded to its reporting precision.
const REFERENCE_MATRIX: [[f64; 10]; 5] = [
    [1.0, 0.076, 0.0063, 0.0005, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        0.0, 0.924, 0.5067, 0.2602, 0.1354, 0.0716, 0.0383, 0.0207, 0.0113, 0.0062,
    ],
    [
        0.0, 0.0, 0.487, 0.6472, 0.6728, 0.6482, 0.6067, 0.5596, 0.514, 0.4712,
    ],
    [
        0.0, 0.0, 0.0, 0.092, 0.1858, 0.2645, 0.3275, 0.3777, 0.4177, 0.4498,
    ],
    [
        0.0, 0.0, 0.0, 0.0, 0.0058, 0.0157, 0.0281, 0.042, 0.057, 0.0767,
    ],
];

/// Standard deviations reported for the same matrix, same layout.
const REFERENCE_SIGMA: [[f64; 10]; 5] = [
    [0.0, 0.0224, 0.0035, 0.0004, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        0.0, 0.0224, 0.0202, 0.0178, 0.0122, 0.0078, 0.0049, 0.003, 0.0018, 0.0011,
    ],
    [
        0.0, 0.0, 0.0236, 0.0117, 0.0026, 0.003, 0.0061, 0.0079, 0.0088, 0.0093,
    ],
    [
        0.0, 0.0, 0.0, 0.0067, 0.0091, 0.0095, 0.0092, 0.0085, 0.0077, 0.007,
    ],
    [
        0.0, 0.0, 0.0, 0.0, 0.0006, 0.0012, 0.0018, 0.0024, 0.0029, 0.0035,
    ],
];

fn reference_efficiencies() -> PixelEfficiencies {
    PixelEfficiencies::new(REFERENCE_ETAS.to_vec()).unwrap()
}

/// Chi-square survival function for four degrees of freedom.
fn chi2_survival_df4(s: f64) -> f64 {
    (-s / 2.0).exp() * (1.0 + s / 2.0)
}

/// Random feasible efficiency vector with up to `max_pixels` pixels.
fn random_etas(rng: &mut ChaCha8Rng, max_pixels: usize) -> Vec<f64> {
    let n = rng.random_range(1..=max_pixels);
    let total: f64 = rng.random::<f64>() * 0.999;
    let raw: Vec<f64> = (0..n).map(|_| 0.01 + rng.random::<f64>()).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|r| r / sum * total).collect()
}

#[test]
fn criterion_1_reference_matrix_reproduced_within_rounding() {
    let start = Instant::now();
    let p = build_p_matrix(&reference_efficiencies(), 9);
    let mut max_dev = 0.0f64;
    for (n, row) in REFERENCE_MATRIX.iter().enumerate() {
        for (m, reference) in row.iter().enumerate() {
            let dev = (p.entry(n, m) - reference).abs();
            max_dev = max_dev.max(dev);
            assert!(
                dev <= 0.01,
                "entry ({n}, {m}) = {} vs reference {reference}",
                p.entry(n, m)
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "criterion 1 PASS: all 50 entries within ±0.01 of the reference matrix \
         (max deviation {max_dev:.4}, {elapsed:?})"
    );
}

#[test]
fn criterion_2_closed_form_agrees_with_recursion() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_dev = 0.0f64;
    for _ in 0..100 {
        let etas = PixelEfficiencies::new(random_etas(&mut rng, 4)).unwrap();
        let p = build_p_matrix(&etas, 9);
        for m in 0..=9 {
            for n in 0..=etas.n_pixels() {
                let direct = closed_form_click_probability(&etas, n, m);
                let dev = (direct - p.entry(n, m)).abs();
                max_dev = max_dev.max(dev);
                assert!(
                    dev <= 1e-12,
                    "(n, m) = ({n}, {m}) for {:?}: {direct} vs {}",
                    etas.etas(),
                    p.entry(n, m)
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "criterion 2 PASS: closed-form enumeration matches the recursion to 1e-12 \
         on 100 random detectors (max deviation {max_dev:.2e}, {elapsed:?})"
    );
}

#[test]
fn criterion_3_columns_stochastic_and_triangular_on_1000_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let etas = PixelEfficiencies::new(random_etas(&mut rng, 4)).unwrap();
        let p = build_p_matrix(&etas, 9);
        assert_eq!(p.entry(0, 0), 1.0);
        for m in 0..=9 {
            let col_sum: f64 = p.column(m).iter().sum();
            assert!(
                (col_sum - 1.0).abs() <= 1e-12,
                "column {m} sums to {col_sum} for {:?}",
                etas.etas()
            );
            for n in 0..=etas.n_pixels() {
                if n > m {
                    assert_eq!(p.entry(n, m), 0.0);
                }
            }
        }
    }
    println!(
        "criterion 3 PASS: 1000 random matrices are column-stochastic to 1e-12 \
         with exact triangular support"
    );
}

#[test]
fn criterion_4_simulation_matches_forward_map() {
    let start = Instant::now();
    let n_pulses: u64 = 10_000_000;
    let config = SimulationConfig {
        etas: reference_efficiencies(),
        source: PulseSource::Poisson { mean: 0.5 },
        n_pulses,
        seed: 424_242,
    };
    let hist = simulate_pulses(&config).unwrap();

    let p = build_p_matrix(&reference_efficiencies(), 9);
    let s = poisson_statistics(0.5, 9).unwrap();
    let q = forward_map(&p, &s).unwrap();

    let mut chi2 = 0.0;
    for (n, &count) in hist.counts().iter().enumerate() {
        let expected = q.probability(n) * n_pulses as f64;
        let freq = count as f64 / n_pulses as f64;
        let standard_error = (q.probability(n) * (1.0 - q.probability(n)) / n_pulses as f64).sqrt();
        let dev = (freq - q.probability(n)).abs();
        assert!(
            dev <= 4.0 * standard_error,
            "bin {n}: frequency {freq} vs {} ({:.1} standard errors)",
            q.probability(n),
            dev / standard_error
        );
        chi2 += (count as f64 - expected) * (count as f64 - expected) / expected;
    }
    let p_value = chi2_survival_df4(chi2);
    assert!(p_value > 0.001, "chi-square {chi2} gives p = {p_value}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "criterion 4 PASS: 1e7-pulse frequencies within 4 standard errors per bin, \
         chi-square p = {p_value:.3} ({elapsed:?})"
    );
}

#[test]
fn criterion_5_fit_recovers_the_generating_efficiencies() {
    let start = Instant::now();
    let truth = reference_efficiencies();
    let p = build_p_matrix(&truth, 9);
    let s = poisson_statistics(0.5, 9).unwrap();
    let q = forward_map(&p, &s).unwrap();

    let noise_free = fit_efficiencies(&q, &s, 4, &FitOptions::default()).unwrap();
    assert!(noise_free.converged());
    assert!(
        noise_free.residual_norm() < 1e-8,
        "residual {}",
        noise_free.residual_norm()
    );
    let mut max_dev_clean = 0.0f64;
    for (fitted, reference) in noise_free.etas_sorted().iter().zip(truth.sorted()) {
        max_dev_clean = max_dev_clean.max((fitted - reference).abs());
    }
    assert!(max_dev_clean < 1e-3, "max deviation {max_dev_clean}");

    let config = SimulationConfig {
        etas: truth.clone(),
        source: PulseSource::Poisson { mean: 0.5 },
        n_pulses: 10_000_000,
        seed: 55,
    };
    let hist = simulate_pulses(&config).unwrap();
    let noisy =
        fit_efficiencies(&hist.to_click_statistics(), &s, 4, &FitOptions::default()).unwrap();
    assert!(noisy.converged());
    let mut max_dev_noisy = 0.0f64;
    for (fitted, reference) in noisy.etas_sorted().iter().zip(truth.sorted()) {
        max_dev_noisy = max_dev_noisy.max((fitted - reference).abs());
    }
    assert!(max_dev_noisy < 0.01, "max deviation {max_dev_noisy}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "criterion 5 PASS: noise-free fit within 1e-3 (max {max_dev_clean:.2e}, residual \
         {:.2e}), 1e7-pulse fit within 0.01 (max {max_dev_noisy:.2e}) ({elapsed:?})",
        noise_free.residual_norm()
    );
}

#[test]
fn criterion_6_reconstruction_accurate_when_dim_degrades_when_bright() {
    let p = build_p_matrix(&reference_efficiencies(), 9);

    // Dim sources round-trip within 1e-3 per element.
    for mu in [0.1, 0.5] {
        let s = poisson_statistics(mu, 9).unwrap();
        let q = forward_map(&p, &s).unwrap();
        let result = reconstruct_statistics(&p, &q).unwrap();
        for m in 0..=4 {
            let dev = (result.raw()[m] - s.probs()[m]).abs();
            assert!(dev < 1e-3, "mu = {mu}, m = {m}: deviation {dev}");
        }
    }

    // At mu = 1 truncation bites: the deviation is pinned as a regression
    // value, concentrated at m = 2..4 while the vacuum element stays tight.
    let s = poisson_statistics(1.0, 9).unwrap();
    let q = forward_map(&p, &s).unwrap();
    let result = reconstruct_statistics(&p, &q).unwrap();
    let devs: Vec<f64> = result
        .raw()
        .iter()
        .zip(s.probs())
        .map(|(r, t)| (r - t).abs())
        .collect();
    let max_dev = devs.iter().copied().fold(0.0f64, f64::max);
    assert!(
        max_dev > 1e-3,
        "expected visible degradation, got {max_dev}"
    );
    assert!(
        (max_dev - 1.1918560818138885e-2).abs() < 1e-9,
        "pinned max deviation drifted: {max_dev}"
    );
    assert!(
        (devs[0] - 3.642312492152522e-5).abs() < 1e-10,
        "pinned vacuum deviation drifted: {}",
        devs[0]
    );
    println!(
        "criterion 6 PASS: round trips within 1e-3 at mu = 0.1 and 0.5; at mu = 1 the \
         reconstruction deviates by {max_dev:.4} (pinned), vacuum element by {:.2e}",
        devs[0]
    );
}

#[test]
fn criterion_7_flux_error_budget_combines_to_the_reference_value() {
    let budget = FluxErrorBudget::new(0.0252, 0.0019, 0.0012).unwrap();
    let relative = flux_relative_uncertainty(&budget);
    assert!(
        (relative - 0.0253).abs() <= 0.0002,
        "relative uncertainty {relative}"
    );
    assert!((relative - 0.025356853117056936).abs() < 1e-15);
    println!(
        "criterion 7 PASS: flux budget (2.52%, 0.19%, 0.12%) combines to \
         {:.4}% relative",
        relative * 100.0
    );
}

#[test]
fn criterion_8_matrix_uncertainty_matches_reference_magnitudes() {
    let start = Instant::now();
    let truth = reference_efficiencies();
    let p = build_p_matrix(&truth, 9);
    let s = poisson_statistics(0.5, 9).unwrap();
    let q = forward_map(&p, &s).unwrap();
    let budget = FluxErrorBudget::new(0.0252, 0.0019, 0.0012).unwrap();
    let options = UncertaintyOptions::default();
    assert_eq!(options.n_sets, 200);
    assert_eq!(options.n_trials_per_set, 10_000_000);

    let result = matrix_uncertainty(&q, 0.5, 4, &budget, &options).unwrap();

    for (n, sigma_row) in result.sigma_matrix().iter().enumerate() {
        for (m, &sigma) in sigma_row.iter().enumerate() {
            let reference = REFERENCE_SIGMA[n][m];
            if n > m || (n, m) == (0, 0) {
                // Structurally fixed entries never vary.
                assert_eq!(sigma, 0.0, "entry ({n}, {m})");
            } else if reference == 0.0 {
                // Reported as zero at four decimals: below reporting precision.
                assert!(sigma < 1e-3, "entry ({n}, {m}): sigma {sigma}");
            } else {
                let ratio = sigma / reference;
                assert!(
                    (1.0 / 3.0..=3.0).contains(&ratio),
                    "entry ({n}, {m}): sigma {sigma} vs reference {reference} (ratio {ratio:.2})"
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    println!(
        "criterion 8 PASS: 200-set propagation reproduces the reference sigma pattern \
         within a factor of 3 (sigma(P_11) = {:.4} vs 0.0224, sigma(P_22) = {:.4} vs \
         0.0236; {} sets kept, {elapsed:?})",
        result.sigma_matrix()[1][1],
        result.sigma_matrix()[2][2],
        result.n_trials()
    );
}

#[test]
fn criterion_9_seeded_operations_are_bit_reproducible_across_schedules() {
    let truth = reference_efficiencies();
    let s = poisson_statistics(0.5, 9).unwrap();

    let run_everything = || {
        let config = SimulationConfig {
            etas: truth.clone(),
            source: PulseSource::Poisson { mean: 0.5 },
            n_pulses: 100_000,
            seed: 99,
        };
        let hist = simulate_pulses(&config).unwrap();
        let fit =
            fit_efficiencies(&hist.to_click_statistics(), &s, 4, &FitOptions::default()).unwrap();
        let p = build_p_matrix(&truth, 9);
        let q = forward_map(&p, &s).unwrap();
        let unc = matrix_uncertainty(
            &q,
            0.5,
            4,
            &FluxErrorBudget::ZERO,
            &UncertaintyOptions {
                n_sets: 4,
                n_trials_per_set: 50_000,
                ..UncertaintyOptions::default()
            },
        )
        .unwrap();
        format!(
            "{}\n{}\n{}",
            serde_json::to_string(&hist).unwrap(),
            serde_json::to_string(&fit).unwrap(),
            serde_json::to_string(&unc).unwrap()
        )
    };

    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(run_everything);
    let quad = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(run_everything);
    let default_pool = run_everything();

    assert_eq!(single, quad, "1-thread and 4-thread outputs differ");
    assert_eq!(single, default_pool, "default pool output differs");
    let repeat = run_everything();
    assert_eq!(default_pool, repeat, "repeated run differs");
    println!(
        "criterion 9 PASS: simulation, fit, and uncertainty outputs are byte-identical \
         across repeats and 1/4-thread schedules"
    );
}
