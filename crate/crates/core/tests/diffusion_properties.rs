use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use remqp_core::diffusion::{forward_sample, loss_and_grad, make_schedule, Denoiser, DiffusionPolicy, Head, PolicyConfig, Sample};

proptest! {
    #[test]
    fn alpha_bar_matches_a_log_domain_product(steps in 1usize..200, lo in 1e-5f64..1e-2, span in 0.0f64..0.3) {
        let hi = lo + span;
        let s = make_schedule(steps, lo, hi).unwrap();
        let mut log_sum = 0.0;
        for k in 1..=steps {
            let beta = if steps == 1 { lo } else { lo + (hi - lo) * (k - 1) as f64 / (steps - 1) as f64 };
            log_sum += (-beta).ln_1p();
            prop_assert!((s.alpha_bar(k) - log_sum.exp()).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_process_moments() {
    let s = make_schedule(100, 1e-4, 0.02).unwrap();
    let a0 = DVector::from_vec(vec![0.8, -0.4, 1.5]);
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in [1, 30, 100] {
        let mut sum = DVector::zeros(3);
        let mut sq = DVector::zeros(3);
        for _ in 0..n {
            let eps = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = forward_sample(&a0, k, &eps, &s).unwrap();
            sum += &a;
            sq += a.component_mul(&a);
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean.component_mul(&mean);
        let expected_var = 1.0 - s.alpha_bar(k);
        let sigma = expected_var.sqrt();
        for i in 0..3 {
            assert!((mean[i] - s.alpha_bar(k).sqrt() * a0[i]).abs() <= 3.0 * sigma / (n as f64).sqrt(), "k={k} mean");
            assert!((var[i] / expected_var - 1.0).abs() <= 0.05, "k={k} var {} vs {expected_var}", var[i]);
        }
    }
}

#[test]
fn zero_noise_prediction_loss_is_the_action_dimension() {
    let s = make_schedule(20, 1e-3, 0.1).unwrap();
    let init = Denoiser::new(6, 2, &[8], Head::Noise, &s, 0).unwrap();
    let zero = Denoiser::from_parts(init.sizes().to_vec(), vec![0.0; init.params().len()], Head::Noise, &s).unwrap();
    let data: Vec<Sample> = (0..10_000)
        .map(|i| Sample { action: DVector::from_element(6, (i % 7) as f64 * 0.1), cond: DVector::from_vec(vec![0.0, 1.0]) })
        .collect();
    let batch: Vec<&Sample> = data.iter().collect();
    let (loss, _) = loss_and_grad(&zero, &batch, &s, 1);
    // chi-squared with 6 degrees of freedom: mean 6, std sqrt(12 / N)
    assert!((loss - 6.0).abs() <= 4.0 * (12.0f64 / 10_000.0).sqrt(), "{loss}");
}

#[test]
fn concurrent_sampling_matches_sequential() {
    let data: Vec<Sample> = (0..16)
        .map(|i| Sample { action: DVector::from_element(6, i as f64), cond: DVector::from_vec(vec![i as f64, 1.0]) })
        .collect();
    let cfg = PolicyConfig { hidden: vec![16, 16], diffusion_steps: 10, ..PolicyConfig::default() };
    let policy = DiffusionPolicy::new(&cfg, &data).unwrap();
    let h = DVector::from_vec(vec![0.5, 1.0]);
    let sequential: Vec<_> = (0..32).map(|seed| policy.sample(&h, seed).unwrap()).collect();
    let parallel: Vec<_> = (0..32u64).into_par_iter().map(|seed| policy.sample(&h, seed).unwrap()).collect();
    assert_eq!(sequential, parallel);
}
