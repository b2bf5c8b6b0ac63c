//! Finite-difference checks of the training losses and the masking rules of
//! the decoder loss.

mod common;

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smd::smd_model::smd_loss;

use common::{pick, scalar, Fixture, Which};

fn check(which: Which) {
    let (checked, worst) = common::gradient_check(which);
    println!("{which:?}: {checked} entries, max relative error {worst:e}");
    assert!(checked > 20, "only {checked} entries had a gradient");
    assert!(worst < 1e-4, "{which:?}: max relative error {worst:e}");
}

#[test]
fn target_duration_loss_gradient_matches_finite_differences() {
    check(Which::Dur);
}

#[test]
fn prompt_duration_loss_gradient_matches_finite_differences() {
    check(Which::PromptDur);
}

#[test]
fn decoder_loss_gradient_matches_finite_differences() {
    check(Which::Smd);
}

#[test]
fn unmasked_positions_get_exactly_zero_gradient() {
    let logits = Var::from_tensor(
        &Tensor::randn(0f64, 2.0, (7, 5), &Device::Cpu).unwrap(),
    )
    .unwrap();
    let targets = [0u32, 1, 2, 3, 4, 0, 1];
    let mask = [true, false, true, false, false, true, false];
    let loss = smd_loss(logits.as_tensor(), &targets, &mask).unwrap();
    let g: Vec<Vec<f64>> = loss
        .backward()
        .unwrap()
        .get(logits.as_tensor())
        .unwrap()
        .to_vec2()
        .unwrap();
    for (r, row) in g.iter().enumerate() {
        if mask[r] {
            assert!(row.iter().any(|&x| x != 0.0));
        } else {
            assert!(row.iter().all(|&x| x == 0.0), "row {r}: {row:?}");
        }
    }
    // relabelling an unmasked position leaves the loss bit-identical
    let mut relabelled = targets;
    relabelled[1] = 4;
    relabelled[3] = 0;
    let again = smd_loss(logits.as_tensor(), &relabelled, &mask).unwrap();
    assert_eq!(scalar(&loss).to_bits(), scalar(&again).to_bits());
}

#[test]
fn decoder_loss_matches_per_position_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (rows, v) = (11, 6);
    let logits: Vec<f64> = (0..rows * v)
        .map(|_| rand::Rng::random_range(&mut rng, -4.0..4.0))
        .collect();
    let targets: Vec<u32> = (0..rows).map(|i| (i * 7 % v) as u32).collect();
    let mask: Vec<bool> = (0..rows).map(|i| i % 3 != 1).collect();
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        total += lse - row[targets[r] as usize];
        count += 1;
    }
    let oracle = total / count as f64;
    let t = Tensor::from_vec(logits, (rows, v), &Device::Cpu).unwrap();
    let got = scalar(&smd_loss(&t, &targets, &mask).unwrap());
    assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
}

#[test]
fn duration_modules_learn_only_from_duration_losses() {
    let fx = Fixture::new();
    let l = fx.losses();
    let smd_grads = pick(&l, Which::Smd).backward().unwrap();
    let dur_grads = (&l.l_dur + &l.l_promptdur).unwrap().backward().unwrap();
    let is_zero = |g: Option<&Tensor>| match g {
        None => true,
        Some(t) => t.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() == 0.0,
    };
    for (name, var) in fx.model.store().vars() {
        let duration_only = ["duration_extractor.", "duration_predictor.", "prompt_duration_encoder.", "prompt_text_encoder."]
            .iter()
            .any(|p| name.starts_with(p));
        if duration_only {
            assert!(is_zero(smd_grads.get(var.as_tensor())), "{name} receives decoder gradient");
        }
        if name.starts_with("duration_extractor.") {
            assert!(!is_zero(dur_grads.get(var.as_tensor())), "{name} receives no duration gradient");
        }
    }
}
