use dbvae::loss::{class_loss, kl_loss, recon_loss, reparameterize};
use dbvae::{RngStream, Tensor};
use proptest::prelude::*;

fn row(values: &[f64]) -> Tensor {
    Tensor::new([1, values.len()], values.to_vec()).unwrap()
}

#[test]
fn loss_identities() {
    assert_eq!(kl_loss(&row(&[0.0, 0.0]), &row(&[0.0, 0.0])).unwrap(), 0.0);
    assert_eq!(kl_loss(&row(&[1.0, 0.0]), &row(&[0.0, 0.0])).unwrap(), 0.5);
    let bce = class_loss(&[1.0], &Tensor::new([1], vec![0.0]).unwrap()).unwrap();
    assert!((bce - std::f64::consts::LN_2).abs() < 1e-12);
    let x = RngStream::new(1).uniform_tensor([2, 1, 64, 64], 0.0, 1.0);
    assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
}

#[test]
fn bce_is_stable_for_extreme_logits() {
    let logits = Tensor::new([2], vec![1000.0, -1000.0]).unwrap();
    assert_eq!(class_loss(&[1.0, 0.0], &logits).unwrap(), 0.0);
    let wrong = class_loss(&[0.0, 1.0], &logits).unwrap();
    assert!((wrong - 1000.0).abs() < 1e-9);
}

#[test]
fn reparameterized_samples_are_standard_normal() {
    let n = 100_000;
    let mut rng = RngStream::new(99);
    let eps = rng.normal_tensor([n, 1]);
    let z = reparameterize(&Tensor::zeros([n, 1]), &Tensor::zeros([n, 1]), &eps).unwrap();
    let mean = z.sum() / n as f64;
    let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() <= 0.02, "mean {mean}");
    assert!((0.98..=1.02).contains(&var.sqrt()), "std {}", var.sqrt());
}

#[test]
fn reparameterization_shifts_and_scales() {
    let eps = Tensor::new([1, 2], vec![1.0, -2.0]).unwrap();
    let z = reparameterize(&row(&[3.0, 3.0]), &row(&[2.0f64.ln() * 2.0, 0.0]), &eps).unwrap();
    assert!((z.data()[0] - 5.0).abs() < 1e-12);
    assert!((z.data()[1] - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_only_at_prior(
        mu in proptest::collection::vec(-5.0f64..5.0, 1..8),
        lv_seed in any::<u64>(),
    ) {
        let k = mu.len();
        let logvar = RngStream::new(lv_seed).normal_tensor([1, k]);
        let v = kl_loss(&row(&mu), &logvar).unwrap();
        prop_assert!(v >= 0.0);
        let at_prior = mu.iter().all(|&m| m == 0.0) && logvar.data().iter().all(|&l| l == 0.0);
        prop_assert_eq!(v == 0.0, at_prior);
    }
}
