mod support;

use dbvae::checkpoint::Checkpoint;
use dbvae::loss::{record_objective, LossWeights};
use dbvae::models::{ArchId, DecoderParams, EncoderParams, ModelBundle, ModelConfig, ModelKind};
use dbvae::ops::{conv2d, transposed_conv2d};
use dbvae::tape::Tape;
use dbvae::{RngStream, Tensor};

#[test]
fn architectures_match_layer_lists() {
    for arch in [ArchId::Arch1, ArchId::Arch2] {
        let problems = support::audit::audit(arch, 32, 1, 1.0);
        assert!(problems.is_empty(), "{problems:?}");
    }
    assert!(support::audit::audit(ArchId::Arch2, 5, 3, 0.25).is_empty());
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let mut rng = RngStream::new(8);
    let mut checked = 0;
    for _ in 0..80 {
        let (n, c, f) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4));
        let k = 1 + rng.below(4);
        let (stride, padding) = (1 + rng.below(3), rng.below(2));
        let h = k + rng.below(8);
        let x = rng.normal_tensor([n, c, h, h]);
        let kernel = rng.normal_tensor([f, c, k, k]);
        let Ok(y) = conv2d(&x, &kernel, &Tensor::zeros([f]), stride, padding) else {
            continue;
        };
        let v = rng.normal_tensor(y.shape().to_vec());
        // When the stride skips trailing rows the output size does not
        // determine the input size; those geometries have no inverse shape.
        let back = match transposed_conv2d(&v, &kernel, &Tensor::zeros([c]), stride, padding) {
            Ok(b) if b.shape() == x.shape() => b,
            _ => continue,
        };
        let (lhs, rhs) = (y.dot(&v).unwrap(), x.dot(&back).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} geometries checked");
}

#[test]
fn examples_in_a_batch_do_not_interact() {
    let config = ModelConfig { width_multiplier: 0.25, ..ModelConfig::new(ArchId::Arch2, 4, 1) };
    let mut rng = RngStream::new(4);
    let enc = EncoderParams::build(config, &mut rng).unwrap();
    let batch = rng.uniform_tensor([5, 1, 64, 64], 0.0, 1.0);
    let together = enc.forward(&batch).unwrap();
    for i in 0..5 {
        let alone = enc.forward(&batch.gather_rows(&[i])).unwrap();
        for (a, b) in alone.mu.data().iter().zip(together.mu.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((alone.logit.data()[0] - together.logit.data()[i]).abs() < 1e-12);
    }
    let chunked = enc.forward_chunked(&batch, 2).unwrap();
    assert_eq!(chunked, together);
}

#[test]
fn decoder_does_not_touch_nonface_batches() {
    let config = ModelConfig { width_multiplier: 0.25, ..ModelConfig::new(ArchId::Arch2, 4, 1) };
    let mut rng = RngStream::new(6);
    let enc = EncoderParams::build(config, &mut rng).unwrap();
    let dec = DecoderParams::build(config, &mut rng).unwrap();
    let mut perturbed = dec.clone();
    for p in perturbed.params_mut() {
        for v in p.tensor.data_mut() {
            *v += 0.3;
        }
    }
    let x = rng.uniform_tensor([3, 1, 64, 64], 0.0, 1.0);
    let eps = rng.normal_tensor([3, 4]);
    let loss = |d: &DecoderParams, labels: &[f64]| {
        let mut tape = Tape::new();
        let xv = tape.input_ref(&x);
        let vars = enc.forward_tape(&mut tape, xv).unwrap();
        let obj = record_objective(&mut tape, xv, labels, vars, Some(d), &eps, LossWeights::default()).unwrap();
        tape.value(obj.total).item().unwrap()
    };
    let nonfaces = [0.0; 3];
    assert_eq!(loss(&dec, &nonfaces), loss(&perturbed, &nonfaces));
    let mixed = [0.0, 1.0, 0.0];
    assert_ne!(loss(&dec, &mixed), loss(&perturbed, &mixed));
}

#[test]
fn checkpoints_round_trip_through_files() {
    let config = ModelConfig { width_multiplier: 0.25, ..ModelConfig::new(ArchId::Arch1, 3, 1) };
    let mut rng = RngStream::new(2);
    let bundle = ModelBundle {
        kind: ModelKind::Dbvae,
        encoder: EncoderParams::build(config, &mut rng).unwrap(),
        decoder: Some(DecoderParams::build(config, &mut rng).unwrap()),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    bundle.to_checkpoint(&[("seed", "2".into())]).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta("seed").unwrap(), "2");
    assert_eq!(ModelBundle::from_checkpoint(&loaded).unwrap(), bundle);

    let mut wrong = loaded.clone();
    wrong.metadata.insert("latent_dim".into(), "4".into());
    let err = ModelBundle::from_checkpoint(&wrong).unwrap_err().to_string();
    assert!(err.contains("shape"), "{err}");
}
