//! Structural checks of built models against the published layer lists.

use dbvae::models::{ArchId, DecoderParams, EncoderParams, ModelConfig, IMAGE_SIZE};
use dbvae::RngStream;

pub struct Expected {
    pub kernels: &'static [usize],
    pub hidden: &'static [usize],
}

pub fn expected(arch: ArchId) -> Expected {
    match arch {
        ArchId::Arch1 => Expected { kernels: &[4, 4, 4, 3, 3], hidden: &[512, 256] },
        ArchId::Arch2 => Expected { kernels: &[4, 4, 3, 3], hidden: &[1000] },
    }
}

/// Builds both halves of `arch` and returns every discrepancy found.
pub fn audit(arch: ArchId, latent_dim: usize, channels: usize, width_multiplier: f64) -> Vec<String> {
    let config = ModelConfig { width_multiplier, ..ModelConfig::new(arch, latent_dim, channels) };
    let mut rng = RngStream::new(1);
    let enc = EncoderParams::build(config, &mut rng).unwrap();
    let dec = DecoderParams::build(config, &mut rng).unwrap();
    let want = expected(arch);
    let mut problems = Vec::new();

    let mut kernels: Vec<usize> = enc
        .convs
        .iter()
        .map(|c| {
            let (kh, kw) = c.kernel_size();
            if kh != kw {
                problems.push(format!("non-square kernel {kh}x{kw}"));
            }
            kh
        })
        .collect();
    kernels.sort_unstable();
    let mut expected_kernels = want.kernels.to_vec();
    expected_kernels.sort_unstable();
    if kernels != expected_kernels {
        problems.push(format!("{arch} conv kernels {kernels:?}, expected {expected_kernels:?}"));
    }
    let hidden: Vec<usize> = enc.hidden.iter().map(|d| d.out_features()).collect();
    if hidden != want.hidden {
        problems.push(format!("{arch} hidden widths {hidden:?}, expected {:?}", want.hidden));
    }
    if enc.head.out_features() != 1 + 2 * latent_dim {
        problems.push(format!("head width {} for k={latent_dim}", enc.head.out_features()));
    }
    if dec.deconvs.len() != enc.convs.len() {
        problems.push(format!("{} decoder layers for {} encoder layers", dec.deconvs.len(), enc.convs.len()));
    }

    let x = rng.uniform_tensor([2, channels, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0);
    let stats = enc.forward(&x).unwrap();
    if stats.mu.shape() != [2, latent_dim] || stats.logvar.shape() != [2, latent_dim] || stats.logit.shape() != [2] {
        problems.push(format!(
            "encoder outputs logit {:?} mu {:?} logvar {:?}",
            stats.logit.shape(),
            stats.mu.shape(),
            stats.logvar.shape()
        ));
    }
    let xhat = dec.forward(&stats.mu).unwrap();
    if xhat.shape() != x.shape() {
        problems.push(format!("decoder output {:?} for input {:?}", xhat.shape(), x.shape()));
    }
    if !xhat.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
        problems.push("decoder output outside [0, 1]".into());
    }
    problems
}
