//! Central finite-difference checking of tape programs.
//!
//! A case produces fresh inputs per trial and a program that records a
//! computation over them. The checker projects the program output onto a
//! random target with `mse`, so every output element carries a distinct
//! random cotangent, then compares the tape gradient against
//! `(f(x + h) - f(x - h)) / 2h` coordinate by coordinate.

use dbvae::loss::{record_objective, LossWeights};
use dbvae::models::{ArchId, DecoderParams, EncoderParams, ModelConfig};
use dbvae::ops;
use dbvae::tape::{ParamId, Tape, Var};
use dbvae::{RngStream, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const TRIALS: usize = 20;
/// Inputs larger than this are checked on a random subset of coordinates.
const MAX_COORDS: usize = 48;

type Program = dyn for<'a> Fn(&mut Tape<'a>, &[Var], &[Tensor]) -> dbvae::Result<Var>;

pub struct Case {
    pub name: &'static str,
    /// Returns `(differentiated inputs, constants)`.
    pub inputs: Box<dyn Fn(&mut RngStream) -> (Vec<Tensor>, Vec<Tensor>)>,
    pub program: Box<Program>,
}

fn run(program: &Program, inputs: &[Tensor], consts: &[Tensor], target: Option<&Tensor>) -> (f64, Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i), t))
        .collect();
    let out = program(&mut tape, &vars, consts).expect("program records");
    let y = tape.value(out).clone();
    let Some(target) = target else {
        return (f64::NAN, y, Vec::new());
    };
    let t = tape.input(target.clone());
    let loss = tape.mse(out, t).unwrap();
    let value = tape.value(loss).item().unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = (0..inputs.len()).map(|i| grads.param(ParamId(i)).clone()).collect();
    (value, y, g)
}

fn coords(len: usize, rng: &mut RngStream) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        (0..MAX_COORDS).map(|_| rng.below(len)).collect()
    }
}

/// `||a - n|| / (||a|| + ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest per-trial relative error of `case` over `trials` trials.
pub fn check(case: &Case, trials: usize, rng: &mut RngStream) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (inputs, consts) = (case.inputs)(rng);
        let (_, y, _) = run(&*case.program, &inputs, &consts, None);
        let target = rng.normal_tensor(y.shape().to_vec());
        let (_, _, grads) = run(&*case.program, &inputs, &consts, Some(&target));
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (i, input) in inputs.iter().enumerate() {
            for j in coords(input.len(), rng) {
                let mut probe = inputs.clone();
                let x = input.data()[j];
                probe[i].data_mut()[j] = x + STEP;
                let up = run(&*case.program, &probe, &consts, Some(&target)).0;
                probe[i].data_mut()[j] = x - STEP;
                let down = run(&*case.program, &probe, &consts, Some(&target)).0;
                numeric.push((up - down) / (2.0 * STEP));
                analytic.push(grads[i].data()[j]);
            }
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Values bounded away from zero so kinked activations stay differentiable
/// under the probe step.
fn off_zero(rng: &mut RngStream, shape: Vec<usize>) -> Tensor {
    let mut t = rng.uniform_tensor(shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.uniform() < 0.5 {
            *v = -*v;
        }
    }
    t
}

fn conv_shapes(rng: &mut RngStream, transposed: bool) -> (Vec<usize>, Vec<usize>, usize, usize, usize) {
    loop {
        let (n, c, f) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
        let (h, w) = (dim(rng, 2, 7), dim(rng, 2, 7));
        let k = dim(rng, 1, 4);
        let (stride, padding) = (dim(rng, 1, 3), dim(rng, 0, 2));
        let x = if transposed { vec![n, f, h, w] } else { vec![n, c, h, w] };
        let kern = vec![f, c, k, k];
        let probe = Tensor::zeros(x.clone());
        let ok = if transposed {
            ops::transposed_conv2d(&probe, &Tensor::zeros(kern.clone()), &Tensor::zeros([c]), stride, padding).is_ok()
        } else {
            ops::conv2d(&probe, &Tensor::zeros(kern.clone()), &Tensor::zeros([f]), stride, padding).is_ok()
        };
        if ok {
            return (x, kern, if transposed { c } else { f }, stride, padding);
        }
    }
}

/// One case per tape primitive.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d",
            inputs: Box::new(|rng| {
                let (x, k, f, s, p) = conv_shapes(rng, false);
                let cfg = Tensor::new([2], vec![s as f64, p as f64]).unwrap();
                (vec![rng.normal_tensor(x), rng.normal_tensor(k), rng.normal_tensor([f])], vec![cfg])
            }),
            program: Box::new(|t, v, c| {
                let cfg = c[0].data();
                t.conv2d(v[0], v[1], v[2], cfg[0] as usize, cfg[1] as usize)
            }),
        },
        Case {
            name: "transposed_conv2d",
            inputs: Box::new(|rng| {
                let (x, k, c, s, p) = conv_shapes(rng, true);
                let cfg = Tensor::new([2], vec![s as f64, p as f64]).unwrap();
                (vec![rng.normal_tensor(x), rng.normal_tensor(k), rng.normal_tensor([c])], vec![cfg])
            }),
            program: Box::new(|t, v, c| {
                let cfg = c[0].data();
                t.transposed_conv2d(v[0], v[1], v[2], cfg[0] as usize, cfg[1] as usize)
            }),
        },
        Case {
            name: "dense",
            inputs: Box::new(|rng| {
                let (n, d, m) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 5));
                (vec![rng.normal_tensor([n, d]), rng.normal_tensor([d, m]), rng.normal_tensor([m])], vec![])
            }),
            program: Box::new(|t, v, _| t.dense(v[0], v[1], v[2])),
        },
        Case {
            name: "relu",
            inputs: Box::new(|rng| {
                let n = dim(rng, 1, 12);
                (vec![off_zero(rng, vec![2, n])], vec![])
            }),
            program: Box::new(|t, v, _| Ok(t.relu(v[0]))),
        },
        Case {
            name: "leaky_relu",
            inputs: Box::new(|rng| {
                let n = dim(rng, 1, 12);
                (vec![off_zero(rng, vec![2, n])], vec![])
            }),
            program: Box::new(|t, v, _| Ok(t.leaky_relu(v[0], 0.1))),
        },
        Case {
            name: "sigmoid",
            inputs: Box::new(|rng| {
                let n = dim(rng, 1, 12);
                (vec![rng.normal_tensor([3, n]).map(|x| 3.0 * x)], vec![])
            }),
            program: Box::new(|t, v, _| Ok(t.sigmoid(v[0]))),
        },
        Case {
            name: "square",
            inputs: Box::new(|rng| {
                let n = dim(rng, 1, 10);
                (vec![rng.normal_tensor([n])], vec![])
            }),
            program: Box::new(|t, v, _| Ok(t.square(v[0]))),
        },
        Case {
            name: "reshape",
            inputs: Box::new(|rng| {
                let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
                (vec![rng.normal_tensor([a, b, 2])], vec![])
            }),
            program: Box::new(|t, v, _| {
                let s = t.value(v[0]).shape().to_vec();
                let r = t.reshape(v[0], &[s[0], s[1] * s[2]])?;
                Ok(t.square(r))
            }),
        },
        Case {
            name: "slice_cols",
            inputs: Box::new(|rng| {
                let cols = dim(rng, 2, 8);
                let start = rng.below(cols - 1);
                let len = dim(rng, 1, cols - start);
                let at = Tensor::new([2], vec![start as f64, len as f64]).unwrap();
                (vec![rng.normal_tensor([3, cols])], vec![at])
            }),
            program: Box::new(|t, v, c| t.slice_cols(v[0], c[0].data()[0] as usize, c[0].data()[1] as usize)),
        },
        Case {
            name: "gather_rows",
            inputs: Box::new(|rng| {
                let rows = dim(rng, 1, 5);
                let picks = dim(rng, 1, 6);
                let idx = Tensor::from_fn([picks], |_| rng.below(rows) as f64);
                (vec![rng.normal_tensor([rows, 3])], vec![idx])
            }),
            program: Box::new(|t, v, c| {
                let idx: Vec<usize> = c[0].data().iter().map(|&i| i as usize).collect();
                t.gather_rows(v[0], &idx)
            }),
        },
        Case {
            name: "reparameterize",
            inputs: Box::new(|rng| {
                let (n, k) = (dim(rng, 1, 4), dim(rng, 1, 5));
                let eps = rng.normal_tensor([n, k]);
                (vec![rng.normal_tensor([n, k]), rng.normal_tensor([n, k])], vec![eps])
            }),
            program: Box::new(|t, v, c| t.reparameterize(v[0], v[1], c[0].clone())),
        },
        Case {
            name: "mean",
            inputs: Box::new(|rng| {
                let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
                (vec![rng.normal_tensor([a, b])], vec![])
            }),
            program: Box::new(|t, v, _| Ok(t.mean(v[0]))),
        },
        Case {
            name: "bce_with_logits",
            inputs: Box::new(|rng| {
                let n = dim(rng, 1, 8);
                let labels = Tensor::from_fn([n], |_| (rng.uniform() < 0.5) as u8 as f64);
                (vec![rng.normal_tensor([n, 1]).map(|x| 4.0 * x)], vec![labels])
            }),
            program: Box::new(|t, v, c| t.bce_with_logits(v[0], c[0].data())),
        },
        Case {
            name: "kl_divergence",
            inputs: Box::new(|rng| {
                let (n, k) = (dim(rng, 1, 4), dim(rng, 1, 5));
                (vec![rng.normal_tensor([n, k]), rng.normal_tensor([n, k])], vec![])
            }),
            program: Box::new(|t, v, _| t.kl_divergence(v[0], v[1])),
        },
        Case {
            name: "mse",
            inputs: Box::new(|rng| {
                let n = dim(rng, 1, 10);
                (vec![rng.normal_tensor([2, n]), rng.normal_tensor([2, n])], vec![])
            }),
            program: Box::new(|t, v, _| t.mse(v[0], v[1])),
        },
        Case {
            name: "weighted_sum",
            inputs: Box::new(|rng| {
                let w = rng.normal_tensor([3]);
                (vec![rng.normal_tensor([4]), rng.normal_tensor([2, 2]), rng.normal_tensor([3])], vec![w])
            }),
            program: Box::new(|t, v, c| {
                let terms: Vec<(Var, f64)> = v
                    .iter()
                    .zip(c[0].data())
                    .map(|(&x, &w)| {
                        let s = t.square(x);
                        (t.mean(s), w)
                    })
                    .collect();
                t.weighted_sum(&terms)
            }),
        },
    ]
}

/// Composite losses: KL + MSE + BCE through reparameterize on a small
/// hand-built conv VAE, each term alone and combined.
pub fn composite_cases() -> Vec<Case> {
    fn vae<'a>(t: &mut Tape<'a>, v: &[Var], c: &[Tensor], w: [f64; 3]) -> dbvae::Result<Var> {
        // v: x, conv k, conv b, enc w, enc b, dec w, dec b, deconv k, deconv b
        let k = c[0].dim(1);
        let h = t.conv2d(v[0], v[1], v[2], 2, 1)?;
        let h = t.leaky_relu(h, 0.1);
        let n = t.value(h).dim(0);
        let flat = t.value(h).len() / n;
        let h = t.reshape(h, &[n, flat])?;
        let head = t.dense(h, v[3], v[4])?;
        let logit = t.slice_cols(head, 0, 1)?;
        let mu = t.slice_cols(head, 1, k)?;
        let logvar = t.slice_cols(head, 1 + k, k)?;
        let bce = t.bce_with_logits(logit, c[1].data())?;
        let kl = t.kl_divergence(mu, logvar)?;
        let z = t.reparameterize(mu, logvar, c[0].clone())?;
        let d = t.dense(z, v[5], v[6])?;
        let d = t.leaky_relu(d, 0.1);
        let d = t.reshape(d, &[n, 2, 2, 2])?;
        let xhat = t.transposed_conv2d(d, v[7], v[8], 2, 1)?;
        let xhat = t.sigmoid(xhat);
        let recon = t.mse(xhat, v[0])?;
        t.weighted_sum(&[(bce, w[0]), (kl, w[1]), (recon, w[2])])
    }
    let inputs = |rng: &mut RngStream| {
        let (n, k) = (3, 2);
        let x = rng.uniform_tensor([n, 1, 4, 4], 0.05, 0.95);
        let params = vec![
            x,
            rng.normal_tensor([2, 1, 2, 2]),
            rng.normal_tensor([2]),
            rng.normal_tensor([18, 1 + 2 * k]).map(|v| 0.5 * v),
            rng.normal_tensor([1 + 2 * k]).map(|v| 0.5 * v),
            rng.normal_tensor([k, 8]),
            rng.normal_tensor([8]),
            rng.normal_tensor([2, 1, 4, 4]),
            rng.normal_tensor([1]),
        ];
        let eps = rng.normal_tensor([n, k]);
        let labels = Tensor::new([n], vec![1.0, 0.0, 1.0]).unwrap();
        (params, vec![eps, labels])
    };
    let weighted = |name: &'static str, w: [f64; 3]| Case {
        name,
        inputs: Box::new(inputs),
        program: Box::new(move |t, v, c| vae(t, v, c, w)),
    };
    vec![
        weighted("composite classification", [1.0, 0.0, 0.0]),
        weighted("composite kl through encoder", [0.0, 1.0, 0.0]),
        weighted("composite reconstruction through reparameterize", [0.0, 0.0, 1.0]),
        weighted("composite kl + mse + bce", [1.0, 0.5, 2.0]),
    ]
}

/// Result of [`check_model_objective`].
pub struct ModelCheck {
    pub worst: f64,
    pub probes: usize,
    /// Probes skipped because the step straddled a leaky-relu kink.
    pub kinked: usize,
}

/// Checks the full gated objective of a small ARCH2 model with respect to
/// its own parameters.
///
/// A full-size image pushes thousands of units through leaky relus, so a
/// probe of width `2 * STEP` occasionally straddles a kink. Such probes are
/// detected by disagreement of the one-sided differences and excluded.
pub fn check_model_objective(trials: usize, rng: &mut RngStream) -> ModelCheck {
    let config = ModelConfig {
        width_multiplier: 0.125,
        ..ModelConfig::new(ArchId::Arch2, 3, 1)
    };
    let weights = LossWeights { kl: 0.5, recon: 1.0 };
    let labels = [1.0, 0.0, 1.0];
    let objective = |enc: &EncoderParams, dec: &DecoderParams, x: &Tensor, eps: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.input_ref(x);
        let vars = enc.forward_tape(&mut tape, xv).unwrap();
        let obj = record_objective(&mut tape, xv, &labels, vars, Some(dec), eps, weights).unwrap();
        let value = tape.value(obj.total).item().unwrap();
        (value, tape.backward(obj.total).unwrap())
    };
    let mut result = ModelCheck { worst: 0.0, probes: 0, kinked: 0 };
    for _ in 0..trials {
        let mut enc = EncoderParams::build(config, rng).unwrap();
        let mut dec = DecoderParams::build(config, rng).unwrap();
        let x = rng.uniform_tensor([3, 1, 64, 64], 0.0, 1.0);
        let eps = rng.normal_tensor([3, 3]);
        let (base, grads) = objective(&enc, &dec, &x, &eps);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..12 {
            let on_decoder = rng.uniform() < 0.5;
            let (id, j, original) = {
                let params = if on_decoder { dec.params_mut() } else { enc.params_mut() };
                let p = rng.below(params.len());
                let j = rng.below(params[p].tensor.len());
                (params[p].id, j, params[p].tensor.data()[j])
            };
            let set = |enc: &mut EncoderParams, dec: &mut DecoderParams, v: f64| {
                let mut params = if on_decoder { dec.params_mut() } else { enc.params_mut() };
                let p = params.iter_mut().find(|p| p.id == id).unwrap();
                p.tensor.data_mut()[j] = v;
            };
            set(&mut enc, &mut dec, original + STEP);
            let up = objective(&enc, &dec, &x, &eps).0;
            set(&mut enc, &mut dec, original - STEP);
            let down = objective(&enc, &dec, &x, &eps).0;
            set(&mut enc, &mut dec, original);
            result.probes += 1;
            let (fwd, bwd) = ((up - base) / STEP, (base - down) / STEP);
            if relative_error(&[fwd], &[bwd]) > TOLERANCE {
                result.kinked += 1;
                continue;
            }
            numeric.push((up - down) / (2.0 * STEP));
            analytic.push(grads.param(id).data()[j]);
        }
        result.worst = result.worst.max(relative_error(&analytic, &numeric));
    }
    result
}
