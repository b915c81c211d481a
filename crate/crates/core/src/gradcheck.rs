//! Central-finite-difference checks of reverse-mode gradients.
//!
//! Every check uses only forward evaluations for the numeric side, so it is
//! independent of the backward rules it verifies. Each instance draws random
//! N(0,1) inputs in `f64`, reduces the operation's output to a scalar with a
//! fixed random weighting, and compares analytic and numeric gradients
//! element by element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::{Batch, BoundModel, EncoderConfig, Mode, Weights};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{Encoding, CLS_ID, IGNORE_LABEL, PAD_ID, SEP_ID};

/// Magnitude below which gradients are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Outcome of one named check across its random instances.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Settings for [`op_suite`].
#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 20,
            step: 1e-5,
            tolerance: 1e-3,
            seed: 42,
        }
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// A differentiable operation under test, with an input generator.
struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: Box<Build>,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal)).expect("non-empty shape")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |r| {
                let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
                // b broadcasts over a's batch dim
                vec![randn(r, &[b, m, k]), randn(r, &[k, n])]
            },
            build: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        OpCase {
            name: "matmul_t",
            inputs: |r| {
                let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
                vec![randn(r, &[b, m, k]), randn(r, &[b, n, k])]
            },
            build: Box::new(|t, v| t.matmul_t(v[0], v[1])),
        },
        OpCase {
            name: "add",
            inputs: |r| {
                let (m, n) = (dim(r, 1, 4), dim(r, 1, 5));
                vec![randn(r, &[m, n]), randn(r, &[n])]
            },
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            inputs: |r| {
                let (m, n) = (dim(r, 1, 4), dim(r, 1, 5));
                vec![randn(r, &[m, n]), randn(r, &[m, n])]
            },
            build: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        OpCase {
            name: "scale",
            inputs: |r| {
                vec![{
                    let shape = [dim(r, 1, 6)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| Ok(t.scale(v[0], -0.375))),
        },
        OpCase {
            name: "reshape",
            inputs: |r| {
                vec![{
                    let shape = [2, 3, dim(r, 1, 3)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| {
                let n = t.shape(v[0]).iter().product::<usize>();
                t.reshape(v[0], &[n / 2, 2])
            }),
        },
        OpCase {
            name: "permute",
            inputs: |r| {
                vec![{
                    let shape = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
        },
        OpCase {
            name: "softmax",
            inputs: |r| {
                vec![{
                    let shape = [dim(r, 1, 3), dim(r, 2, 5), dim(r, 1, 3)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| t.softmax(v[0], 1)),
        },
        OpCase {
            name: "masked_softmax",
            inputs: |r| {
                vec![{
                    let shape = [2, dim(r, 1, 3), 5];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| t.masked_softmax(v[0], &[3, 5])),
        },
        OpCase {
            name: "layer_norm",
            inputs: |r| {
                let (m, d) = (dim(r, 1, 4), dim(r, 2, 6));
                vec![randn(r, &[m, d]), randn(r, &[d]), randn(r, &[d])]
            },
            build: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        },
        OpCase {
            name: "gelu",
            inputs: |r| {
                vec![{
                    let shape = [dim(r, 1, 4), dim(r, 1, 5)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| Ok(t.gelu(v[0]))),
        },
        OpCase {
            name: "tanh",
            inputs: |r| {
                vec![{
                    let shape = [dim(r, 1, 8)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| Ok(t.tanh(v[0]))),
        },
        OpCase {
            name: "embedding",
            inputs: |r| {
                vec![{
                    let shape = [4, dim(r, 1, 4)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| t.embedding(v[0], &[2, 0, 2, 3, 2])),
        },
        OpCase {
            name: "cross_entropy",
            inputs: |r| {
                vec![{
                    let shape = [4, dim(r, 2, 6)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| {
                let k = t.shape(v[0])[1] as i64;
                t.cross_entropy(v[0], &[0, -100, k - 1, 1], -100)
            }),
        },
        OpCase {
            name: "sum",
            inputs: |r| {
                vec![{
                    let shape = [dim(r, 1, 3), dim(r, 1, 4)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| Ok(t.sum(v[0]))),
        },
        OpCase {
            name: "mean",
            inputs: |r| {
                vec![{
                    let shape = [dim(r, 1, 3), dim(r, 1, 4)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| Ok(t.mean(v[0]))),
        },
        OpCase {
            name: "dropout",
            inputs: |r| {
                vec![{
                    let shape = [dim(r, 2, 4), dim(r, 2, 5)];
                    randn(r, &shape)
                }]
            },
            build: Box::new(|t, v| {
                // fixed mask: every evaluation reseeds identically
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                t.dropout(v[0], 0.3, &mut rng)
            }),
        },
    ]
}

/// Scalar objective `Σ w ⊙ build(inputs)` evaluated on a fresh tape.
fn objective(
    build: &Build,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    trainable: bool,
) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| {
            if trainable {
                tape.param(x.clone())
            } else {
                tape.constant(x.clone())
            }
        })
        .collect();
    let out = build(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let out = if tape.shape(out).is_empty() {
        out
    } else {
        tape.reshape(out, weights.shape())?
    };
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss))
}

fn check_case(case: &OpCase, rng: &mut ChaCha8Rng, step: f64) -> Result<f64> {
    let mut inputs = (case.inputs)(rng);
    // output shape from a dry run
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = (case.build)(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let weights = randn(rng, &out_shape);

    let (tape, vars, loss) = objective(&*case.build, &inputs, &weights, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, loss) = objective(&*case.build, inputs, &weights, false)?;
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + step;
            let plus = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig - step;
            let minus = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Run the per-operation gradient checks.
pub fn op_suite(config: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    cases()
        .iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for _ in 0..config.instances {
                worst = worst.max(check_case(case, &mut rng, config.step)?);
            }
            Ok(CheckOutcome {
                name: case.name.to_string(),
                instances: config.instances,
                max_rel_err: worst,
                tolerance: config.tolerance,
            })
        })
        .collect()
}

/// Settings for [`model_check`].
#[derive(Clone, Copy, Debug)]
pub struct ModelCheckConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        ModelCheckConfig {
            samples: 50,
            step: 1e-4,
            tolerance: 1e-2,
            seed: 42,
        }
    }
}

/// Masked-LM loss of the tiny preset (dropout off, `f64`) on one padded
/// batch; compares gradients of randomly sampled scalar parameters, each
/// drawn by picking a tensor uniformly and then an element uniformly.
pub fn model_check(config: &ModelCheckConfig) -> Result<CheckOutcome> {
    let mut enc_config = EncoderConfig::tiny();
    enc_config.dropout = 0.0;
    let mut weights = Weights::<f64>::init(&enc_config, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let vocab = enc_config.vocab_size as u32;

    let lens = [12usize, 9];
    let seq_len = lens[0];
    let encodings: Vec<Encoding> = lens
        .iter()
        .map(|&n| {
            let mut ids = vec![CLS_ID];
            ids.extend((0..n - 2).map(|_| rng.random_range(5..vocab)));
            ids.push(SEP_ID);
            ids.resize(seq_len, PAD_ID);
            Encoding {
                ids,
                valid_len: n,
                segments: vec![0; seq_len],
                word_starts: vec![true; seq_len],
                word_count: n - 2,
            }
        })
        .collect();
    let batch = Batch::from_encodings(&encodings)?;
    let rows: Vec<usize> = vec![1, 4, 7, 10, seq_len + 2, seq_len + 5];
    let targets: Vec<i64> = rows
        .iter()
        .map(|_| rng.random_range(5..vocab) as i64)
        .collect();

    let loss_of = |w: &Weights<f64>, want_grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut tape = Tape::<f64>::new();
        let model = BoundModel::bind(&mut tape, w, want_grad);
        let hidden = model.encode(&mut tape, &batch, &mut Mode::Eval)?;
        let logits = model.mlm_logits(&mut tape, hidden, Some(&rows))?;
        let loss = tape.cross_entropy(logits, &targets, IGNORE_LABEL)?;
        let value = tape.value(loss).item()?;
        if !want_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        Ok((
            value,
            Some(model.vars().iter().map(|&v| grads.wrt(v)).collect()),
        ))
    };

    let (_, grads) = loss_of(&weights, true)?;
    let grads = grads.expect("requested");
    let mut worst = 0.0f64;
    for _ in 0..config.samples {
        let t = rng.random_range(0..grads.len());
        let j = rng.random_range(0..grads[t].numel());
        let orig = weights.tensors()[t].data()[j];
        weights.tensors_mut()[t].data_mut()[j] = orig + config.step;
        let (plus, _) = loss_of(&weights, false)?;
        weights.tensors_mut()[t].data_mut()[j] = orig - config.step;
        let (minus, _) = loss_of(&weights, false)?;
        weights.tensors_mut()[t].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * config.step);
        worst = worst.max(rel_err(grads[t].data()[j], numeric));
    }
    Ok(CheckOutcome {
        name: "tiny-model-mlm".to_string(),
        instances: config.samples,
        max_rel_err: worst,
        tolerance: config.tolerance,
    })
}
