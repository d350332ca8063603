//! L1 objective, RMSProp, orthogonal initialisation, the encode-then-predict
//! training loop and checkpoints.
//!
//! Each step draws its batch from its own random stream (`seed`, `step`), so
//! a run resumed from a checkpoint sees exactly the batches the
//! uninterrupted run would have seen.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{self, Le, WriteLe};
use crate::config;
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::folded::{split_time, FoldedStack, Model, TopologySpec};
use crate::nn_ops::orthogonal_kernel;
use crate::tensor::{Element, Rng, Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FRNN";
const CHECKPOINT_VERSION: u32 = 1;
/// Batch sampling streams start here so they never coincide with the
/// initialisation stream of the same seed.
const SAMPLING_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub g: usize,
    pub p: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            g: 10,
            p: 10,
            learning_rate: 1e-4,
            batch_size: 12,
            steps: 1000,
            seed: 0,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || self.p == 0 || self.batch_size == 0 || self.steps == 0 {
            return Err(Error::invalid("g, p, batch_size and steps must all be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_epsilon > 0.0) {
            return Err(Error::invalid("rmsprop_decay must be in [0, 1) and rmsprop_epsilon positive"));
        }
        Ok(())
    }
}

/// Mean absolute difference over every element of every frame.
pub fn l1_loss<T: Element>(tape: &Tape<T>, preds: &[Var<T>], targets: &[Var<T>]) -> Result<Var<T>> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "l1_loss needs equally many predictions and targets, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var<T>> = None;
    let mut count = 0;
    for (p, t) in preds.iter().zip(targets) {
        let term = tape.sum(&tape.abs(&tape.sub(p, t)?));
        count += p.value().len();
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    let total = total.expect("at least one frame");
    Ok(tape.scale(&total, T::from_f64(1.0 / count as f64)))
}

/// [`l1_loss`] on plain tensors.
pub fn l1_loss_value(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    pred.expect_same_shape("l1_loss", target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// One elementwise RMSProp update:
/// `acc = decay * acc + (1 - decay) * g^2`, `param -= lr * g / (sqrt(acc) + eps)`.
pub fn rmsprop_update<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    acc: &mut Tensor<T>,
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    param.expect_same_shape("rmsprop", grad)?;
    param.expect_same_shape("rmsprop", acc)?;
    let (lr, rho, eps) = (T::from_f64(lr), T::from_f64(decay), T::from_f64(eps));
    let keep = T::one() - rho;
    for ((w, &g), a) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(acc.data_mut())
    {
        *a = rho * *a + keep * g * g;
        *w = *w - lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

/// RMSProp state: hyperparameters and one accumulator per parameter, in
/// the stack's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub accumulators: Vec<(String, Tensor<f32>)>,
}

impl RmsProp {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let mut accumulators = Vec::new();
        model.map_params(|name, t| accumulators.push((name.to_string(), Tensor::zeros_like(t))));
        RmsProp {
            learning_rate: cfg.learning_rate,
            decay: cfg.rmsprop_decay,
            epsilon: cfg.rmsprop_epsilon,
            accumulators,
        }
    }

    /// Apply `grads` (parameter order) to `model`.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != self.accumulators.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.accumulators.len()
            )));
        }
        let mut i = 0;
        let mut outcome = Ok(());
        model.for_each_param_mut(|name, w| {
            let (acc_name, acc) = &mut self.accumulators[i];
            if outcome.is_ok() {
                outcome = if acc_name != name {
                    Err(Error::invalid(format!("accumulator {acc_name} does not match {name}")))
                } else {
                    rmsprop_update(w, &grads[i], acc, self.learning_rate, self.decay, self.epsilon)
                };
            }
            i += 1;
        });
        outcome
    }
}

/// Orthogonal kernels (per gate for GRU tensors), zero biases.
pub fn init_model(spec: &TopologySpec, seed: u64) -> Result<Model> {
    let mut model = Model::zeros(spec)?;
    let mut rng = Rng::new(seed);
    let mut outcome = Ok(());
    model.for_each_param_mut(|name, t| {
        if outcome.is_err() || name.ends_with(".bias") {
            return;
        }
        let shape = t.shape().to_vec();
        let gated = name.ends_with(".input") || name.ends_with(".state");
        let drawn = if gated {
            let mut gate_shape = shape.clone();
            gate_shape[0] /= 3;
            (0..3)
                .map(|_| orthogonal_kernel::<f32>(&gate_shape, &mut rng).map(Tensor::into_data))
                .collect::<Result<Vec<_>>>()
                .and_then(|blocks| Tensor::new(shape, blocks.concat()))
        } else {
            orthogonal_kernel::<f32>(&shape, &mut rng)
        };
        match drawn {
            Ok(v) => *t = v,
            Err(e) => outcome = Err(e),
        }
    });
    outcome.map(|_| model)
}

/// Encode the first `g` frames of `window` (`[b, g + p, c, h, w]`), predict
/// `p` frames and return the L1 loss against the remaining frames.
pub fn sequence_loss<T: Element>(
    tape: &Tape<T>,
    stack: &FoldedStack<Var<T>>,
    window: &Tensor<T>,
    g: usize,
    p: usize,
) -> Result<Var<T>> {
    let frames = split_time(window)?;
    if frames.len() != g + p {
        return Err(Error::invalid(format!(
            "window has {} frames, schedule needs g + p = {}",
            frames.len(),
            g + p
        )));
    }
    let (preds, _) = stack.run_sequence(tape, &frames[..g], p)?;
    l1_loss(tape, &preds, &frames[g..])
}

/// Loss and parameter gradients (parameter order) for one window.
pub fn loss_and_gradients<T: Element>(
    model: &Model<T>,
    window: &Tensor<T>,
    g: usize,
    p: usize,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let stack = model.bind(&tape, true);
    let loss = sequence_loss(&tape, &stack, window, g, p)?;
    let grads = tape.backward(&loss)?;
    let mut out = Vec::new();
    stack.map_params(|_, v| out.push(grads.wrt(v)));
    Ok((loss.value().data()[0].as_f64(), out))
}

/// Model plus optimizer plus the step counter that drives batch sampling.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: RmsProp,
    pub config: TrainConfig,
    pub step: u64,
}

impl Trainer {
    pub fn new(spec: &TopologySpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = init_model(spec, config.seed)?;
        let optimizer = RmsProp::new(&model, &config);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    /// Continue from a checkpoint. Optimizer hyperparameters and the seed
    /// come from the checkpoint; the schedule (`g`, `p`, batch) from `config`.
    pub fn resume(checkpoint: Checkpoint, mut config: TrainConfig) -> Result<Self> {
        config.seed = checkpoint.seed;
        config.learning_rate = checkpoint.optimizer.learning_rate;
        config.rmsprop_decay = checkpoint.optimizer.decay;
        config.rmsprop_epsilon = checkpoint.optimizer.epsilon;
        config.validate()?;
        Ok(Trainer {
            model: checkpoint.model,
            optimizer: checkpoint.optimizer,
            config,
            step: checkpoint.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            seed: self.config.seed,
        }
    }

    fn check_data(&self, data: &SequenceBatch) -> Result<()> {
        let need = self.config.g + self.config.p;
        if data.frames() < need {
            return Err(Error::invalid(format!(
                "sequences have {} frames, training needs g + p = {need}",
                data.frames()
            )));
        }
        let img = self.model.spec.image;
        if data.shape()[2..] != [img.channels, img.height, img.width] {
            return Err(Error::ShapeMismatch {
                op: "training data",
                left: data.shape()[2..].to_vec(),
                right: vec![img.channels, img.height, img.width],
            });
        }
        Ok(())
    }

    /// `(sequence, offset)` pairs for the current step: sequences with
    /// replacement, each with a uniform start offset.
    pub fn sample_windows(&self, data: &SequenceBatch) -> Vec<(usize, usize)> {
        let mut rng = Rng::stream(self.config.seed, SAMPLING_STREAM_BASE + self.step);
        let span = data.frames() - (self.config.g + self.config.p) + 1;
        (0..self.config.batch_size)
            .map(|_| (rng.below(data.len()), rng.below(span)))
            .collect()
    }

    /// One optimisation step; returns the loss before the update.
    pub fn train_step(&mut self, data: &SequenceBatch) -> Result<f64> {
        self.check_data(data)?;
        let windows = self.sample_windows(data);
        let batch = data.gather(&windows, self.config.g + self.config.p)?;
        let (loss, grads) = loss_and_gradients(&self.model, &batch, self.config.g, self.config.p)?;
        if !loss.is_finite() {
            return Err(Error::invalid(format!("loss became {loss} at step {}", self.step)));
        }
        self.optimizer.step(&mut self.model, &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// `steps` optimisation steps; `on_step` sees `(step, loss)` after each.
    pub fn train(
        &mut self,
        data: &SequenceBatch,
        steps: usize,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<Vec<f64>> {
        self.check_data(data)?;
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let loss = self.train_step(data)?;
            on_step(self.step, loss);
            history.push(loss);
        }
        Ok(history)
    }
}

/// Initialise from `spec` and run `cfg.steps` steps.
pub fn train(spec: &TopologySpec, data: &SequenceBatch, cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    let mut trainer = Trainer::new(spec, cfg.clone())?;
    let history = trainer.train(data, cfg.steps, |_, _| {})?;
    Ok((trainer.model, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: RmsProp,
    pub step: u64,
    pub seed: u64,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_checkpoint(&mut w, checkpoint)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Layout: magic, version, topology text, parameter records, optimizer
/// hyperparameters and accumulator records, then seed and step.
pub fn encode_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<Le>(CHECKPOINT_VERSION)?;
    binio::write_string(w, &config::topology_to_text(&ck.model.spec))?;

    let mut params = Vec::new();
    ck.model.map_params(|name, t| params.push((name.to_string(), t.clone())));
    w.write_u32::<Le>(params.len() as u32)?;
    for (name, t) in &params {
        binio::write_named_tensor(w, name, t)?;
    }

    let opt = &ck.optimizer;
    w.write_f64::<Le>(opt.learning_rate)?;
    w.write_f64::<Le>(opt.decay)?;
    w.write_f64::<Le>(opt.epsilon)?;
    w.write_u32::<Le>(opt.accumulators.len() as u32)?;
    for (name, t) in &opt.accumulators {
        binio::write_named_tensor(w, name, t)?;
    }

    w.write_u64::<Le>(ck.seed)?;
    w.write_u64::<Le>(ck.step)?;
    Ok(())
}

fn read_records(r: &mut impl Read, expected: &[(String, Vec<usize>)], what: &str) -> Result<Vec<Tensor<f32>>> {
    let count = binio::read_u32(r, what)? as usize;
    if count != expected.len() {
        return Err(Error::invalid(format!(
            "{what}: file holds {count} tensors, topology needs {}",
            expected.len()
        )));
    }
    expected
        .iter()
        .map(|(name, shape)| {
            let (found, t) = binio::read_named_tensor(r)?;
            if &found != name || t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "{what}: expected {name} {shape:?}, found {found} {:?}",
                    t.shape()
                )));
            }
            Ok(t)
        })
        .collect()
}

pub fn decode_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    binio::expect_magic(r, CHECKPOINT_MAGIC)?;
    binio::expect_version(r, CHECKPOINT_VERSION)?;
    let spec = config::topology_from_text(&binio::read_string(r, "topology")?)?;
    let mut model = Model::zeros(&spec)?;
    let mut layout = Vec::new();
    model.map_params(|name, t| layout.push((name.to_string(), t.shape().to_vec())));

    let mut params = read_records(r, &layout, "parameters")?.into_iter();
    model.for_each_param_mut(|_, t| *t = params.next().expect("count checked"));

    let learning_rate = binio::read_f64(r, "learning rate")?;
    let decay = binio::read_f64(r, "decay")?;
    let epsilon = binio::read_f64(r, "epsilon")?;
    let accumulators = layout
        .iter()
        .map(|(n, _)| n.clone())
        .zip(read_records(r, &layout, "accumulators")?)
        .collect();

    let seed = binio::read_u64(r, "seed")?;
    let step = binio::read_u64(r, "step")?;
    Ok(Checkpoint {
        model,
        optimizer: RmsProp {
            learning_rate,
            decay,
            epsilon,
            accumulators,
        },
        step,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_sequences, SpriteConfig};
    use crate::folded::{Activation, ConvSpec, ImageShape, LayerSpec};
    use crate::tensor::grad_check;

    fn toy_spec() -> TopologySpec {
        TopologySpec {
            pre_convs: vec![ConvSpec {
                channels: 2,
                kernel: 3,
                activation: Activation::Tanh,
            }],
            layers: vec![
                LayerSpec {
                    channels: 3,
                    kernel: 3,
                    pooled: true,
                },
                LayerSpec {
                    channels: 3,
                    kernel: 1,
                    pooled: false,
                },
            ],
            image: ImageShape {
                channels: 1,
                height: 4,
                width: 4,
            },
            output_activation: Activation::Sigmoid,
        }
    }

    fn t(data: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss_value(&t(&[0.0, 1.0]), &t(&[1.0, 1.0])).unwrap(), 0.5);
        assert_eq!(l1_loss_value(&t(&[0.25, 0.75]), &t(&[0.25, 0.75])).unwrap(), 0.0);
        assert_eq!(l1_loss_value(&t(&[0.75, 1.0]), &t(&[0.25, 0.5])).unwrap(), 0.5);
        assert!(l1_loss_value(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());

        let tape = Tape::<f32>::new();
        let p = [Var::constant(t(&[0.0, 1.0]))];
        let q = [Var::constant(t(&[1.0, 1.0]))];
        assert_eq!(l1_loss(&tape, &p, &q).unwrap().value().data(), &[0.5]);
    }

    #[test]
    fn rmsprop_examples() {
        let mut w = t(&[1.0, 2.0]);
        let mut acc = t(&[0.5, 0.1]);
        rmsprop_update(&mut w, &t(&[0.0, 0.0]), &mut acc, 1e-3, 0.9, 1e-8).unwrap();
        assert_eq!(w, t(&[1.0, 2.0]));
        assert!((acc.data()[0] - 0.45).abs() < 1e-7 && (acc.data()[1] - 0.09).abs() < 1e-8);

        let mut w = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut acc = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::<f64>::new(vec![2], vec![3.0, -3.0]).unwrap();
        rmsprop_update(&mut w, &g, &mut acc, 1e-4, 0.9, 1e-8).unwrap();
        assert!((acc.data()[0] - 0.9).abs() < 1e-12);
        let expected = -1e-4 * 3.0 / (0.1f64.sqrt() * 3.0 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert_eq!(w.data()[1], -w.data()[0]);
        assert!((w.data()[0] + 1e-4 / 0.1f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn init_is_orthogonal_with_zero_biases() {
        let spec = toy_spec();
        let model = init_model(&spec, 7).unwrap();
        model.map_params(|name, t| {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
                return;
            }
            let blocks = if name.ends_with(".input") || name.ends_with(".state") { 3 } else { 1 };
            let rows = t.shape()[0] / blocks;
            let cols = t.len() / t.shape()[0];
            for b in 0..blocks {
                let m = &t.data()[b * rows * cols..(b + 1) * rows * cols];
                // Gram matrix of the shorter side must be the identity.
                let (n, inner, stride_a, stride_b) = if rows <= cols {
                    (rows, cols, cols, 1)
                } else {
                    (cols, rows, 1, cols)
                };
                for i in 0..n {
                    for j in 0..n {
                        let dot: f32 = (0..inner)
                            .map(|k| m[i * stride_a + k * stride_b] * m[j * stride_a + k * stride_b])
                            .sum();
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((dot - want).abs() < 1e-5, "{name} gate {b}: {dot}");
                    }
                }
            }
        });
        assert_eq!(model, init_model(&spec, 7).unwrap());
        assert_ne!(model, init_model(&spec, 8).unwrap());
    }

    #[test]
    fn full_unroll_matches_finite_differences() {
        let spec = toy_spec();
        let model = init_model(&spec, 3).unwrap().cast::<f64>();
        let mut rng = Rng::new(11);
        let window = Tensor::<f64>::rand_uniform(&[1, 4, 1, 4, 4], 0.0, 1.0, &mut rng);
        let mut inputs = Vec::new();
        model.map_params(|_, t| inputs.push(t.clone()));
        let err = grad_check(
            |tape, vars| {
                let mut i = 0;
                let stack = model.map_params(|_, _| {
                    i += 1;
                    vars[i - 1].clone()
                });
                sequence_loss(tape, &stack, &window, 2, 2)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn gradient_reaches_every_weight() {
        let spec = toy_spec();
        let mut rng = Rng::new(5);
        let model = init_model(&spec, 5).unwrap().cast::<f64>();
        let window = Tensor::<f64>::rand_uniform(&[2, 3, 1, 4, 4], 0.0, 1.0, &mut rng);
        let names = model.param_names();
        let weight = |n: &String| !n.ends_with(".bias");

        // Two encoded frames: every kernel lies on some path to the loss.
        let (_, grads) = loss_and_gradients(&model, &window, 2, 1).unwrap();
        for (n, g) in names.iter().zip(&grads) {
            if weight(n) {
                assert!(g.max_abs() > 0.0, "{n} received no gradient");
            }
        }

        // With one encoded frame from zero states, the first layer's forward
        // recurrent kernel only ever multiplies a zero state.
        let short = Tensor::<f64>::rand_uniform(&[2, 2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let (_, grads) = loss_and_gradients(&model, &short, 1, 1).unwrap();
        for (n, g) in names.iter().zip(&grads) {
            if weight(n) {
                assert_eq!(g.max_abs() == 0.0, n == "layer.1.fwd.state", "{n}");
            }
        }
    }

    fn tiny_data() -> SequenceBatch {
        let cfg = SpriteConfig {
            height: 8,
            width: 8,
            frames: 6,
            source: crate::data::SpriteSource::Block { size: 2 },
            max_speed: 1,
            ..SpriteConfig::default()
        };
        gen_sequences(&cfg, 3).unwrap()
    }

    fn small_trainer() -> Trainer {
        let mut spec = toy_spec();
        spec.image.height = 8;
        spec.image.width = 8;
        let cfg = TrainConfig {
            g: 2,
            p: 2,
            batch_size: 2,
            steps: 3,
            learning_rate: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        Trainer::new(&spec, cfg).unwrap()
    }

    #[test]
    fn training_is_reproducible() {
        let data = tiny_data();
        let mut a = small_trainer();
        let mut b = small_trainer();
        let ha = a.train(&data, 3, |_, _| {}).unwrap();
        assert_eq!(ha.len(), 3);
        assert_eq!(ha, b.train(&data, 3, |_, _| {}).unwrap());
        assert_eq!(a.model, b.model);
        assert_eq!(a.step, 3);
    }

    #[test]
    fn short_sequences_rejected_before_update() {
        let mut trainer = small_trainer();
        trainer.config.g = 5;
        let before = trainer.model.clone();
        assert!(trainer.train(&tiny_data(), 1, |_, _| {}).is_err());
        assert_eq!(trainer.model, before);
        assert_eq!(trainer.step, 0);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let data = tiny_data();
        let mut trainer = small_trainer();
        trainer.train(&data, 2, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        save_checkpoint(&path, &trainer.checkpoint()).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, trainer.checkpoint());

        let mut resumed = Trainer::resume(loaded, trainer.config.clone()).unwrap();
        let l1 = trainer.train_step(&data).unwrap();
        let l2 = resumed.train_step(&data).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(trainer.model, resumed.model);
        assert_eq!(trainer.optimizer, resumed.optimizer);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));
        bytes[1] ^= 0xff;
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated(_))));
    }
}
