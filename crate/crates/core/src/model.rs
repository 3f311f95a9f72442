//! SqueezeNet-variant classifier for 64x64 single-cell patches.
//!
//! Layer sequence: 7x7/2 conv (96) -> maxpool -> fire x3 -> maxpool ->
//! fire x4 -> maxpool -> fire -> classifier, where the classifier is
//! dropout -> bias-free 1x1 conv (512 -> heads) -> sigmoid/softmax ->
//! global average pool. With three input channels and one head the network
//! has 735,936 trainable parameters.

use afcyte_tensor::{Scalar, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng;

pub const PATCH_SIZE: usize = 64;
pub const STEM_CHANNELS: usize = 96;
pub const STEM_KERNEL: usize = 7;
pub const STEM_STRIDE: usize = 2;
pub const STEM_PADDING: usize = 3;
pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;
pub const FIRE_COUNT: usize = 8;
/// Std of the normal init used for the classifier conv.
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FireConfig {
    pub in_channels: usize,
    pub squeeze: usize,
    pub expand1x1: usize,
    pub expand3x3: usize,
}

impl FireConfig {
    pub const fn new(in_channels: usize, squeeze: usize, expand1x1: usize, expand3x3: usize) -> Self {
        Self {
            in_channels,
            squeeze,
            expand1x1,
            expand3x3,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1x1 + self.expand3x3
    }

    pub fn param_count(&self) -> usize {
        let s = self.squeeze;
        (self.in_channels * s + s) + (s * self.expand1x1 + self.expand1x1) + (s * self.expand3x3 * 9 + self.expand3x3)
    }
}

/// Fire channel ladder; the unique configuration reproducing the per-block
/// parameter counts 11,920 / 12,432 / 45,344 / 49,440 / 104,880 / 111,024 /
/// 188,992 / 197,184.
pub const FIRE_LADDER: [FireConfig; FIRE_COUNT] = [
    FireConfig::new(96, 16, 64, 64),
    FireConfig::new(128, 16, 64, 64),
    FireConfig::new(128, 32, 128, 128),
    FireConfig::new(256, 32, 128, 128),
    FireConfig::new(256, 48, 192, 192),
    FireConfig::new(384, 48, 192, 192),
    FireConfig::new(384, 64, 256, 256),
    FireConfig::new(512, 64, 256, 256),
];

/// Fire indices (0-based) after which a max-pool follows.
const POOL_AFTER_FIRE: [usize; 2] = [2, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub num_classes: usize,
    pub fires: Vec<FireConfig>,
    pub dropout: f64,
    /// Per fire module; the stem and classifier are always trainable.
    pub frozen_fire: Vec<bool>,
}

impl ModelSpec {
    pub fn new(input_channels: usize, num_classes: usize) -> Self {
        Self {
            input_channels,
            num_classes,
            fires: FIRE_LADDER.to_vec(),
            dropout: 0.1,
            frozen_fire: vec![false; FIRE_COUNT],
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    /// One sigmoid head for binary tasks, one softmax head per class otherwise.
    pub fn heads(&self) -> usize {
        if self.num_classes <= 2 {
            1
        } else {
            self.num_classes
        }
    }

    pub fn is_binary(&self) -> bool {
        self.heads() == 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_channels == 0 {
            problems.push("input_channels must be >= 1".to_string());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be >= 1".to_string());
        }
        if self.fires.len() != FIRE_COUNT || self.frozen_fire.len() != FIRE_COUNT {
            problems.push(format!("expected {FIRE_COUNT} fire modules"));
        }
        let mut channels = STEM_CHANNELS;
        for (i, f) in self.fires.iter().enumerate() {
            if f.in_channels != channels || f.squeeze == 0 || f.squeeze >= f.in_channels {
                problems.push(format!("fire {i} has inconsistent channels {f:?}"));
            }
            channels = f.out_channels();
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }

    fn final_channels(&self) -> usize {
        self.fires.last().map_or(STEM_CHANNELS, FireConfig::out_channels)
    }
}

/// Parameter-count grouping used by the freeze control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Stem,
    Fire(usize),
    Classifier,
}

impl Block {
    pub fn name(self) -> String {
        match self {
            Block::Stem => "features".into(),
            Block::Fire(i) => format!("fire{}", i + 1),
            Block::Classifier => "classifier".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub block: Block,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    spec: ModelSpec,
    params: Vec<Param<T>>,
}

/// Output of a forward pass recorded on a tape.
pub struct ForwardPass {
    /// `[N, heads]` class probabilities.
    pub output: Var,
    /// One tape variable per model parameter, in parameter order.
    pub params: Vec<Var>,
    /// Named intermediate activations, in layer order.
    pub stages: Vec<(String, Var)>,
}

fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

fn small_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, CLASSIFIER_INIT_STD).expect("positive std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

impl<T: Scalar> Model<T> {
    /// Builds the network from a stream seeded by `seed`: Kaiming-uniform
    /// (fan-in) weights for the feature convs, N(0, 0.01) for the classifier
    /// conv, zero biases.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, "model-init");
        let mut params = Vec::new();
        let mut conv = |name: &str, block: Block, shape: [usize; 4], bias: bool, rng: &mut rng::StreamRng| {
            let tensor = if block == Block::Classifier {
                small_normal(&shape, rng)
            } else {
                kaiming_uniform(&shape, rng)
            };
            params.push(Param {
                name: format!("{name}.weight"),
                block,
                tensor,
            });
            if bias {
                params.push(Param {
                    name: format!("{name}.bias"),
                    block,
                    tensor: Tensor::zeros(&[shape[0]]),
                });
            }
        };
        conv(
            "features.conv",
            Block::Stem,
            [STEM_CHANNELS, spec.input_channels, STEM_KERNEL, STEM_KERNEL],
            true,
            &mut rng,
        );
        for (i, f) in spec.fires.iter().enumerate() {
            let b = Block::Fire(i);
            let base = format!("fire{}", i + 1);
            conv(&format!("{base}.squeeze"), b, [f.squeeze, f.in_channels, 1, 1], true, &mut rng);
            conv(&format!("{base}.expand1x1"), b, [f.expand1x1, f.squeeze, 1, 1], true, &mut rng);
            conv(&format!("{base}.expand3x3"), b, [f.expand3x3, f.squeeze, 3, 3], true, &mut rng);
        }
        conv(
            "classifier.conv",
            Block::Classifier,
            [spec.heads(), spec.final_channels(), 1, 1],
            false,
            &mut rng,
        );
        let mut model = Self { spec, params };
        model.apply_freeze();
        Ok(model)
    }

    /// Assembles a model from existing parameters (e.g. a checkpoint). The
    /// parameter list must match what [`Model::build`] would create.
    pub fn from_parts(spec: ModelSpec, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let template = Model::<T>::build(spec.clone(), 0)?;
        if template.params.len() != tensors.len() {
            return Err(Error::format(
                "model",
                format!("expected {} tensors, got {}", template.params.len(), tensors.len()),
            ));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for (p, t) in template.params.into_iter().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::format(
                    "model",
                    format!("{} has shape {:?}, expected {:?}", p.name, t.shape(), p.tensor.shape()),
                ));
            }
            params.push(Param { tensor: t, ..p });
        }
        let mut model = Self { spec, params };
        model.apply_freeze();
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.params.iter().map(|p| &p.tensor).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.tensor).collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.tensor.numel()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    block: p.block,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    fn apply_freeze(&mut self) {
        let frozen = self.spec.frozen_fire.clone();
        for p in &mut self.params {
            let trainable = match p.block {
                Block::Fire(i) => !frozen[i],
                _ => true,
            };
            p.tensor.set_requires_grad(trainable);
        }
    }

    /// Makes the first `k` fire modules trainable and freezes the rest.
    /// Returns the resulting trainable-parameter count.
    pub fn freeze_prefix(&mut self, k: usize) -> Result<usize> {
        if k > FIRE_COUNT {
            return Err(Error::Parameter(format!("unfrozen fire count {k} outside 0..={FIRE_COUNT}")));
        }
        self.spec.frozen_fire = (0..FIRE_COUNT).map(|i| i >= k).collect();
        self.apply_freeze();
        Ok(self.trainable_params())
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Parameter count per block, in layer order.
    pub fn block_params(&self) -> Vec<(Block, usize)> {
        let mut out: Vec<(Block, usize)> = Vec::new();
        for p in &self.params {
            match out.last_mut() {
                Some((b, n)) if *b == p.block => *n += p.tensor.numel(),
                _ => out.push((p.block, p.tensor.numel())),
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records the network on `tape`. `input` must be `[N, C, 64, 64]`.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, input: Var, training: bool, rng: &mut R) -> Result<ForwardPass> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.input_channels || shape[2] != PATCH_SIZE || shape[3] != PATCH_SIZE {
            return Err(Error::Tensor(TensorError::Dimension {
                op: "input stage",
                lhs: shape,
                rhs: vec![0, self.spec.input_channels, PATCH_SIZE, PATCH_SIZE],
            }));
        }
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        let mut stages = Vec::new();
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            vars[next - 1]
        };

        let (w, b) = (take(), take());
        let x = tape.conv2d(input, w, Some(b), STEM_STRIDE, STEM_PADDING)?;
        let mut x = tape.relu(x);
        stages.push(("features".to_string(), x));
        x = tape.max_pool2d(x, POOL_KERNEL, POOL_STRIDE, true)?;
        stages.push(("maxpool1".to_string(), x));
        let mut pools = 1;
        for i in 0..self.spec.fires.len() {
            let (sw, sb, e1w, e1b, e3w, e3b) = (take(), take(), take(), take(), take(), take());
            let s = tape.conv2d(x, sw, Some(sb), 1, 0)?;
            let s = tape.relu(s);
            let e1 = tape.conv2d(s, e1w, Some(e1b), 1, 0)?;
            let e1 = tape.relu(e1);
            let e3 = tape.conv2d(s, e3w, Some(e3b), 1, 1)?;
            let e3 = tape.relu(e3);
            x = tape.concat_channels(&[e1, e3])?;
            stages.push((format!("fire{}", i + 1), x));
            if POOL_AFTER_FIRE.contains(&i) {
                pools += 1;
                x = tape.max_pool2d(x, POOL_KERNEL, POOL_STRIDE, true)?;
                stages.push((format!("maxpool{pools}"), x));
            }
        }
        let x = tape.dropout(x, self.spec.dropout, training, rng)?;
        let logits = tape.conv2d(x, take(), None, 1, 0)?;
        let act = if self.spec.is_binary() {
            tape.sigmoid(logits)
        } else {
            tape.softmax(logits)?
        };
        let pooled = tape.adaptive_avg_pool2d(act)?;
        let n = shape[0];
        let output = tape.reshape(pooled, &[n, self.spec.heads()])?;
        stages.push(("classifier".to_string(), pooled));
        Ok(ForwardPass {
            output,
            params: vars,
            stages,
        })
    }

    /// Eval-mode forward without keeping the tape; returns `[N, heads]`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone().with_requires_grad(false));
        let mut unused = rng::seeded(0);
        let fw = self.forward(&mut tape, x, false, &mut unused)?;
        Ok(tape.value(fw.output).clone())
    }

    /// Copies gradients recorded on `tape` into the parameters.
    pub fn collect_grads(&mut self, tape: &Tape<T>, pass: &ForwardPass) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&pass.params) {
            p.tensor.zero_grad();
            if p.tensor.requires_grad() {
                tape.write_grad(v, &mut p.tensor)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_counts_match_block_table() {
        let want = [11_920, 12_432, 45_344, 49_440, 104_880, 111_024, 188_992, 197_184];
        for (f, w) in FIRE_LADDER.iter().zip(want) {
            assert_eq!(f.param_count(), w);
        }
    }

    #[test]
    fn three_channel_binary_total() {
        let m = Model::<f32>::build(ModelSpec::new(3, 2), 1).unwrap();
        assert_eq!(m.total_params(), 735_936);
        assert_eq!(m.trainable_params(), 735_936);
        let blocks = m.block_params();
        assert_eq!(blocks[0], (Block::Stem, 14_208));
        assert_eq!(blocks[9], (Block::Classifier, 512));
    }

    #[test]
    fn single_channel_stem_shrinks() {
        let m = Model::<f32>::build(ModelSpec::new(1, 2), 1).unwrap();
        assert_eq!(m.total_params(), 735_936 - 2 * 96 * 49);
        assert_eq!(m.total_params(), 726_528);
    }

    #[test]
    fn freeze_prefix_counts() {
        let mut m = Model::<f32>::build(ModelSpec::new(3, 2), 1).unwrap();
        assert_eq!(m.freeze_prefix(0).unwrap(), 14_720);
        assert_eq!(m.freeze_prefix(1).unwrap(), 26_640);
        assert_eq!(m.freeze_prefix(8).unwrap(), 735_936);
        assert!(m.freeze_prefix(9).is_err());
        let counts: Vec<usize> = (0..=8).map(|k| m.freeze_prefix(k).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn wrong_input_size_names_stage() {
        let m = Model::<f32>::build(ModelSpec::new(3, 2), 1).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 3, 32, 32])).unwrap_err();
        assert!(err.to_string().contains("input stage"));
    }

    #[test]
    fn multiclass_scores_sum_to_one() {
        let m = Model::<f32>::build(ModelSpec::new(3, 6), 4).unwrap();
        let x = Tensor::from_vec(&[2, 3, 64, 64], (0..2 * 3 * 4096).map(|i| ((i % 97) as f32) / 50.0 - 1.0).collect()).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
        for row in y.data().chunks(6) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn stage_shapes_follow_table() {
        let m = Model::<f32>::build(ModelSpec::new(3, 2), 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]));
        let fw = m.forward(&mut tape, x, false, &mut rng::seeded(0)).unwrap();
        let got: Vec<(String, Vec<usize>)> = fw
            .stages
            .iter()
            .map(|(n, v)| (n.clone(), tape.value(*v).shape()[1..].to_vec()))
            .collect();
        let want: [(&str, [usize; 3]); 13] = [
            ("features", [96, 32, 32]),
            ("maxpool1", [96, 16, 16]),
            ("fire1", [128, 16, 16]),
            ("fire2", [128, 16, 16]),
            ("fire3", [256, 16, 16]),
            ("maxpool2", [256, 8, 8]),
            ("fire4", [256, 8, 8]),
            ("fire5", [384, 8, 8]),
            ("fire6", [384, 8, 8]),
            ("fire7", [512, 8, 8]),
            ("maxpool3", [512, 4, 4]),
            ("fire8", [512, 4, 4]),
            ("classifier", [1, 1, 1]),
        ];
        assert_eq!(got.len(), want.len());
        for ((name, shape), (wn, ws)) in got.iter().zip(want) {
            assert_eq!((name.as_str(), shape.as_slice()), (wn, ws.as_slice()));
        }
        assert!(tape.value(fw.output).is_finite());
    }

    #[test]
    fn identical_patches_score_identically() {
        let m = Model::<f32>::build(ModelSpec::new(3, 2), 5).unwrap();
        let patch: Vec<f32> = (0..3 * 4096).map(|i| ((i * 7 % 31) as f32) / 10.0 - 1.5).collect();
        let x = Tensor::from_vec(&[2, 3, 64, 64], [patch.clone(), patch].concat()).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.data()[0].to_bits(), y.data()[1].to_bits());
    }
}
