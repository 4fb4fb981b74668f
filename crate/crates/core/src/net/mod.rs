//! The two-tower patch matcher: one convolutional feature extractor per
//! imaging domain, two fusion operations and a classification head for each.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, OPTIMIZER_PREFIX};
pub use config::{NetConfig, REFERENCE_TRAINABLE_PARAMS};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Linear, Mode, Module, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::{BatchMoments, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Rgb,
    Lwir,
}

impl Domain {
    pub fn prefix(self) -> &'static str {
        match self {
            Domain::Rgb => "rgb",
            Domain::Lwir => "lwir",
        }
    }
}

/// Which classification heads take part in training and prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    #[default]
    Both,
    Corr,
    Concat,
}

impl HeadMode {
    pub const ALL: [HeadMode; 3] = [HeadMode::Both, HeadMode::Corr, HeadMode::Concat];

    pub fn uses_corr(self) -> bool {
        self != HeadMode::Concat
    }

    pub fn uses_concat(self) -> bool {
        self != HeadMode::Corr
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Both => "both",
            HeadMode::Corr => "corr",
            HeadMode::Concat => "concat",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "both" => Ok(HeadMode::Both),
            "corr" | "correlation" => Ok(HeadMode::Corr),
            "concat" | "concatenation" => Ok(HeadMode::Concat),
            other => Err(Error::Config(format!("unknown head mode {other:?} (expected both, corr or concat)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Element-wise product; keeps the feature width.
    Correlation,
    /// `[f_rgb, f_lwir]`, RGB first; doubles the feature width.
    Concatenation,
}

impl Fusion {
    pub fn prefix(self) -> &'static str {
        match self {
            Fusion::Correlation => "corr",
            Fusion::Concatenation => "concat",
        }
    }

    pub fn width(self, feature_dim: usize) -> usize {
        match self {
            Fusion::Correlation => feature_dim,
            Fusion::Concatenation => 2 * feature_dim,
        }
    }

    /// Fuses `[b, F]` feature batches on a tape.
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, f_rgb: Var, f_lwir: Var) -> Result<Var> {
        match self {
            Fusion::Correlation => tape.mul(f_rgb, f_lwir),
            Fusion::Concatenation => tape.concat(f_rgb, f_lwir, tape.shape(f_rgb).len().saturating_sub(1)),
        }
    }
}

pub fn fuse_correlation<T: Scalar>(f_rgb: &[T], f_lwir: &[T]) -> Result<Vec<T>> {
    if f_rgb.len() != f_lwir.len() {
        return Err(Error::LengthMismatch { left: f_rgb.len(), right: f_lwir.len() });
    }
    Ok(f_rgb.iter().zip(f_lwir).map(|(a, b)| *a * *b).collect())
}

pub fn fuse_concatenation<T: Scalar>(f_rgb: &[T], f_lwir: &[T]) -> Result<Vec<T>> {
    if f_rgb.len() != f_lwir.len() {
        return Err(Error::LengthMismatch { left: f_rgb.len(), right: f_lwir.len() });
    }
    let mut out = Vec::with_capacity(2 * f_rgb.len());
    out.extend_from_slice(f_rgb);
    out.extend_from_slice(f_lwir);
    Ok(out)
}

/// The convolutional feature extractor of one domain.
#[derive(Clone, Debug)]
pub struct DomainTower<T> {
    domain: Domain,
    patch: usize,
    pub convs: Vec<Conv2d<T>>,
    /// One per conv except the last.
    pub norms: Vec<BatchNorm<T>>,
}

impl<T: Scalar> DomainTower<T> {
    pub fn new(domain: Domain, config: &NetConfig) -> Self {
        let p = domain.prefix();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = config.input_channels;
        let last = config.channels.len() - 1;
        for (i, (c, k)) in config.channels.iter().zip(&config.kernels).enumerate() {
            convs.push(Conv2d::new(&format!("{p}.conv{}", i + 1), c_in, *c, *k));
            if i < last {
                norms.push(BatchNorm::with_hyper(&format!("{p}.bn{}", i + 1), *c, config.bn_eps, config.bn_momentum));
            }
            c_in = *c;
        }
        Self { domain, patch: config.patch, convs, norms }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Runs the conv stack on `[b, c, h, w]`, returning `[b, F, h - s, w - s]`
    /// and, in train mode, the batch moments of every BN layer.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Vec<BatchMoments<T>>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                op: "tower",
                msg: format!("expected [batch, channels, height, width], got {shape:?}"),
            });
        }
        if shape[2] < self.patch || shape[3] < self.patch {
            return Err(Error::InputTooSmall {
                layer: format!("{} tower", self.domain.prefix()),
                height: shape[2],
                width: shape[3],
                kernel: self.patch,
            });
        }
        let mut h = x;
        let mut moments = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h)?;
            if let Some(bn) = self.norms.get(i) {
                let (y, m) = bn.forward(tape, h, mode)?;
                moments.extend(m);
                h = tape.relu(y)?;
            }
        }
        Ok((h, moments))
    }

    /// Tower output flattened to `[b, F]`; the input must be exactly one patch wide.
    pub fn features(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Vec<BatchMoments<T>>)> {
        let (y, m) = self.forward(tape, x, mode)?;
        let s = tape.shape(y).to_vec();
        if s[2] != 1 || s[3] != 1 {
            return Err(Error::InvalidShape {
                op: "features",
                msg: format!("feature map is {}x{}, expected 1x1 (use forward for widened inputs)", s[2], s[3]),
            });
        }
        Ok((tape.reshape(y, &[s[0], s[1]])?, m))
    }

    /// Eval-mode feature map of a detached input.
    pub fn feature_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (y, _) = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Eval-mode `[b, F]` features of 1-patch inputs.
    pub fn extract_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (y, _) = self.features(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    pub fn commit(&mut self, moments: &[BatchMoments<T>]) -> Result<()> {
        if moments.len() != self.norms.len() {
            return Err(Error::LengthMismatch { left: self.norms.len(), right: moments.len() });
        }
        for (bn, m) in self.norms.iter_mut().zip(moments) {
            bn.update_running(m);
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for DomainTower<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.visit(f);
            if let Some(bn) = self.norms.get(i) {
                bn.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_mut(f);
            if let Some(bn) = self.norms.get_mut(i) {
                bn.visit_mut(f);
            }
        }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.init(rng);
            if let Some(bn) = self.norms.get_mut(i) {
                bn.init(rng);
            }
        }
    }
}

/// fc1 -> ReLU -> fc2 -> ReLU -> fc3 -> softmax. Column 0 of the output is
/// the probability that the two patches match.
#[derive(Clone, Debug)]
pub struct ClassificationHead<T> {
    fusion: Fusion,
    pub fc: [Linear<T>; 3],
}

impl<T: Scalar> ClassificationHead<T> {
    pub fn new(fusion: Fusion, config: &NetConfig) -> Self {
        let p = fusion.prefix();
        let n_in = fusion.width(config.feature_dim());
        let (h1, h2) = (config.head_hidden[0], config.head_hidden[1]);
        Self {
            fusion,
            fc: [
                Linear::new(&format!("{p}.fc1"), n_in, h1),
                Linear::new(&format!("{p}.fc2"), h1, h2),
                Linear::new(&format!("{p}.fc3"), h2, 2),
            ],
        }
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    pub fn in_features(&self) -> usize {
        self.fc[0].in_features()
    }

    /// `[b, width]` fused features to `[b, 2]` probabilities.
    pub fn forward(&self, tape: &mut Tape<T>, fused: Var) -> Result<Var> {
        let mut h = self.fc[0].forward(tape, fused)?;
        h = tape.relu(h)?;
        h = self.fc[1].forward(tape, h)?;
        h = tape.relu(h)?;
        h = self.fc[2].forward(tape, h)?;
        tape.softmax(h, 1)
    }

    /// `(p_same, p_diff)` for a single fused vector.
    pub fn classify(&self, fused: &[T]) -> Result<(T, T)> {
        if fused.len() != self.in_features() {
            return Err(Error::LengthMismatch { left: self.in_features(), right: fused.len() });
        }
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::new([1, fused.len()], fused.to_vec())?);
        let p = self.forward(&mut tape, x)?;
        let d = tape.value(p).data();
        Ok((d[0], d[1]))
    }
}

impl<T: Scalar> Module<T> for ClassificationHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.fc.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.fc.iter_mut().for_each(|l| l.visit_mut(f));
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.fc.iter_mut().for_each(|l| l.init(rng));
    }
}

/// Batch-norm statistics gathered by one train-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct TowerMoments<T> {
    pub rgb: Vec<BatchMoments<T>>,
    pub lwir: Vec<BatchMoments<T>>,
}

/// Tape handles produced by [`SiameseNet::forward`].
#[derive(Clone, Debug)]
pub struct PairOutput<T> {
    pub f_rgb: Var,
    pub f_lwir: Var,
    /// `[b, 2]` probabilities of the correlation head, when active.
    pub corr: Option<Var>,
    pub concat: Option<Var>,
    pub moments: TowerMoments<T>,
}

/// Per-sample match probabilities of both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores<T> {
    pub corr: Vec<T>,
    pub concat: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SiameseNet<T> {
    config: NetConfig,
    pub rgb: DomainTower<T>,
    pub lwir: DomainTower<T>,
    pub corr_head: ClassificationHead<T>,
    pub concat_head: ClassificationHead<T>,
}

impl<T: Scalar> SiameseNet<T> {
    /// Builds and initializes the model. The trainable parameter count is
    /// checked against the closed form of the configuration.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::uninit(config)?;
        net.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(net)
    }

    /// Builds the model with zero weights and identity batch norms.
    pub fn uninit(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let net = Self {
            rgb: DomainTower::new(Domain::Rgb, &config),
            lwir: DomainTower::new(Domain::Lwir, &config),
            corr_head: ClassificationHead::new(Fusion::Correlation, &config),
            concat_head: ClassificationHead::new(Fusion::Concatenation, &config),
            config,
        };
        assert_eq!(
            net.trainable_count(),
            net.config.expected_trainable_params(),
            "layer construction disagrees with the architecture's parameter count"
        );
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tower(&self, domain: Domain) -> &DomainTower<T> {
        match domain {
            Domain::Rgb => &self.rgb,
            Domain::Lwir => &self.lwir,
        }
    }

    pub fn head(&self, fusion: Fusion) -> &ClassificationHead<T> {
        match fusion {
            Fusion::Correlation => &self.corr_head,
            Fusion::Concatenation => &self.concat_head,
        }
    }

    /// Towers, fusion and the selected heads on `[b, 3, P, P]` patch batches.
    pub fn forward(&self, tape: &mut Tape<T>, rgb: Var, lwir: Var, mode: Mode, heads: HeadMode) -> Result<PairOutput<T>> {
        let (f_rgb, m_rgb) = self.rgb.features(tape, rgb, mode)?;
        let (f_lwir, m_lwir) = self.lwir.features(tape, lwir, mode)?;
        let (corr, concat) = self.classify_features(tape, f_rgb, f_lwir, heads)?;
        Ok(PairOutput { f_rgb, f_lwir, corr, concat, moments: TowerMoments { rgb: m_rgb, lwir: m_lwir } })
    }

    /// Fusion and heads on `[b, F]` feature batches.
    pub fn classify_features(
        &self,
        tape: &mut Tape<T>,
        f_rgb: Var,
        f_lwir: Var,
        heads: HeadMode,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let mut corr = None;
        let mut concat = None;
        if heads.uses_corr() {
            let fused = Fusion::Correlation.apply(tape, f_rgb, f_lwir)?;
            corr = Some(self.corr_head.forward(tape, fused)?);
        }
        if heads.uses_concat() {
            let fused = Fusion::Concatenation.apply(tape, f_rgb, f_lwir)?;
            concat = Some(self.concat_head.forward(tape, fused)?);
        }
        Ok((corr, concat))
    }

    /// Eval-mode match probability of both heads for patch batches.
    pub fn forward_pair(&self, rgb: &Tensor<T>, lwir: &Tensor<T>) -> Result<PairScores<T>> {
        let mut tape = Tape::inference();
        let r = tape.constant(rgb.clone());
        let l = tape.constant(lwir.clone());
        let out = self.forward(&mut tape, r, l, Mode::Eval, HeadMode::Both)?;
        let same = |v: Option<Var>| -> Vec<T> {
            v.map(|v| tape.value(v).data().chunks(2).map(|p| p[0]).collect()).unwrap_or_default()
        };
        Ok(PairScores { corr: same(out.corr), concat: same(out.concat) })
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    pub fn commit_moments(&mut self, m: &TowerMoments<T>) -> Result<()> {
        self.rgb.commit(&m.rgb)?;
        self.lwir.commit(&m.lwir)
    }

    /// Adds the tape's parameter gradients into the model's gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        let mut by_name: HashMap<&str, Vec<Var>> = HashMap::new();
        for (name, var) in tape.params() {
            by_name.entry(name.as_str()).or_default().push(*var);
        }
        let mut err = None;
        self.visit_mut(&mut |name, t, kind| {
            if kind != ParamKind::Trainable || err.is_some() {
                return;
            }
            for v in by_name.get(name).into_iter().flatten() {
                if let Some(g) = tape.grad(*v) {
                    if let Err(e) = t.accumulate_grad(g) {
                        err = Some(e);
                    }
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t, _| t.clear_grad());
    }

    /// Names of every stored tensor (trainable and buffers) in traversal order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _, _| names.push(n.to_string()));
        names
    }

    /// Copies every tensor of `other` with the same name into `self`.
    pub fn load_from<S: Scalar>(&mut self, other: &SiameseNet<S>) -> Result<()> {
        let mut src: HashMap<String, Tensor<T>> = HashMap::new();
        other.visit(&mut |n, t, _| {
            src.insert(n.to_string(), t.cast());
        });
        let mut err = None;
        self.visit_mut(&mut |n, t, _| match src.remove(n) {
            Some(s) if s.shape() == t.shape() => *t = s,
            Some(s) => {
                err.get_or_insert(Error::ShapeMismatch { op: "load", left: t.shape().to_vec(), right: s.shape().to_vec() });
            }
            None => {
                err.get_or_insert(Error::Checkpoint(format!("missing tensor {n}")));
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Same model in another scalar type.
    pub fn cast<S: Scalar>(&self) -> SiameseNet<S> {
        let mut out = SiameseNet::<S>::uninit(self.config.clone()).expect("config was validated at construction");
        out.load_from(self).expect("identical architectures");
        out
    }
}

impl<T: Scalar> Module<T> for SiameseNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.rgb.visit(f);
        self.lwir.visit(f);
        self.corr_head.visit(f);
        self.concat_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.rgb.visit_mut(f);
        self.lwir.visit_mut(f);
        self.corr_head.visit_mut(f);
        self.concat_head.visit_mut(f);
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.rgb.init(rng);
        self.lwir.init(rng);
        self.corr_head.init(rng);
        self.concat_head.init(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> NetConfig {
        NetConfig { channels: vec![3, 4, 5], kernels: vec![3, 3, 2], patch: 6, head_hidden: vec![6, 4], ..NetConfig::reference() }
    }

    fn patches(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([b, 3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn reference_model_has_documented_size() {
        let net = SiameseNet::<f32>::uninit(NetConfig::reference()).unwrap();
        assert_eq!(net.trainable_count(), REFERENCE_TRAINABLE_PARAMS);
        assert_eq!(net.corr_head.in_features(), 256);
        assert_eq!(net.concat_head.in_features(), 512);
        assert_eq!(net.corr_head.fc[2].out_features(), 2);
    }

    #[test]
    fn reference_tower_maps_patch_to_256_features() {
        let net = SiameseNet::<f32>::new(NetConfig::reference(), 1).unwrap();
        let f = net.rgb.extract_features(&patches(1, 36, 36, 2)).unwrap();
        assert_eq!(f.shape(), &[1, 256]);
        let wide = net.lwir.feature_map(&patches(1, 36, 100, 3)).unwrap();
        assert_eq!(wide.shape(), &[1, 256, 1, 65]);
    }

    #[test]
    fn small_inputs_are_rejected() {
        let net = SiameseNet::<f32>::new(tiny(), 1).unwrap();
        assert!(matches!(net.rgb.feature_map(&patches(1, 5, 9, 1)), Err(Error::InputTooSmall { .. })));
        assert!(matches!(net.rgb.feature_map(&patches(1, 9, 5, 1)), Err(Error::InputTooSmall { .. })));
    }

    #[test]
    fn seeds_give_different_features() {
        let x = patches(1, 6, 6, 4);
        let a = SiameseNet::<f32>::new(tiny(), 1).unwrap().rgb.extract_features(&x).unwrap();
        let b = SiameseNet::<f32>::new(tiny(), 2).unwrap().rgb.extract_features(&x).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn towers_do_not_share_parameters() {
        let net = SiameseNet::<f32>::new(tiny(), 5).unwrap();
        let x = patches(2, 6, 6, 6);
        let f_lwir = net.lwir.extract_features(&x).unwrap();
        let f_rgb = net.rgb.extract_features(&x).unwrap();
        let mut poked = net.clone();
        poked.visit_mut(&mut |name, t, kind| {
            if name.starts_with("rgb.") && kind == ParamKind::Trainable {
                t.data_mut().iter_mut().for_each(|v| *v += 0.25);
            }
        });
        assert_eq!(poked.lwir.extract_features(&x).unwrap(), f_lwir);
        assert_ne!(poked.rgb.extract_features(&x).unwrap(), f_rgb);
    }

    #[test]
    fn fusion_identities() {
        let v = [1.5f32, -2.0, 0.25];
        assert_eq!(fuse_correlation(&[1.0; 3], &v).unwrap(), v.to_vec());
        assert_eq!(fuse_correlation(&[1.0f32, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), vec![4.0, 10.0, 18.0]);
        let c = fuse_concatenation(&[1.0f32, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(c, vec![1.0, 2.0, 3.0, 4.0]);
        assert_ne!(fuse_concatenation(&[3.0f32, 4.0], &[1.0, 2.0]).unwrap(), c);
        assert!(fuse_correlation(&[1.0f32], &[1.0, 2.0]).is_err());
        assert!(fuse_concatenation(&[1.0f32], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_head_is_undecided() {
        let head = ClassificationHead::<f32>::new(Fusion::Correlation, &tiny());
        assert_eq!(head.classify(&[0.3; 5]).unwrap(), (0.5, 0.5));
        assert!(head.classify(&[0.3; 4]).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_consistent() {
        let net = SiameseNet::<f32>::new(tiny(), 7).unwrap();
        let (r, l) = (patches(4, 6, 6, 8), patches(4, 6, 6, 9));
        let a = net.forward_pair(&r, &l).unwrap();
        assert_eq!(a, net.forward_pair(&r, &l).unwrap());
        for i in 0..4 {
            let one = net.forward_pair(&r.narrow_batch(i, 1).unwrap(), &l.narrow_batch(i, 1).unwrap()).unwrap();
            assert!((one.corr[0] - a.corr[i]).abs() < 1e-6);
            assert!((one.concat[0] - a.concat[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_land_on_named_parameters() {
        let mut net = SiameseNet::<f32>::new(tiny(), 3).unwrap();
        let mut tape = Tape::new();
        let r = tape.constant(patches(4, 6, 6, 1));
        let l = tape.constant(patches(4, 6, 6, 2));
        let out = net.forward(&mut tape, r, l, Mode::Train, HeadMode::Corr).unwrap();
        let loss = tape.cross_entropy(out.corr.unwrap(), &[0, 1, 0, 1], 1e-7).unwrap();
        tape.backward(loss).unwrap();
        net.accumulate_grads(&tape).unwrap();
        let mut with_grad = Vec::new();
        net.visit(&mut |n, t, _| {
            if t.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)) {
                with_grad.push(n.to_string());
            }
        });
        assert!(with_grad.iter().any(|n| n.starts_with("rgb.")));
        assert!(with_grad.iter().any(|n| n.starts_with("lwir.")));
        assert!(with_grad.iter().any(|n| n.starts_with("corr.")));
        assert!(!with_grad.iter().any(|n| n.starts_with("concat.")));
        net.commit_moments(&out.moments).unwrap();
        assert_ne!(net.rgb.norms[0].running_mean.data(), &[0.0; 3]);
    }

    #[test]
    fn cast_round_trips() {
        let net = SiameseNet::<f32>::new(tiny(), 11).unwrap();
        let back: SiameseNet<f32> = net.cast::<f64>().cast();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        net.visit(&mut |_, t, _| a.push(t.clone()));
        back.visit(&mut |_, t, _| b.push(t.clone()));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn correlation_is_symmetric(v in proptest::collection::vec((-4.0f32..4.0, -4.0f32..4.0), 0..64)) {
            let (a, b): (Vec<f32>, Vec<f32>) = v.into_iter().unzip();
            prop_assert_eq!(fuse_correlation(&a, &b).unwrap(), fuse_correlation(&b, &a).unwrap());
            let c = fuse_concatenation(&a, &b).unwrap();
            prop_assert_eq!(&c[..a.len()], &a[..]);
            prop_assert_eq!(&c[a.len()..], &b[..]);
        }

        #[test]
        fn heads_emit_distributions(seed in any::<u64>(), scale in 0.1f32..20.0) {
            let net = SiameseNet::<f32>::new(tiny(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            for head in [&net.corr_head, &net.concat_head] {
                let x: Vec<f32> = (0..head.in_features()).map(|_| rng.gen_range(-scale..scale)).collect();
                let (p, q) = head.classify(&x).unwrap();
                prop_assert!((p + q - 1.0).abs() <= 1e-5);
                prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q));
            }
        }
    }
}
