//! Finite-difference verification of every layer type and of the full
//! two-head pair loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{BatchNorm, Conv2d, Linear, Mode, Module, ParamKind};
use crate::net::{Fusion, HeadMode, NetConfig, SiameseNet};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::{gradient_check, Differentiable, GradCheckOptions, OpKind, Tape, Tensor, Var};
use crate::train::{head_loss_var, PROB_FLOOR};

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Corrupt the backward rule of this operation (mutation testing).
    pub fault: Option<OpKind>,
    /// Number of network parameters probed by the pair-loss check.
    pub slice: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        let g = GradCheckOptions::default();
        Self { seed: 0, step: g.step, tolerance: g.tolerance, fault: None, slice: 10 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Overwrites every tensor of `m` from a generator seeded with `seed`, so
/// the same values come out at every precision. Scales stay near 1.
fn randomize<S: Scalar, M: Module<S>>(m: &mut M, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut(&mut |name, t, kind| {
        let (lo, hi) = match (kind, name.rsplit('.').next()) {
            (ParamKind::Buffer, Some("running_var")) | (_, Some("gamma")) => (0.5, 1.5),
            _ => (-0.5, 0.5),
        };
        for v in t.data_mut() {
            *v = S::of(rng.gen_range(lo..hi));
        }
    });
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { c_in: usize, c_out: usize, kernel: usize },
    BatchNorm { channels: usize },
    Linear { n_in: usize, n_out: usize },
    Relu,
    Softmax,
    Fusion { fusion: Fusion, other: Tensor<f64>, rgb_side: bool },
}

/// `sum(weights * layer(input))`, differentiated with respect to the
/// input or to one named parameter.
struct LayerProbe {
    layer: Layer,
    seed: u64,
    input: Tensor<f64>,
    wrt_param: Option<String>,
    weights: Option<Tensor<f64>>,
    fault: Option<OpKind>,
}

impl LayerProbe {
    fn new(layer: Layer, seed: u64, input: Tensor<f64>, wrt_param: Option<&str>, fault: Option<OpKind>) -> Result<Self> {
        let mut p = Self { layer, seed, input, wrt_param: wrt_param.map(str::to_string), weights: None, fault };
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(p.input.clone());
        let y = p.forward(&mut tape, x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        p.weights = Some(random(tape.shape(y), &mut rng, -1.0, 1.0));
        Ok(p)
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let seed = self.seed;
        match &self.layer {
            Layer::Conv { c_in, c_out, kernel } => {
                let mut l = Conv2d::<S>::new("conv", *c_in, *c_out, *kernel);
                randomize(&mut l, seed);
                l.forward(tape, x)
            }
            Layer::BatchNorm { channels } => {
                let mut l = BatchNorm::<S>::new("bn", *channels);
                randomize(&mut l, seed);
                Ok(l.forward(tape, x, Mode::Train)?.0)
            }
            Layer::Linear { n_in, n_out } => {
                let mut l = Linear::<S>::new("fc", *n_in, *n_out);
                randomize(&mut l, seed);
                l.forward(tape, x)
            }
            Layer::Relu => tape.relu(x),
            Layer::Softmax => tape.softmax(x, 1),
            Layer::Fusion { fusion, other, rgb_side } => {
                let o = tape.constant(other.cast());
                if *rgb_side {
                    fusion.apply(tape, x, o)
                } else {
                    fusion.apply(tape, o, x)
                }
            }
        }
    }

    /// Current value of the differentiated tensor.
    fn point<T: Scalar>(&self) -> Tensor<T> {
        let Some(name) = &self.wrt_param else { return self.input.cast() };
        let mut found = None;
        let mut grab = |n: &str, t: &Tensor<f64>, _: ParamKind| {
            if n == name {
                found = Some(t.cast());
            }
        };
        match &self.layer {
            Layer::Conv { c_in, c_out, kernel } => {
                let mut l = Conv2d::<f64>::new("conv", *c_in, *c_out, *kernel);
                randomize(&mut l, self.seed);
                l.visit(&mut grab);
            }
            Layer::BatchNorm { channels } => {
                let mut l = BatchNorm::<f64>::new("bn", *channels);
                randomize(&mut l, self.seed);
                l.visit(&mut grab);
            }
            Layer::Linear { n_in, n_out } => {
                let mut l = Linear::<f64>::new("fc", *n_in, *n_out);
                randomize(&mut l, self.seed);
                l.visit(&mut grab);
            }
            _ => {}
        }
        found.unwrap_or_else(|| panic!("layer has no parameter {name}"))
    }
}

impl Differentiable for LayerProbe {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        if let Some(k) = self.fault {
            tape.inject_fault(k);
        }
        let input = match &self.wrt_param {
            Some(name) => {
                tape.override_param(name, x)?;
                tape.constant(self.input.cast())
            }
            None => x,
        };
        let y = self.forward(tape, input)?;
        let w = tape.constant(self.weights.as_ref().expect("set at construction").cast());
        let yw = tape.mul(y, w)?;
        tape.sum(yw)
    }
}

/// Head loss through the output softmax: `CE(softmax(logits), targets)`.
struct HeadLossProbe {
    targets: Vec<usize>,
    fault: Option<OpKind>,
}

impl Differentiable for HeadLossProbe {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        if let Some(k) = self.fault {
            tape.inject_fault(k);
        }
        let p = tape.softmax(x, 1)?;
        tape.cross_entropy(p, &self.targets, S::of(PROB_FLOOR))
    }
}

/// Total two-head training loss as a function of a few scattered network
/// parameters; all others stay fixed.
struct PairLossProbe {
    model: SiameseNet<f64>,
    rgb: Tensor<f64>,
    lwir: Tensor<f64>,
    targets: Vec<usize>,
    /// `(tensor name, flat positions, indices into the probe vector)`.
    groups: Vec<(String, Vec<usize>, Vec<usize>)>,
    fault: Option<OpKind>,
}

impl PairLossProbe {
    fn point<T: Scalar>(&self) -> Tensor<T> {
        let n: usize = self.groups.iter().map(|g| g.1.len()).sum();
        let mut x = vec![T::zero(); n];
        self.model.visit(&mut |name, t, _| {
            for (g, pos, ix) in &self.groups {
                if g == name {
                    for (p, i) in pos.iter().zip(ix) {
                        x[*i] = T::of(t.data()[*p]);
                    }
                }
            }
        });
        Tensor::new([1, n], x).expect("sized above")
    }
}

impl Differentiable for PairLossProbe {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        if let Some(k) = self.fault {
            tape.inject_fault(k);
        }
        let model = self.model.cast::<S>();
        let n = tape.shape(x)[1];
        let mut bases = Vec::new();
        model.visit(&mut |name, t, _| {
            if self.groups.iter().any(|g| g.0 == name) {
                bases.push((name.to_string(), t.clone()));
            }
        });
        for (name, base) in bases {
            let (_, pos, ix) = self.groups.iter().find(|g| g.0 == name).expect("collected from groups");
            let mut select = Tensor::<S>::zeros([n, ix.len()]);
            for (col, i) in ix.iter().enumerate() {
                select.data_mut()[i * ix.len() + col] = S::one();
            }
            let sel = tape.constant(select);
            let picked = tape.matmul(x, sel)?;
            let picked = tape.reshape(picked, &[ix.len()])?;
            let b = tape.constant(base);
            let patched = tape.scatter(b, picked, pos)?;
            tape.override_param(&name, patched)?;
        }
        let r = tape.constant(self.rgb.cast());
        let l = tape.constant(self.lwir.cast());
        let out = model.forward(tape, r, l, Mode::Train, HeadMode::Both)?;
        let lc = head_loss_var(tape, out.corr.expect("both heads"), &self.targets)?;
        let lk = head_loss_var(tape, out.concat.expect("both heads"), &self.targets)?;
        tape.add(lc, lk)
    }
}

/// Network used by the pair-loss check: the full layer structure with
/// narrow widths so each finite-difference evaluation stays cheap.
pub fn probe_net_config() -> NetConfig {
    NetConfig { head_hidden: vec![6, 4], ..NetConfig::with_channels(vec![2, 2, 3, 3, 3, 3, 4, 4, 5]) }
}

fn outcome(name: &str, r: &crate::tensor::GradCheckReport) -> CheckOutcome {
    CheckOutcome { name: name.to_string(), checked: r.indices.len(), max_rel_error: r.max_rel_error(), failures: r.failures().len() }
}

/// Runs every check with 32-bit analytic gradients against the 64-bit
/// finite-difference oracle.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    let go = GradCheckOptions::new(opts.step, opts.tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "gradcheck"));
    let fault = opts.fault;
    let mut out = Vec::new();

    let mut layer_check = |name: &str, layer: Layer, input: Tensor<f64>, wrt: Option<&str>, rng: &mut ChaCha8Rng| -> Result<()> {
        let probe = LayerProbe::new(layer, rng.gen(), input, wrt, fault)?;
        let report = gradient_check(&probe, &probe.point::<f32>(), &go)?;
        out.push(outcome(name, &report));
        Ok(())
    };

    let conv = || Layer::Conv { c_in: 2, c_out: 3, kernel: 3 };
    let x = random(&[2, 2, 5, 6], &mut rng, -1.0, 1.0);
    layer_check("conv2d/input", conv(), x.clone(), None, &mut rng)?;
    layer_check("conv2d/weight", conv(), x.clone(), Some("conv.weight"), &mut rng)?;
    layer_check("conv2d/bias", conv(), x, Some("conv.bias"), &mut rng)?;

    let bn = || Layer::BatchNorm { channels: 3 };
    let x = random(&[4, 3, 2, 3], &mut rng, -2.0, 2.0);
    layer_check("batchnorm/input", bn(), x.clone(), None, &mut rng)?;
    layer_check("batchnorm/gamma", bn(), x.clone(), Some("bn.gamma"), &mut rng)?;
    layer_check("batchnorm/beta", bn(), x, Some("bn.beta"), &mut rng)?;

    // Keep ReLU inputs away from the kink so central differences are exact.
    let x = Tensor::from_fn([3, 8], |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen() { v } else { -v }
    });
    layer_check("relu", Layer::Relu, x, None, &mut rng)?;

    let lin = || Layer::Linear { n_in: 5, n_out: 4 };
    let x = random(&[3, 5], &mut rng, -1.0, 1.0);
    layer_check("linear/input", lin(), x.clone(), None, &mut rng)?;
    layer_check("linear/weight", lin(), x.clone(), Some("fc.weight"), &mut rng)?;
    layer_check("linear/bias", lin(), x, Some("fc.bias"), &mut rng)?;

    let x = random(&[3, 4], &mut rng, -2.0, 2.0);
    layer_check("softmax", Layer::Softmax, x, None, &mut rng)?;

    for fusion in [Fusion::Correlation, Fusion::Concatenation] {
        for rgb_side in [true, false] {
            let other = random(&[3, 6], &mut rng, -1.0, 1.0);
            let x = random(&[3, 6], &mut rng, -1.0, 1.0);
            let side = if rgb_side { "rgb" } else { "lwir" };
            let name = format!("{}/{side}", fusion.prefix());
            layer_check(&name, Layer::Fusion { fusion, other, rgb_side }, x, None, &mut rng)?;
        }
    }

    let logits = random(&[6, 2], &mut rng, -2.0, 2.0);
    let probe = HeadLossProbe { targets: (0..6).map(|i| i % 2).collect(), fault };
    out.push(outcome("head_loss", &gradient_check(&probe, &logits.cast::<f32>(), &go)?));

    let cfg = probe_net_config();
    let mut model = SiameseNet::<f64>::new(cfg.clone(), rng.gen())?;
    randomize(&mut model, rng.gen());
    let b = 4;
    let p = cfg.patch;
    let rgb = random(&[b, 3, p, p], &mut rng, -1.0, 1.0);
    let lwir = random(&[b, 3, p, p], &mut rng, -1.0, 1.0);
    let mut trainable = Vec::new();
    model.visit(&mut |name, t, kind| {
        if kind == ParamKind::Trainable {
            trainable.push((name.to_string(), t.numel()));
        }
    });
    let total: usize = trainable.iter().map(|t| t.1).sum();
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, total, opts.slice.min(total)).into_vec();
    picks.sort_unstable();
    let mut groups: Vec<(String, Vec<usize>, Vec<usize>)> = Vec::new();
    let mut offset = 0;
    let mut k = 0;
    for (name, n) in &trainable {
        let mine: Vec<usize> = picks.iter().filter(|&&g| g >= offset && g < offset + n).map(|g| g - offset).collect();
        if !mine.is_empty() {
            let ix: Vec<usize> = (k..k + mine.len()).collect();
            k += mine.len();
            groups.push((name.clone(), mine, ix));
        }
        offset += n;
    }
    let probe = PairLossProbe { model, rgb, lwir, targets: (0..b).map(|i| i % 2).collect(), groups, fault };
    let report = gradient_check(&probe, &probe.point::<f32>(), &go)?;
    out.push(outcome("pair_loss/slice", &report));
    Ok(out)
}

/// Plain-text report, one line per check.
pub fn render(results: &[CheckOutcome]) -> String {
    let mut s = String::new();
    for r in results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        s += &format!("{:<22}{:>6} entries  max rel err {:.2e}  {verdict}\n", r.name, r.checked, r.max_rel_error);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite(&SuiteOptions::default()).unwrap();
        let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
        for expect in ["conv2d/weight", "batchnorm/input", "relu", "linear/input", "softmax", "corr/rgb", "concat/lwir", "head_loss", "pair_loss/slice"] {
            assert!(names.contains(&expect), "{expect} missing from {names:?}");
        }
        for r in &results {
            assert!(r.passed(), "{}", render(&results));
        }
        assert_eq!(results.last().unwrap().checked, 10);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        for (kind, check) in [(OpKind::Conv2d, "conv2d/input"), (OpKind::BatchNorm, "batchnorm/input"), (OpKind::Relu, "relu")] {
            let results = run_suite(&SuiteOptions { fault: Some(kind), ..SuiteOptions::default() }).unwrap();
            let r = results.iter().find(|r| r.name == check).unwrap();
            assert!(!r.passed(), "{check} passed with a corrupted {kind:?} backward");
            assert!(!results.last().unwrap().passed());
        }
    }
}
