use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    max_pool2, max_pool2_backward, relu_backward, relu_inplace, BatchNorm2d, BnCache, Conv2d, ConvCache,
    ConvTranspose2x2, Param, PoolCache, UpCache,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// U-Net with batch normalization after every 3×3 convolution.
    UnetBn,
    /// The same topology without normalization layers, sized for CPU runs.
    SmallUnet,
    /// A flat stack of 3×3 convolutions (no resampling).
    PlainCnn,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet_bn" => Ok(Self::UnetBn),
            "small_unet" => Ok(Self::SmallUnet),
            "plain_cnn" => Ok(Self::PlainCnn),
            other => Err(Error::Config(format!(
                "unsupported architecture '{other}' (expected unet_bn, small_unet or plain_cnn)"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UnetBn => "unet_bn",
            Self::SmallUnet => "small_unet",
            Self::PlainCnn => "plain_cnn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserSpec {
    pub architecture: Architecture,
    /// Base width (channels of the first level).
    pub channels: usize,
    /// Down/upsampling levels for U-Nets; hidden layers for the plain CNN.
    pub depth: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self::small_unet()
    }
}

impl DenoiserSpec {
    /// Full-size U-Net (64 base channels, 4 levels, ≈31M parameters).
    pub fn unet_bn() -> Self {
        Self {
            architecture: Architecture::UnetBn,
            channels: 64,
            depth: 4,
        }
    }

    pub fn small_unet() -> Self {
        Self {
            architecture: Architecture::SmallUnet,
            channels: 16,
            depth: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("model channels must be positive".into()));
        }
        if self.depth == 0 && self.architecture != Architecture::PlainCnn {
            return Err(Error::Config("U-Net depth must be positive".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("model depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }

    /// Input sides must be multiples of this value.
    pub fn divisor(&self) -> usize {
        match self.architecture {
            Architecture::PlainCnn => 1,
            _ => 1 << self.depth,
        }
    }

    pub fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        let d = self.divisor();
        if rows == 0 || cols == 0 || rows % d != 0 || cols % d != 0 {
            return Err(Error::Divisibility { rows, cols, divisor: d });
        }
        Ok(())
    }

    /// Number of learnable parameters implied by the spec.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        match self.architecture {
            Architecture::PlainCnn => {
                Conv2d::<f32>::param_count(1, c, 3)
                    + self.depth * Conv2d::<f32>::param_count(c, c, 3)
                    + Conv2d::<f32>::param_count(c, 1, 3)
            }
            arch => {
                let bn = arch == Architecture::UnetBn;
                let block = |cin: usize, cout: usize| {
                    Conv2d::<f32>::param_count(cin, cout, 3)
                        + Conv2d::<f32>::param_count(cout, cout, 3)
                        + if bn { 2 * BatchNorm2d::<f32>::param_count(cout) } else { 0 }
                };
                let width = |level: usize| c << level;
                let mut total = block(1, width(0));
                for l in 1..=self.depth {
                    total += block(width(l - 1), width(l));
                }
                for l in 0..self.depth {
                    total += ConvTranspose2x2::<f32>::param_count(width(l + 1), width(l));
                    total += block(2 * width(l), width(l));
                }
                total + Conv2d::<f32>::param_count(width(0), 1, 1)
            }
        }
    }
}

/// Two `conv3×3 → [BN] → ReLU` stages.
#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    conv1: Conv2d<T>,
    bn1: Option<BatchNorm2d<T>>,
    conv2: Conv2d<T>,
    bn2: Option<BatchNorm2d<T>>,
}

#[derive(Debug)]
struct BlockCache<T> {
    conv1: ConvCache<T>,
    bn1: Option<BnCache<T>>,
    act1: Tensor<T>,
    conv2: ConvCache<T>,
    bn2: Option<BnCache<T>>,
    act2: Tensor<T>,
}

impl<T: Real> Block<T> {
    fn new(cin: usize, cout: usize, batch_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(cin, cout, 3, rng);
        let conv2 = Conv2d::new(cout, cout, 3, rng);
        Self {
            conv1,
            bn1: batch_norm.then(|| BatchNorm2d::new(cout)),
            conv2,
            bn2: batch_norm.then(|| BatchNorm2d::new(cout)),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let (mut h, conv1) = self.conv1.forward(x);
        let bn1 = self.bn1.as_mut().map(|bn| {
            let (y, cache) = bn.forward_train(&h);
            h = y;
            cache
        });
        relu_inplace(&mut h);
        let act1 = h;
        let (mut h, conv2) = self.conv2.forward(&act1);
        let bn2 = self.bn2.as_mut().map(|bn| {
            let (y, cache) = bn.forward_train(&h);
            h = y;
            cache
        });
        relu_inplace(&mut h);
        let cache = BlockCache {
            conv1,
            bn1,
            act1,
            conv2,
            bn2,
            act2: h.clone(),
        };
        (h, cache)
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (mut h, _) = self.conv1.forward(x);
        if let Some(bn) = &self.bn1 {
            h = bn.forward_eval(&h);
        }
        relu_inplace(&mut h);
        let (mut h, _) = self.conv2.forward(&h);
        if let Some(bn) = &self.bn2 {
            h = bn.forward_eval(&h);
        }
        relu_inplace(&mut h);
        h
    }

    fn backward(&mut self, cache: BlockCache<T>, gy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let mut g = gy.clone();
        relu_backward(&cache.act2, &mut g);
        if let (Some(bn), Some(c)) = (self.bn2.as_mut(), cache.bn2) {
            g = bn.backward(c, &g);
        }
        let mut g = self.conv2.backward(cache.conv2, &g, true).expect("input grad requested");
        relu_backward(&cache.act1, &mut g);
        if let (Some(bn), Some(c)) = (self.bn1.as_mut(), cache.bn1) {
            g = bn.backward(c, &g);
        }
        self.conv1.backward(cache.conv1, &g, need_input_grad)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_params(f);
        if let Some(bn) = self.bn1.as_mut() {
            bn.visit_params(f);
        }
        self.conv2.visit_params(f);
        if let Some(bn) = self.bn2.as_mut() {
            bn.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        for bn in [self.bn1.as_mut(), self.bn2.as_mut()].into_iter().flatten() {
            f(&mut bn.running_mean);
            f(&mut bn.running_var);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Unet<T> {
    enc: Vec<Block<T>>,
    ups: Vec<ConvTranspose2x2<T>>,
    dec: Vec<Block<T>>,
    head: Conv2d<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct PlainCnn<T> {
    convs: Vec<Conv2d<T>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Body<T> {
    Unet(Unet<T>),
    Plain(PlainCnn<T>),
}

/// Activation record of one training-mode forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    inner: TapeInner<T>,
}

#[derive(Debug)]
enum TapeInner<T> {
    Unet {
        enc: Vec<BlockCache<T>>,
        pools: Vec<PoolCache>,
        ups: Vec<UpCache<T>>,
        dec: Vec<BlockCache<T>>,
        head: ConvCache<T>,
    },
    Plain {
        convs: Vec<ConvCache<T>>,
        acts: Vec<Tensor<T>>,
    },
}

/// A trainable single-channel image-to-image network.
pub trait Network<T: Real> {
    type Tape;

    /// Rejects spatial sizes the network cannot process.
    fn check_input(&self, _rows: usize, _cols: usize) -> Result<()> {
        Ok(())
    }

    /// Evaluation-mode forward pass (frozen normalization statistics).
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Training-mode forward pass that records what `backward` needs.
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Tape)>;

    /// Accumulates parameter gradients and optionally returns the input gradient.
    fn backward(&mut self, tape: Self::Tape, grad_out: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>>;

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn is_trained(&self) -> bool;

    /// Called once per optimizer update.
    fn record_update(&mut self) {}

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Digest of all parameter values.
    fn param_fingerprint(&mut self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.visit_params(&mut |p| {
            for v in &p.value {
                hasher.update(v.to_f64().unwrap().to_le_bytes());
            }
        });
        hasher.finalize().into()
    }
}

/// A backbone denoiser `f_θ` with its spec and update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    spec: DenoiserSpec,
    body: Body<T>,
    step_count: u64,
}

/// The `f32` training state.
pub type DenoiserState = Denoiser<f32>;

impl<T: Real> Denoiser<T> {
    /// Initializes a network deterministically from `seed`.
    pub fn build(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.channels;
        let body = match spec.architecture {
            Architecture::PlainCnn => {
                let mut convs = vec![Conv2d::new(1, c, 3, &mut rng)];
                for _ in 0..spec.depth {
                    convs.push(Conv2d::new(c, c, 3, &mut rng));
                }
                convs.push(Conv2d::new(c, 1, 3, &mut rng));
                Body::Plain(PlainCnn { convs })
            }
            arch => {
                let bn = arch == Architecture::UnetBn;
                let width = |level: usize| c << level;
                let mut enc = vec![Block::new(1, width(0), bn, &mut rng)];
                for l in 1..=spec.depth {
                    enc.push(Block::new(width(l - 1), width(l), bn, &mut rng));
                }
                let mut ups = Vec::with_capacity(spec.depth);
                let mut dec = Vec::with_capacity(spec.depth);
                for l in 0..spec.depth {
                    ups.push(ConvTranspose2x2::new(width(l + 1), width(l), &mut rng));
                    dec.push(Block::new(2 * width(l), width(l), bn, &mut rng));
                }
                let head = Conv2d::new(width(0), 1, 1, &mut rng);
                Body::Unet(Unet { enc, ups, dec, head })
            }
        };
        Ok(Self {
            spec,
            body,
            step_count: 0,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Forward pass in training (batch statistics) or evaluation mode.
    pub fn forward(&mut self, x: &Tensor<T>, training_mode: bool) -> Result<Tensor<T>> {
        if training_mode {
            Ok(self.forward_train(x)?.0)
        } else {
            self.infer(x)
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != 1 {
            return Err(Error::Invalid(format!("expected a single-channel input, got {} channels", x.c)));
        }
        self.spec.check_input(x.h, x.w)
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        if let Body::Unet(u) = &mut self.body {
            for b in u.enc.iter_mut().chain(u.dec.iter_mut()) {
                b.visit_buffers(f);
            }
        }
    }

    /// Copies every parameter and buffer into another precision.
    pub fn convert<U: Real>(&mut self) -> Denoiser<U> {
        let mut values = Vec::new();
        self.visit_params(&mut |p| values.push(p.value.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>()));
        let mut buffers = Vec::new();
        self.visit_buffers(&mut |b| buffers.push(b.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>()));
        let mut out = Denoiser::<U>::build(self.spec, 0).expect("spec already validated");
        out.load_values(&values, &buffers).expect("identical layout");
        out.step_count = self.step_count;
        out
    }

    fn load_values(&mut self, params: &[Vec<f64>], buffers: &[Vec<f64>]) -> Result<()> {
        let mut i = 0;
        let mut bad = false;
        self.visit_params(&mut |p| {
            match params.get(i) {
                Some(src) if src.len() == p.value.len() => {
                    p.value = src.iter().map(|&v| T::of(v)).collect();
                }
                _ => bad = true,
            }
            i += 1;
        });
        if bad || i != params.len() {
            return Err(Error::Invalid("checkpoint parameters do not match the model layout".into()));
        }
        let mut j = 0;
        self.visit_buffers(&mut |b| {
            match buffers.get(j) {
                Some(src) if src.len() == b.len() => *b = src.iter().map(|&v| T::of(v)).collect(),
                _ => bad = true,
            }
            j += 1;
        });
        if bad || j != buffers.len() {
            return Err(Error::Invalid("checkpoint buffers do not match the model layout".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    spec: DenoiserSpec,
    step_count: u64,
    params: Vec<Vec<f32>>,
    buffers: Vec<Vec<f32>>,
}

const CHECKPOINT_FORMAT: &str = "blindspot-denoiser";

impl Denoiser<f32> {
    /// Writes a self-describing JSON checkpoint.
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut params = Vec::new();
        self.visit_params(&mut |p| params.push(p.value.clone()));
        let mut buffers = Vec::new();
        self.visit_buffers(&mut |b| buffers.push(b.clone()));
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            spec: self.spec,
            step_count: self.step_count,
            params,
            buffers,
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Invalid(format!("{} is not a denoiser checkpoint", path.display())));
        }
        let mut model = Self::build(file.spec, 0)?;
        let widen = |v: &Vec<Vec<f32>>| -> Vec<Vec<f64>> {
            v.iter().map(|p| p.iter().map(|&x| x as f64).collect()).collect()
        };
        model.load_values(&widen(&file.params), &widen(&file.buffers))?;
        model.step_count = file.step_count;
        Ok(model)
    }
}

impl<T: Real> Network<T> for Denoiser<T> {
    type Tape = Tape<T>;

    fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        self.spec.check_input(rows, cols)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        Ok(match &self.body {
            Body::Unet(u) => {
                let mut skips = Vec::with_capacity(u.dec.len());
                let mut h = x.clone();
                for block in &u.enc[..u.dec.len()] {
                    h = block.forward_eval(&h);
                    let (pooled, _) = max_pool2(&h);
                    skips.push(h);
                    h = pooled;
                }
                h = u.enc[u.dec.len()].forward_eval(&h);
                for l in (0..u.dec.len()).rev() {
                    let (up, _) = u.ups[l].forward(&h);
                    let cat = Tensor::concat_channels(&skips[l], &up);
                    h = u.dec[l].forward_eval(&cat);
                }
                u.head.forward(&h).0
            }
            Body::Plain(p) => {
                let mut h = x.clone();
                let last = p.convs.len() - 1;
                for (i, conv) in p.convs.iter().enumerate() {
                    h = conv.forward(&h).0;
                    if i < last {
                        relu_inplace(&mut h);
                    }
                }
                h
            }
        })
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check(x)?;
        Ok(match &mut self.body {
            Body::Unet(u) => {
                let depth = u.dec.len();
                let mut skips = Vec::with_capacity(depth);
                let mut enc_caches = Vec::with_capacity(depth + 1);
                let mut pools = Vec::with_capacity(depth);
                let mut h = x.clone();
                for block in &mut u.enc[..depth] {
                    let (y, cache) = block.forward_train(&h);
                    enc_caches.push(cache);
                    let (pooled, pc) = max_pool2(&y);
                    pools.push(pc);
                    skips.push(y);
                    h = pooled;
                }
                let (y, cache) = u.enc[depth].forward_train(&h);
                enc_caches.push(cache);
                h = y;
                let mut ups = Vec::with_capacity(depth);
                let mut decs = Vec::with_capacity(depth);
                for l in (0..depth).rev() {
                    let (up, uc) = u.ups[l].forward(&h);
                    ups.push(uc);
                    let cat = Tensor::concat_channels(&skips[l], &up);
                    let (y, dc) = u.dec[l].forward_train(&cat);
                    decs.push(dc);
                    h = y;
                }
                let (out, head) = u.head.forward(&h);
                (
                    out,
                    Tape {
                        inner: TapeInner::Unet {
                            enc: enc_caches,
                            pools,
                            ups,
                            dec: decs,
                            head,
                        },
                    },
                )
            }
            Body::Plain(p) => {
                let mut h = x.clone();
                let last = p.convs.len() - 1;
                let mut convs = Vec::with_capacity(p.convs.len());
                let mut acts = Vec::with_capacity(last);
                for (i, conv) in p.convs.iter().enumerate() {
                    let (mut y, cache) = conv.forward(&h);
                    convs.push(cache);
                    if i < last {
                        relu_inplace(&mut y);
                        acts.push(y.clone());
                    }
                    h = y;
                }
                (h, Tape { inner: TapeInner::Plain { convs, acts } })
            }
        })
    }

    fn backward(&mut self, tape: Tape<T>, grad_out: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        match (&mut self.body, tape.inner) {
            (
                Body::Unet(u),
                TapeInner::Unet {
                    mut enc,
                    mut pools,
                    mut ups,
                    mut dec,
                    head,
                },
            ) => {
                let depth = u.dec.len();
                let mut g = u.head.backward(head, grad_out, true).expect("input grad requested");
                let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
                // Decoder and upsampling caches were pushed deepest level first,
                // so popping walks from the shallowest level down to the bottleneck.
                for l in 0..depth {
                    let cache = dec.pop().expect("decoder cache");
                    let gcat = u.dec[l].backward(cache, &g, true).expect("input grad requested");
                    let (gskip, gup) = gcat.split_channels(u.dec[l].conv1.cin / 2);
                    skip_grads[l] = Some(gskip);
                    let uc = ups.pop().expect("upsampling cache");
                    g = u.ups[l].backward(uc, &gup);
                }
                let bottleneck = enc.pop().expect("bottleneck cache");
                g = u.enc[depth]
                    .backward(bottleneck, &g, true)
                    .expect("input grad requested");
                for l in (0..depth).rev() {
                    let pc = pools.pop().expect("pool cache");
                    let mut gy = max_pool2_backward(pc, &g);
                    gy.add_assign(skip_grads[l].as_ref().expect("skip gradient"));
                    let cache = enc.pop().expect("encoder cache");
                    let need = l > 0 || need_input_grad;
                    match u.enc[l].backward(cache, &gy, need) {
                        Some(next) => g = next,
                        None => return None,
                    }
                }
                Some(g)
            }
            (Body::Plain(p), TapeInner::Plain { mut convs, mut acts }) => {
                let n = p.convs.len();
                let mut g = grad_out.clone();
                for i in (0..n).rev() {
                    if i < n - 1 {
                        let act = acts.pop().expect("activation");
                        relu_backward(&act, &mut g);
                    }
                    let cache = convs.pop().expect("conv cache");
                    let need = i > 0 || need_input_grad;
                    match p.convs[i].backward(cache, &g, need) {
                        Some(next) => g = next,
                        None => return None,
                    }
                }
                Some(g)
            }
            _ => unreachable!("tape recorded by a different network"),
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.body {
            Body::Unet(u) => {
                for b in &mut u.enc {
                    b.visit_params(f);
                }
                for (up, b) in u.ups.iter_mut().zip(u.dec.iter_mut()) {
                    up.visit_params(f);
                    b.visit_params(f);
                }
                u.head.visit_params(f);
            }
            Body::Plain(p) => {
                for c in &mut p.convs {
                    c.visit_params(f);
                }
            }
        }
    }

    fn is_trained(&self) -> bool {
        self.step_count > 0
    }

    fn record_update(&mut self) {
        self.step_count += 1;
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn random_tensor(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(1, 1, h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn l1(out: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
        out.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.data.len() as f64
    }

    fn grad_check(spec: DenoiserSpec) {
        let mut net = Denoiser::<f64>::build(spec, 3).unwrap();
        let x = random_tensor(16, 16, 1);
        let target = random_tensor(16, 16, 2);
        let (out, tape) = net.forward_train(&x).unwrap();
        let n = out.data.len() as f64;
        let g = Tensor::from_vec(
            1,
            1,
            16,
            16,
            out.data.iter().zip(&target.data).map(|(a, b)| (a - b).signum() / n).collect(),
        )
        .unwrap();
        net.backward(tape, &g, false);
        let mut analytic = Vec::new();
        net.visit_params(&mut |p| analytic.push(p.grad.clone()));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 20 && attempts < 500 {
            attempts += 1;
            let group = rng.random_range(0..analytic.len());
            let idx = rng.random_range(0..analytic[group].len());
            let h = 1e-6;
            let eval = |net: &mut Denoiser<f64>, delta: f64| {
                let mut k = 0;
                net.visit_params(&mut |p| {
                    if k == group {
                        p.value[idx] += delta;
                    }
                    k += 1;
                });
                let (o, _) = net.forward_train(&x).unwrap();
                let mut k = 0;
                net.visit_params(&mut |p| {
                    if k == group {
                        p.value[idx] -= delta;
                    }
                    k += 1;
                });
                l1(&o, &target)
            };
            let numeric = (eval(&mut net, h) - eval(&mut net, -h)) / (2.0 * h);
            let a = analytic[group][idx];
            if a.abs() < 1e-6 && numeric.abs() < 1e-6 {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            assert!(rel < 1e-3, "group {group} idx {idx}: analytic {a} numeric {numeric}");
            checked += 1;
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn gradients_small_unet() {
        grad_check(DenoiserSpec { architecture: Architecture::SmallUnet, channels: 4, depth: 2 });
    }

    #[test]
    fn gradients_unet_bn() {
        grad_check(DenoiserSpec { architecture: Architecture::UnetBn, channels: 4, depth: 2 });
    }

    #[test]
    fn gradients_plain_cnn() {
        grad_check(DenoiserSpec { architecture: Architecture::PlainCnn, channels: 4, depth: 2 });
    }

    #[test]
    fn param_counts_match_layout() {
        for spec in [
            DenoiserSpec::small_unet(),
            DenoiserSpec { architecture: Architecture::UnetBn, channels: 8, depth: 3 },
            DenoiserSpec { architecture: Architecture::PlainCnn, channels: 8, depth: 4 },
        ] {
            let mut net = Denoiser::<f32>::build(spec, 0).unwrap();
            assert_eq!(net.num_params(), spec.param_count());
        }
    }

    #[test]
    fn full_unet_has_about_31m_parameters() {
        let count = DenoiserSpec::unet_bn().param_count() as f64;
        assert!((count - 31e6).abs() / 31e6 < 0.05, "{count}");
    }

    #[test]
    fn shape_preserved_and_divisibility_enforced() {
        let net = Denoiser::<f32>::build(DenoiserSpec::small_unet(), 1).unwrap();
        let x = Tensor::<f32>::zeros(2, 1, 16, 24);
        assert_eq!(net.infer(&x).unwrap().shape(), [2, 1, 16, 24]);
        let bad = Tensor::<f32>::zeros(1, 1, 12, 16);
        assert!(matches!(net.infer(&bad), Err(Error::Divisibility { divisor: 8, .. })));
    }

    #[test]
    fn unknown_architecture_rejected() {
        assert!(matches!("resnet".parse::<Architecture>(), Err(Error::Config(_))));
    }
}
