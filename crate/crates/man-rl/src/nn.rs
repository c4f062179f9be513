//! Minimal feedforward approximator with analytic gradients.
//!
//! Rectifier hidden layers, identity output, mean-squared-error training on
//! the selected output unit per sample, SGD and Adam, frozen-target pairs
//! with hard and soft sync, and a bit-exact binary checkpoint format.
//!
//! The loss is the mean over the minibatch of `(target - q[action])^2` with
//! the target treated as a constant (semi-gradient).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::rng::RngStream;
use crate::{Error, Result};

const MLP_MAGIC: &[u8; 8] = b"MANMLP01";
const OPT_MAGIC: &[u8; 8] = b"MANOPT01";

/// Fully-connected network; `weights[l]` is row-major `sizes[l+1] x sizes[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .flat_map(|v| v.iter().copied())
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter_flat().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for g in v.iter_mut() {
                *g *= factor;
            }
        }
    }
}

impl Mlp {
    /// Seeded initialization: weights uniform in +-sqrt(6/(fan_in+fan_out)),
    /// biases zero.
    pub fn new(sizes: &[usize], rng: &mut RngStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::ShapeMismatch(format!(
                "need at least input and output layers with positive sizes, got {sizes:?}"
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self { sizes: sizes.to_vec(), weights, biases })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize, out: usize, inp: usize) -> f64 {
        self.weights[layer][out * self.sizes[layer] + inp]
    }

    pub fn set_weight(&mut self, layer: usize, out: usize, inp: usize, v: f64) {
        self.weights[layer][out * self.sizes[layer] + inp] = v;
    }

    pub fn bias(&self, layer: usize, out: usize) -> f64 {
        self.biases[layer][out]
    }

    pub fn set_bias(&mut self, layer: usize, out: usize, v: f64) {
        self.biases[layer][out] = v;
    }

    pub fn params_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|p| p.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.sizes[0] {
            return Err(Error::ShapeMismatch(format!(
                "input length {} vs expected {}",
                x.len(),
                self.sizes[0]
            )));
        }
        Ok(())
    }

    /// Forward pass; rectifier on hidden layers, identity on the output.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = self.biases[l].clone();
            for o in 0..n_out {
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(a.iter()) {
                    acc += w * v;
                }
                z[o] += acc;
            }
            if l < last {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass keeping post-activation values per layer (index 0 is the
    /// input itself).
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.to_vec());
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let prev = &acts[l];
            let mut z = self.biases[l].clone();
            for o in 0..n_out {
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(prev.iter()) {
                    acc += w * v;
                }
                z[o] += acc;
            }
            if l < last {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Mean-squared-error loss and its gradient over a minibatch. Only the
    /// selected action's output contributes per sample; the target is a
    /// constant. Returns `(loss, gradients)`.
    pub fn grad_mse(
        &self,
        inputs: &[Vec<f64>],
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(f64, Gradients)> {
        if inputs.len() != actions.len() || inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "batch shapes disagree: {} inputs, {} actions, {} targets",
                inputs.len(),
                actions.len(),
                targets.len()
            )));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("non-finite target in batch".into()));
        }
        let batch = inputs.len() as f64;
        let out_dim = self.output_dim();
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for ((x, &a), &y) in inputs.iter().zip(actions).zip(targets) {
            self.check_input(x)?;
            if a >= out_dim {
                return Err(Error::IndexOutOfBounds(format!(
                    "action {a} outside {out_dim} outputs"
                )));
            }
            let acts = self.forward_cached(x);
            let q = acts.last().unwrap()[a];
            let err = q - y;
            loss += err * err / batch;
            // output delta: dLoss/dz_out, nonzero only at the chosen unit
            let mut delta = vec![0.0; out_dim];
            delta[a] = 2.0 * err / batch;
            for l in (0..self.weights.len()).rev() {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let prev = &acts[l];
                let gw = &mut grads.weights[l];
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut gw[o * n_in..(o + 1) * n_in];
                        for (g, v) in row.iter_mut().zip(prev.iter()) {
                            *g += d * v;
                        }
                        grads.biases[l][o] += d;
                    }
                }
                if l > 0 {
                    let mut next_delta = vec![0.0; n_in];
                    for o in 0..n_out {
                        let d = delta[o];
                        if d != 0.0 {
                            let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                            for (nd, w) in next_delta.iter_mut().zip(row.iter()) {
                                *nd += d * w;
                            }
                        }
                    }
                    // rectifier gate: zero activation means zero slope
                    for (nd, v) in next_delta.iter_mut().zip(prev.iter()) {
                        if *v <= 0.0 {
                            *nd = 0.0;
                        }
                    }
                    delta = next_delta;
                }
            }
        }
        Ok((loss, grads))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MLP_MAGIC)?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for l in 0..self.weights.len() {
            for &p in self.weights[l].iter().chain(self.biases[l].iter()) {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MLP_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MLP_MAGIC:?}"
            )));
        }
        let n = read_u32(r)? as usize;
        if !(2..=1024).contains(&n) {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            sizes.push(read_u32(r)? as usize);
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Checkpoint("zero-size layer".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..n - 1 {
            let mut w = Vec::with_capacity(sizes[l] * sizes[l + 1]);
            for _ in 0..sizes[l] * sizes[l + 1] {
                w.push(read_f64(r)?);
            }
            let mut b = Vec::with_capacity(sizes[l + 1]);
            for _ in 0..sizes[l + 1] {
                b.push(read_f64(r)?);
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(Self { sizes, weights, biases })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_bits(u64::from_le_bytes(b)))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or bias-corrected Adam, with an optional global gradient-norm clip.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    moment1: Option<Gradients>,
    moment2: Option<Gradients>,
    max_grad_norm: Option<f64>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moment1: None,
            moment2: None,
            max_grad_norm: None,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, ..Self::sgd(learning_rate) }
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(learning_rate),
            OptimizerKind::Adam => Self::adam(learning_rate),
        }
    }

    pub fn with_max_grad_norm(mut self, max_norm: f64) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.iter_flat().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let mut clipped;
        let grads = if let Some(max_norm) = self.max_grad_norm {
            let norm = grads.l2_norm();
            if norm > max_norm {
                clipped = grads.clone();
                clipped.scale(max_norm / norm);
                &clipped
            } else {
                grads
            }
        } else {
            grads
        };
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for l in 0..net.weights.len() {
                    for (p, g) in net.weights[l].iter_mut().zip(&grads.weights[l]) {
                        *p -= self.learning_rate * g;
                    }
                    for (p, g) in net.biases[l].iter_mut().zip(&grads.biases[l]) {
                        *p -= self.learning_rate * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.moment1.is_none() {
                    self.moment1 = Some(Gradients::zeros_like(net));
                    self.moment2 = Some(Gradients::zeros_like(net));
                }
                let m = self.moment1.as_mut().unwrap();
                let v = self.moment2.as_mut().unwrap();
                let t = self.step_count as f64;
                let bc1 = 1.0 - self.beta1.powf(t);
                let bc2 = 1.0 - self.beta2.powf(t);
                for l in 0..net.weights.len() {
                    for ((p, g), (mm, vv)) in net.weights[l]
                        .iter_mut()
                        .zip(&grads.weights[l])
                        .zip(m.weights[l].iter_mut().zip(v.weights[l].iter_mut()))
                    {
                        *mm = self.beta1 * *mm + (1.0 - self.beta1) * g;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                        let m_hat = *mm / bc1;
                        let v_hat = *vv / bc2;
                        *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                    for ((p, g), (mm, vv)) in net.biases[l]
                        .iter_mut()
                        .zip(&grads.biases[l])
                        .zip(m.biases[l].iter_mut().zip(v.biases[l].iter_mut()))
                    {
                        *mm = self.beta1 * *mm + (1.0 - self.beta1) * g;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                        let m_hat = *mm / bc1;
                        let v_hat = *vv / bc2;
                        *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        if !net.params_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(OPT_MAGIC)?;
        w.write_all(&[match self.kind {
            OptimizerKind::Sgd => 0u8,
            OptimizerKind::Adam => 1u8,
        }])?;
        w.write_all(&self.learning_rate.to_le_bytes())?;
        w.write_all(&self.step_count.to_le_bytes())?;
        let has_moments = self.moment1.is_some() as u8;
        w.write_all(&[has_moments])?;
        if let (Some(m), Some(v)) = (&self.moment1, &self.moment2) {
            for g in [m, v] {
                for layer in g.weights.iter().chain(g.biases.iter()) {
                    for &p in layer {
                        w.write_all(&p.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Read optimizer state written by [`Optimizer::write_to`]; `net` gives
    /// the parameter shapes for the moment accumulators.
    pub fn read_from<R: Read>(r: &mut R, net: &Mlp) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != OPT_MAGIC {
            return Err(Error::Checkpoint(format!("bad optimizer magic {magic:?}")));
        }
        let mut kind_byte = [0u8; 1];
        r.read_exact(&mut kind_byte)?;
        let kind = match kind_byte[0] {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            k => return Err(Error::Checkpoint(format!("unknown optimizer kind {k}"))),
        };
        let lr = read_f64(r)?;
        let step_count = read_u64(r)?;
        let mut has = [0u8; 1];
        r.read_exact(&mut has)?;
        let mut opt = Self::new(kind, lr);
        opt.step_count = step_count;
        if has[0] == 1 {
            let mut read_grads = || -> Result<Gradients> {
                let mut g = Gradients::zeros_like(net);
                for layer in g.weights.iter_mut().chain(g.biases.iter_mut()) {
                    for p in layer.iter_mut() {
                        *p = read_f64(r)?;
                    }
                }
                Ok(g)
            };
            opt.moment1 = Some(read_grads()?);
            opt.moment2 = Some(read_grads()?);
        }
        Ok(opt)
    }
}

/// Online network plus its frozen copy used for bootstrap targets.
#[derive(Debug, Clone)]
pub struct TargetPair {
    pub online: Mlp,
    pub target: Mlp,
}

impl TargetPair {
    pub fn new(online: Mlp) -> Self {
        let target = online.clone();
        Self { online, target }
    }

    /// Copy online parameters into the target exactly.
    pub fn sync_hard(&mut self) {
        self.target = self.online.clone();
    }

    /// Exponential blend `target <- (1-tau)*target + tau*online`.
    pub fn sync_soft(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0,1], got {tau}")));
        }
        for l in 0..self.online.weights.len() {
            for (t, o) in self.target.weights[l].iter_mut().zip(&self.online.weights[l]) {
                *t = (1.0 - tau) * *t + tau * o;
            }
            for (t, o) in self.target.biases[l].iter_mut().zip(&self.online.biases[l]) {
                *t = (1.0 - tau) * *t + tau * o;
            }
        }
        Ok(())
    }
}

/// Outcome of one finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub layer_sizes: Vec<usize>,
    pub batch: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
    pub max_rel_err: f64,
}

/// Smallest |pre-activation| over all hidden units for input `x`. A value
/// near zero means a finite-difference perturbation could flip a rectifier
/// gate, making the numeric derivative meaningless at that point.
fn min_hidden_preactivation(net: &Mlp, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut min_abs = f64::INFINITY;
    let last = net.weights.len() - 1;
    for l in 0..last {
        let (n_in, n_out) = (net.sizes[l], net.sizes[l + 1]);
        let mut z = net.biases[l].clone();
        for o in 0..n_out {
            let row = &net.weights[l][o * n_in..(o + 1) * n_in];
            for (w, v) in row.iter().zip(a.iter()) {
                z[o] += w * v;
            }
            min_abs = min_abs.min(z[o].abs());
            if z[o] < 0.0 {
                z[o] = 0.0;
            }
        }
        a = z;
    }
    min_abs
}

/// Compare analytic gradients against central finite differences over
/// `count` random small architectures. Relative error uses an absolute
/// floor of 1e-7 in the denominator. Inputs that leave a hidden unit's
/// pre-activation within 1e-3 of the rectifier kink are resampled, since
/// the loss is not differentiable there.
pub fn finite_difference_suite(count: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed);
    let h = 1e-5;
    let floor = 1e-7;
    let kink_margin = 1e-3;
    let mut cases = Vec::new();
    let mut worst = 0.0f64;
    for _ in 0..count {
        // regenerate the whole case if no input clears the kink margin
        // (e.g. a near-zero weight pins some pre-activation at the kink)
        let (net, batch, inputs) = 'case: loop {
            let n_hidden = rng.below(4); // up to 3 hidden layers
            let mut sizes = vec![1 + rng.below(6)];
            for _ in 0..n_hidden {
                sizes.push(1 + rng.below(16));
            }
            sizes.push(1 + rng.below(6));
            let net = Mlp::new(&sizes, &mut rng)?;
            let batch = 1 + rng.below(8);
            let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(batch);
            for _ in 0..batch {
                let mut found = None;
                for _ in 0..200 {
                    let x: Vec<f64> =
                        (0..sizes[0]).map(|_| rng.uniform(-1.5, 1.5)).collect();
                    if min_hidden_preactivation(&net, &x) > kink_margin {
                        found = Some(x);
                        break;
                    }
                }
                match found {
                    Some(x) => inputs.push(x),
                    None => continue 'case,
                }
            }
            break (net, batch, inputs);
        };
        let mut net = net;
        let sizes = net.layer_sizes().to_vec();
        let out_dim = *sizes.last().unwrap();
        let actions: Vec<usize> = (0..batch).map(|_| rng.below(out_dim)).collect();
        let targets: Vec<f64> = (0..batch).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (_, analytic) = net.grad_mse(&inputs, &actions, &targets)?;
        let mut case_worst = 0.0f64;
        let loss_of = |net: &Mlp| -> f64 {
            let batchf = inputs.len() as f64;
            inputs
                .iter()
                .zip(&actions)
                .zip(&targets)
                .map(|((x, &a), &y)| {
                    let q = net.forward(x).unwrap()[a];
                    (q - y) * (q - y) / batchf
                })
                .sum()
        };
        for l in 0..net.num_layers() {
            let n_in = sizes[l];
            let n_out = sizes[l + 1];
            for o in 0..n_out {
                for i in 0..n_in {
                    let orig = net.weight(l, o, i);
                    net.set_weight(l, o, i, orig + h);
                    let plus = loss_of(&net);
                    net.set_weight(l, o, i, orig - h);
                    let minus = loss_of(&net);
                    net.set_weight(l, o, i, orig);
                    let numeric = (plus - minus) / (2.0 * h);
                    let analytic_g = analytic.weights[l][o * n_in + i];
                    let denom = analytic_g.abs().max(numeric.abs()).max(floor);
                    case_worst = case_worst.max((analytic_g - numeric).abs() / denom);
                }
                let orig = net.bias(l, o);
                net.set_bias(l, o, orig + h);
                let plus = loss_of(&net);
                net.set_bias(l, o, orig - h);
                let minus = loss_of(&net);
                net.set_bias(l, o, orig);
                let numeric = (plus - minus) / (2.0 * h);
                let analytic_g = analytic.biases[l][o];
                let denom = analytic_g.abs().max(numeric.abs()).max(floor);
                case_worst = case_worst.max((analytic_g - numeric).abs() / denom);
            }
        }
        worst = worst.max(case_worst);
        cases.push(GradCheckCase { layer_sizes: sizes, batch, max_rel_err: case_worst });
    }
    Ok(GradCheckReport { cases, max_rel_err: worst })
}
