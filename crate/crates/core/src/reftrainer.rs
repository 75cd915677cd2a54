//! A small dense network trained by full-batch gradient descent, used to
//! check that data- and model-parallel execution compute the same update
//! as a single device.
//!
//! Hidden layers use tanh, the output layer is linear, and the loss is the
//! squared error summed over outputs and averaged over samples. All
//! arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: Vec<usize>,
    pub theta: Vec<f64>,
}

impl ToyModel {
    /// `dims = [d_in, h_1, ..., d_out]`, weights drawn from N(0, 1/d_in).
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::validation(format!(
                "layer dimensions must be at least two positive sizes, got {dims:?}"
            )));
        }
        let mut rng = Stream::new(seed, 0, Purpose::Drift, 7);
        let mut theta = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            theta.extend((0..w[0] * w[1]).map(|_| rng.normal() * scale));
            theta.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(ToyModel {
            dims: dims.to_vec(),
            theta,
        })
    }

    pub fn with_params(dims: &[usize], theta: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) || theta.len() != param_count(dims) {
            return Err(Error::validation("parameter vector does not match the layer dimensions"));
        }
        Ok(ToyModel {
            dims: dims.to_vec(),
            theta,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Offset of layer `l`'s weights in `theta`; biases follow the weights.
    fn offset(&self, l: usize) -> usize {
        self.dims.windows(2).take(l).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `n x d_in`.
    pub inputs: Vec<f64>,
    /// Row-major `n x d_out`.
    pub targets: Vec<f64>,
    pub seed: u64,
}

impl ToyDataset {
    /// Standard-normal inputs; targets from a fixed random linear map plus
    /// noise of std-dev 0.1.
    pub fn generate(n: usize, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        if n == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::validation("dataset dimensions must be positive"));
        }
        let mut rng = Stream::new(seed, 0, Purpose::Drift, 11);
        let map: Vec<f64> = (0..d_in * d_out).map(|_| rng.normal()).collect();
        let inputs: Vec<f64> = (0..n * d_in).map(|_| rng.normal()).collect();
        let mut targets = vec![0.0; n * d_out];
        for s in 0..n {
            for o in 0..d_out {
                let mut y = 0.0;
                for i in 0..d_in {
                    y += inputs[s * d_in + i] * map[i * d_out + o];
                }
                targets[s * d_out + o] = y + 0.1 * rng.normal();
            }
        }
        Ok(ToyDataset {
            n,
            d_in,
            d_out,
            inputs,
            targets,
            seed,
        })
    }

    fn rows(&self, start: usize, len: usize) -> (&[f64], &[f64]) {
        (
            &self.inputs[start * self.d_in..(start + len) * self.d_in],
            &self.targets[start * self.d_out..(start + len) * self.d_out],
        )
    }
}

/// Activations of one stage: the input plus each layer's output.
struct Activations {
    layers: Vec<Vec<f64>>,
}

/// Forward through layers `range` for `n` samples.
fn forward(model: &ToyModel, range: std::ops::Range<usize>, input: &[f64], n: usize) -> Activations {
    let last = model.layers() - 1;
    let mut layers = vec![input.to_vec()];
    for l in range {
        let (din, dout) = (model.dims[l], model.dims[l + 1]);
        let w = &model.theta[model.offset(l)..];
        let a = layers.last().expect("input present");
        let mut z = vec![0.0; n * dout];
        for s in 0..n {
            for o in 0..dout {
                let mut acc = w[din * dout + o];
                for i in 0..din {
                    acc += w[o * din + i] * a[s * din + i];
                }
                z[s * dout + o] = if l == last { acc } else { acc.tanh() };
            }
        }
        layers.push(z);
    }
    Activations { layers }
}

/// Backward through layers `range` given d(loss)/d(output of range.end-1);
/// accumulates summed gradients into `grad` and returns d(loss)/d(input).
fn backward(
    model: &ToyModel,
    range: std::ops::Range<usize>,
    acts: &Activations,
    upstream: Vec<f64>,
    n: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let last = model.layers() - 1;
    let first = range.start;
    let mut delta = upstream;
    for l in range.rev() {
        let (din, dout) = (model.dims[l], model.dims[l + 1]);
        let off = model.offset(l);
        let w = &model.theta[off..];
        let a = &acts.layers[l - first];
        let h = &acts.layers[l - first + 1];
        if l != last {
            for (d, &hv) in delta.iter_mut().zip(h) {
                *d *= 1.0 - hv * hv;
            }
        }
        let g = &mut grad[off..];
        let mut da = vec![0.0; n * din];
        for s in 0..n {
            for o in 0..dout {
                let dz = delta[s * dout + o];
                g[din * dout + o] += dz;
                for i in 0..din {
                    g[o * din + i] += dz * a[s * din + i];
                    da[s * din + i] += w[o * din + i] * dz;
                }
            }
        }
        delta = da;
    }
    delta
}

fn output_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let g = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let r = p - y;
            loss += r * r;
            2.0 * r
        })
        .collect();
    (loss, g)
}

/// Summed loss and summed gradient over `n` samples. With `cut`, the
/// network runs as two stages that only exchange activations and
/// activation gradients.
fn loss_and_grad(model: &ToyModel, x: &[f64], y: &[f64], n: usize, cut: Option<usize>) -> (f64, Vec<f64>) {
    let layers = model.layers();
    let mut grad = vec![0.0; model.theta.len()];
    match cut {
        None => {
            let acts = forward(model, 0..layers, x, n);
            let (loss, g) = output_grad(acts.layers.last().expect("output"), y);
            backward(model, 0..layers, &acts, g, n, &mut grad);
            (loss, grad)
        }
        Some(c) => {
            let stage0 = forward(model, 0..c, x, n);
            let sent = stage0.layers.last().expect("boundary").clone();
            let stage1 = forward(model, c..layers, &sent, n);
            let (loss, g) = output_grad(stage1.layers.last().expect("output"), y);
            let returned = backward(model, c..layers, &stage1, g, n, &mut grad);
            backward(model, 0..c, &stage0, returned, n, &mut grad);
            (loss, grad)
        }
    }
}

/// Mean loss and its gradient over the whole dataset.
pub fn loss_gradient(model: &ToyModel, data: &ToyDataset) -> (f64, Vec<f64>) {
    let (loss, mut g) = loss_and_grad(model, &data.inputs, &data.targets, data.n, None);
    let inv = 1.0 / data.n as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    (loss * inv, g)
}

pub fn loss(model: &ToyModel, data: &ToyDataset) -> f64 {
    let acts = forward(model, 0..model.layers(), &data.inputs, data.n);
    output_grad(acts.layers.last().expect("output"), &data.targets).0 / data.n as f64
}

fn check(model: &ToyModel, data: &ToyDataset, eta: f64) -> Result<()> {
    if model.dims[0] != data.d_in || *model.dims.last().expect("dims") != data.d_out {
        return Err(Error::validation("model and dataset dimensions disagree"));
    }
    if !(eta >= 0.0) {
        return Err(Error::validation(format!("learning rate must be non-negative, got {eta}")));
    }
    Ok(())
}

fn finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("loss became {loss} at step {step}")))
    }
}

fn apply(theta: &mut [f64], grad: &[f64], eta: f64) {
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= eta * g;
    }
}

pub fn train_single(model: &ToyModel, data: &ToyDataset, eta: f64, steps: usize) -> Result<Vec<f64>> {
    train_staged(model, data, eta, steps, None)
}

fn train_staged(model: &ToyModel, data: &ToyDataset, eta: f64, steps: usize, cut: Option<usize>) -> Result<Vec<f64>> {
    check(model, data, eta)?;
    let mut m = model.clone();
    let inv = 1.0 / data.n as f64;
    for step in 0..steps {
        let (loss, mut g) = loss_and_grad(&m, &data.inputs, &data.targets, data.n, cut);
        finite(loss, step)?;
        g.iter_mut().for_each(|v| *v *= inv);
        apply(&mut m.theta, &g, eta);
    }
    Ok(m.theta)
}

/// `k` equal shards; shard-mean gradients are averaged in shard order.
pub fn train_dp(model: &ToyModel, data: &ToyDataset, eta: f64, steps: usize, shards: usize) -> Result<Vec<f64>> {
    check(model, data, eta)?;
    if shards == 0 || !data.n.is_multiple_of(shards) {
        return Err(Error::validation(format!(
            "{} samples cannot be split into {shards} equal shards",
            data.n
        )));
    }
    let per = data.n / shards;
    let mut m = model.clone();
    for step in 0..steps {
        let mut avg = vec![0.0; m.theta.len()];
        let mut total_loss = 0.0;
        for s in 0..shards {
            let (x, y) = data.rows(s * per, per);
            let (loss, g) = loss_and_grad(&m, x, y, per, None);
            total_loss += loss;
            let inv = 1.0 / per as f64;
            for (a, v) in avg.iter_mut().zip(&g) {
                *a += v * inv;
            }
        }
        finite(total_loss, step)?;
        let inv_k = 1.0 / shards as f64;
        avg.iter_mut().for_each(|v| *v *= inv_k);
        apply(&mut m.theta, &avg, eta);
    }
    Ok(m.theta)
}

/// Two pipeline stages split before layer `cut`.
pub fn train_mp(model: &ToyModel, data: &ToyDataset, eta: f64, steps: usize, cut: usize) -> Result<Vec<f64>> {
    if cut == 0 || cut >= model.layers() {
        return Err(Error::validation(format!(
            "cut must lie strictly inside 1..{}, got {cut}",
            model.layers()
        )));
    }
    train_staged(model, data, eta, steps, Some(cut))
}

/// Largest elementwise relative difference; 0/0 counts as 0.
pub fn max_relative_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Largest relative gap between backprop and central differences over
/// `probes` random parameters. Gradients smaller than `1e-8` in magnitude
/// are compared against that floor.
pub fn gradient_check(model: &ToyModel, data: &ToyDataset, probes: usize, h: f64, seed: u64) -> f64 {
    let (_, g) = loss_gradient(model, data);
    let mut rng = Stream::new(seed, 0, Purpose::Profile, 13);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = ((rng.uniform() * model.theta.len() as f64) as usize).min(model.theta.len() - 1);
        let mut plus = model.clone();
        plus.theta[i] += h;
        let mut minus = model.clone();
        minus.theta[i] -= h;
        let fd = (loss(&plus, data) - loss(&minus, data)) / (2.0 * h);
        let scale = fd.abs().max(g[i].abs()).max(1e-8);
        worst = worst.max((fd - g[i]).abs() / scale);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    pub seed: u64,
    pub steps: usize,
    pub shards: Vec<usize>,
    pub dims: Vec<usize>,
    pub samples: usize,
    pub eta: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            steps: 100,
            shards: vec![1, 2, 4, 64],
            dims: vec![8, 16, 16, 4],
            samples: 64,
            eta: 0.02,
        }
    }
}

/// The full equivalence suite.
pub fn verify(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let d_out = *opts.dims.last().ok_or_else(|| Error::validation("empty dims"))?;
    let model = ToyModel::new(&opts.dims, opts.seed)?;
    let data = ToyDataset::generate(opts.samples, opts.dims[0], d_out, opts.seed.wrapping_add(1))?;
    let single = train_single(&model, &data, opts.eta, opts.steps)?;
    let mut out = Vec::new();
    let mut push = |name: String, value: f64, tolerance: f64| {
        out.push(CheckResult {
            name,
            value,
            tolerance,
            passed: value <= tolerance,
        })
    };
    for &k in &opts.shards {
        let dp = train_dp(&model, &data, opts.eta, opts.steps, k)?;
        push(format!("dp k={k} vs single ({} steps)", opts.steps), max_relative_diff(&dp, &single), 1e-6);
    }
    for cut in 1..model.layers() {
        let mp = train_mp(&model, &data, opts.eta, opts.steps, cut)?;
        let mismatched = mp.iter().zip(&single).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        push(format!("mp cut={cut} bitwise ({} steps)", opts.steps), mismatched as f64, 0.0);
    }
    push(
        "backprop vs central differences (10 probes)".into(),
        gradient_check(&model, &data, 10, 1e-4, opts.seed),
        1e-5,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ToyModel, ToyDataset) {
        (
            ToyModel::new(&[3, 5, 4, 2], 1).unwrap(),
            ToyDataset::generate(12, 3, 2, 2).unwrap(),
        )
    }

    #[test]
    fn parameter_count() {
        let (m, _) = setup();
        assert_eq!(m.theta.len(), 4 * 5 + 6 * 4 + 5 * 2);
    }

    #[test]
    fn zero_steps_and_zero_rate_are_identity() {
        let (m, d) = setup();
        assert_eq!(train_single(&m, &d, 0.1, 0).unwrap(), m.theta);
        assert_eq!(train_single(&m, &d, 0.0, 100).unwrap(), m.theta);
    }

    #[test]
    fn one_shard_is_bitwise_single() {
        let (m, d) = setup();
        assert_eq!(
            train_dp(&m, &d, 0.05, 20, 1).unwrap(),
            train_single(&m, &d, 0.05, 20).unwrap()
        );
    }

    #[test]
    fn invalid_partitions_rejected() {
        let (m, d) = setup();
        assert!(train_dp(&m, &d, 0.1, 1, 5).is_err());
        assert!(train_dp(&m, &d, 0.1, 1, 0).is_err());
        assert!(train_mp(&m, &d, 0.1, 1, 0).is_err());
        assert!(train_mp(&m, &d, 0.1, 1, 3).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (m, d) = setup();
        assert!(matches!(train_single(&m, &d, 1e6, 50), Err(Error::Invariant(_))));
    }
}
