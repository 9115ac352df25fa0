//! Learned feature map: a two-hidden-layer tanh network whose output is read
//! as an `n_x x n_net` matrix, one feature row per state dimension.
//!
//! All weights live in one flat parameter vector (layer by layer: weights
//! row-major, then biases) so optimizers and finite-difference checks can
//! treat the network as a point in `R^p`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roversim::{
    RoverInput, RoverState, SINKAGE_RANGE, SLIP_RANGE, TORQUE_RANGE, VELOCITY_RANGE,
};

/// Network inputs: velocity, then torque, slip and sinkage of each wheel.
pub const INPUT_DIM: usize = 10;
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];
pub const DEFAULT_N_NET: usize = 16;
pub const FEATNET_FORMAT_VERSION: u32 = 1;

fn normalize(x: f64, range: (f64, f64)) -> f64 {
    2.0 * (x - range.0) / (range.1 - range.0) - 1.0
}

/// Inputs mapped affinely so each sampling range becomes `[-1, 1]`.
pub fn normalize_input(state: &RoverState, input: &RoverInput) -> [f64; INPUT_DIM] {
    let mut z = [0.0; INPUT_DIM];
    z[0] = normalize(state.v, VELOCITY_RANGE);
    for w in 0..3 {
        z[1 + w] = normalize(input.torque[w], TORQUE_RANGE);
        z[4 + w] = normalize(input.slip[w], SLIP_RANGE);
        z[7 + w] = normalize(input.sinkage[w], SINKAGE_RANGE);
    }
    z
}

/// True when every normalized input lies in `[-1, 1]`; outside it the network extrapolates.
pub fn input_in_range(z: &[f64; INPUT_DIM]) -> bool {
    z.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    rows: usize,
    cols: usize,
    /// Offset of the row-major weights; the bias follows them.
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.rows * self.cols]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.rows * self.cols;
        &p[start..start + self.rows]
    }

    fn len(&self) -> usize {
        self.rows * (self.cols + 1)
    }

    fn apply(&self, p: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = self.weights(p);
        out.extend(self.bias(p).iter().enumerate().map(|(r, b)| {
            let row = &w[r * self.cols..(r + 1) * self.cols];
            b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        }));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    n_x: usize,
    n_net: usize,
    hidden: [usize; 2],
    layers: [Layer; 3],
    params: Vec<f64>,
}

impl FeatureNet {
    /// Zero-initialised network.
    pub fn zeros(n_x: usize, hidden: [usize; 2], n_net: usize) -> Result<Self> {
        if n_x == 0 || hidden.contains(&0) {
            return Err(Error::Argument(format!("invalid network shape n_x={n_x} hidden={hidden:?}")));
        }
        let dims = [INPUT_DIM, hidden[0], hidden[1], n_x * n_net];
        let mut offset = 0;
        let layers = [0, 1, 2].map(|l| {
            let layer = Layer { rows: dims[l + 1], cols: dims[l], offset };
            offset += layer.len();
            layer
        });
        Ok(FeatureNet { n_x, n_net, hidden, layers, params: vec![0.0; offset] })
    }

    /// Network with weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(n_x: usize, hidden: [usize; 2], n_net: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(n_x, hidden, n_net)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.layers {
            let bound = 1.0 / (layer.cols as f64).sqrt();
            for p in &mut net.params[layer.offset..layer.offset + layer.len()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_net(&self) -> usize {
        self.n_net
    }

    pub fn hidden(&self) -> [usize; 2] {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_finite(&self) -> Result<()> {
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("feature network weights".into()));
        }
        Ok(())
    }

    fn reshape(&self, out: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_x, self.n_net, out)
    }

    fn run(&self, z: &[f64; INPUT_DIM]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let mut h1 = Vec::with_capacity(self.hidden[0]);
        self.layers[0].apply(p, z, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h2 = Vec::with_capacity(self.hidden[1]);
        self.layers[1].apply(p, &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = Vec::with_capacity(self.n_x * self.n_net);
        self.layers[2].apply(p, &h2, &mut out);
        (h1, h2, out)
    }

    /// Feature matrix for an already normalized input.
    pub fn forward_normalized(&self, z: &[f64; INPUT_DIM]) -> Result<DMatrix<f64>> {
        self.check_finite()?;
        Ok(self.reshape(&self.run(z).2))
    }

    /// Feature matrix `Phi_net(x, u)`, shape `n_x x n_net`.
    pub fn forward(&self, state: &RoverState, input: &RoverInput) -> Result<DMatrix<f64>> {
        self.forward_normalized(&normalize_input(state, input))
    }

    /// Forward pass that records activations on `tape`; returns the features
    /// and the index of the tape entry.
    pub fn forward_taped(
        &self,
        state: &RoverState,
        input: &RoverInput,
        tape: &mut GradientTape,
    ) -> Result<(DMatrix<f64>, usize)> {
        self.check_finite()?;
        if tape.grad.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "tape holds {} gradients for a network with {} parameters",
                tape.grad.len(),
                self.params.len()
            )));
        }
        let z = normalize_input(state, input);
        let (h1, h2, out) = self.run(&z);
        tape.entries.push(TapeEntry { z, h1, h2 });
        Ok((self.reshape(&out), tape.entries.len() - 1))
    }

    /// Accumulates into `tape` the gradient of a loss whose derivative with
    /// respect to the features of entry `index` is `d_phi` (`n_x x n_net`).
    pub fn backward(&self, tape: &mut GradientTape, index: usize, d_phi: &DMatrix<f64>) -> Result<()> {
        if d_phi.shape() != (self.n_x, self.n_net) {
            return Err(Error::Shape(format!(
                "feature gradient is {:?}, expected {:?}",
                d_phi.shape(),
                (self.n_x, self.n_net)
            )));
        }
        let GradientTape { entries, grad } = tape;
        let entry = entries
            .get(index)
            .ok_or_else(|| Error::Shape(format!("no tape entry {index} (have {})", entries.len())))?;
        if grad.len() != self.params.len() {
            return Err(Error::Shape("tape does not belong to this network".into()));
        }
        let d_out: Vec<f64> = (0..self.n_x)
            .flat_map(|r| (0..self.n_net).map(move |c| (r, c)))
            .map(|rc| d_phi[rc])
            .collect();
        let d_h2 = self.layer_backward(2, &entry.h2, &d_out, grad);
        let d_a2: Vec<f64> = d_h2.iter().zip(&entry.h2).map(|(d, h)| d * (1.0 - h * h)).collect();
        let d_h1 = self.layer_backward(1, &entry.h1, &d_a2, grad);
        let d_a1: Vec<f64> = d_h1.iter().zip(&entry.h1).map(|(d, h)| d * (1.0 - h * h)).collect();
        self.layer_backward(0, &entry.z, &d_a1, grad);
        Ok(())
    }

    /// Adds the weight and bias gradients of layer `l` and returns the
    /// gradient with respect to its input.
    fn layer_backward(&self, l: usize, x: &[f64], d_y: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let layer = self.layers[l];
        let w = layer.weights(&self.params);
        let mut d_x = vec![0.0; layer.cols];
        let bias_start = layer.offset + layer.rows * layer.cols;
        for (r, &d) in d_y.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let g = &mut grad[layer.offset + r * layer.cols..layer.offset + (r + 1) * layer.cols];
            let row = &w[r * layer.cols..(r + 1) * layer.cols];
            for c in 0..layer.cols {
                g[c] += d * x[c];
                d_x[c] += d * row[c];
            }
            grad[bias_start + r] += d;
        }
        d_x
    }

    pub fn checkpoint(&self) -> FeatNetCheckpoint {
        FeatNetCheckpoint {
            kind: "featnet".into(),
            version: FEATNET_FORMAT_VERSION,
            activation: "tanh".into(),
            n_x: self.n_x,
            n_net: self.n_net,
            input_dim: INPUT_DIM,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    rows: l.rows,
                    cols: l.cols,
                    weights: l.weights(&self.params).to_vec(),
                    bias: l.bias(&self.params).to_vec(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TapeEntry {
    z: [f64; INPUT_DIM],
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Recorded activations of taped forward passes and the accumulated
/// parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    entries: Vec<TapeEntry>,
    grad: Vec<f64>,
}

impl GradientTape {
    pub fn new(net: &FeatureNet) -> Self {
        GradientTape { entries: Vec::new(), grad: vec![0.0; net.num_params()] }
    }

    /// Drops recorded activations and zeroes the gradient.
    pub fn reset(&mut self) {
        self.entries.clear();
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn gradient(&self) -> &[f64] {
        &self.grad
    }

    pub fn into_gradient(self) -> Vec<f64> {
        self.grad
    }
}

/// `Phi = [Phi_nom, Phi_net]`.
pub fn assemble_features(phi_nom: &DMatrix<f64>, phi_net: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if phi_nom.nrows() != phi_net.nrows() {
        return Err(Error::Shape(format!(
            "nominal features have {} rows, learned features {}",
            phi_nom.nrows(),
            phi_net.nrows()
        )));
    }
    let (r, a, b) = (phi_nom.nrows(), phi_nom.ncols(), phi_net.ncols());
    let mut phi = DMatrix::zeros(r, a + b);
    phi.view_mut((0, 0), (r, a)).copy_from(phi_nom);
    phi.view_mut((0, a), (r, b)).copy_from(phi_net);
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatNetCheckpoint {
    pub kind: String,
    pub version: u32,
    pub activation: String,
    pub n_x: usize,
    pub n_net: usize,
    pub input_dim: usize,
    pub layers: Vec<LayerCheckpoint>,
}

impl FeatNetCheckpoint {
    pub fn restore(&self) -> Result<FeatureNet> {
        if self.kind != "featnet" || self.version != FEATNET_FORMAT_VERSION || self.activation != "tanh" {
            return Err(Error::Format(format!(
                "unsupported network checkpoint kind={} version={} activation={}",
                self.kind, self.version, self.activation
            )));
        }
        if self.input_dim != INPUT_DIM || self.layers.len() != 3 {
            return Err(Error::Format("network checkpoint has the wrong architecture".into()));
        }
        let hidden = [self.layers[0].rows, self.layers[1].rows];
        let mut net = FeatureNet::zeros(self.n_x, hidden, self.n_net)?;
        for (layer, ck) in net.layers.iter().zip(&self.layers) {
            if (ck.rows, ck.cols) != (layer.rows, layer.cols)
                || ck.weights.len() != ck.rows * ck.cols
                || ck.bias.len() != ck.rows
            {
                return Err(Error::Format(format!(
                    "layer {}x{} does not fit the declared shape {}x{}",
                    ck.rows, ck.cols, layer.rows, layer.cols
                )));
            }
            let start = layer.offset;
            net.params[start..start + ck.weights.len()].copy_from_slice(&ck.weights);
            net.params[start + ck.weights.len()..start + layer.len()].copy_from_slice(&ck.bias);
        }
        net.check_finite()?;
        Ok(net)
    }
}
