//! Structured ReLU network whose layers stack a learned block `V_Q O*` on
//! top of a fixed, seeded random block.

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Sizes of a fixed-size network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsfnDims {
    /// Input dimension (scalars per sample).
    pub input: usize,
    /// Number of classes, also the target dimension.
    pub classes: usize,
    /// Hidden neurons per layer.
    pub hidden: usize,
    /// Number of layers.
    pub layers: usize,
}

impl SsfnDims {
    pub fn new(input: usize, classes: usize, hidden: usize, layers: usize) -> Result<Self> {
        if input == 0 {
            return Err(Error::InvalidParameter(
                "input dimension must be >= 1".into(),
            ));
        }
        if classes == 0 {
            return Err(Error::InvalidParameter("class count must be >= 1".into()));
        }
        if layers == 0 {
            return Err(Error::InvalidParameter("layer count must be >= 1".into()));
        }
        if hidden < 2 * classes + 1 {
            return Err(Error::InvalidParameter(format!(
                "hidden width {hidden} leaves the random block empty; need at least 2Q+1 = {}",
                2 * classes + 1
            )));
        }
        Ok(Self {
            input,
            classes,
            hidden,
            layers,
        })
    }

    /// `hidden = 2 * classes + extra`.
    pub fn with_extra_neurons(
        input: usize,
        classes: usize,
        extra: usize,
        layers: usize,
    ) -> Result<Self> {
        Self::new(input, classes, 2 * classes + extra, layers)
    }

    pub fn random_rows(&self) -> usize {
        self.hidden - 2 * self.classes
    }

    /// Column count of the weight matrix for 1-indexed `layer`.
    pub fn layer_input_width(&self, layer: usize) -> usize {
        if layer <= 1 {
            self.input
        } else {
            self.hidden
        }
    }
}

/// Elementwise nonlinearity. ReLU is the only one shipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    pub fn apply_in_place(self, m: &mut Matrix) {
        match self {
            Activation::Relu => m.apply(|v| *v = v.max(0.0)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// `V_Q = [I_Q; -I_Q]`, a `2Q x Q` matrix.
pub fn make_vq(classes: usize) -> Result<Matrix> {
    if classes == 0 {
        return Err(Error::InvalidParameter("V_Q needs Q >= 1".into()));
    }
    Ok(Matrix::from_fn(2 * classes, classes, |i, j| {
        if i == j {
            1.0
        } else if i == j + classes {
            -1.0
        } else {
            0.0
        }
    }))
}

/// `U_Q = [I_Q  -I_Q]`, the left inverse of `relu(V_Q t)`.
pub fn make_uq(classes: usize) -> Result<Matrix> {
    Ok(make_vq(classes)?.transpose())
}

/// Distribution of the entries of the fixed random blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RandomDistribution {
    /// `N(0, 1) / sqrt(fan_in)`.
    #[default]
    ScaledNormal,
    /// `U(-a, a)` with `a = sqrt(3 / fan_in)`, same variance as `ScaledNormal`.
    ScaledUniform,
}

impl RandomDistribution {
    pub fn name(self) -> &'static str {
        match self {
            RandomDistribution::ScaledNormal => "normal",
            RandomDistribution::ScaledUniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(RandomDistribution::ScaledNormal),
            "uniform" => Some(RandomDistribution::ScaledUniform),
            _ => None,
        }
    }

    /// Standard deviation of a single entry for the given fan-in.
    pub fn entry_std(self, fan_in: usize) -> f64 {
        1.0 / (fan_in as f64).sqrt()
    }
}

/// Deterministic random block keyed by `(seed, layer)`. Each layer draws from
/// its own ChaCha stream, so growing layers in any order yields the same
/// matrices. Entries are filled in row-major order.
pub fn sample_random_matrix(
    rows: usize,
    cols: usize,
    seed: u64,
    layer: usize,
    dist: RandomDistribution,
) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    let scale = dist.entry_std(cols);
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            out[(i, j)] = match dist {
                RandomDistribution::ScaledNormal => {
                    let z: f64 = rng.sample(StandardNormal);
                    z * scale
                }
                RandomDistribution::ScaledUniform => {
                    let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
                    u * scale * 3f64.sqrt()
                }
            };
        }
    }
    out
}

/// Weight matrix `[V_Q O*; R]` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    full: Matrix,
    classes: usize,
}

impl WeightMatrix {
    /// Stacks `V_Q * o_star` on top of `random`.
    pub fn build(o_star: &Matrix, random: &Matrix) -> Result<Self> {
        if o_star.ncols() != random.ncols() {
            return Err(Error::Dimension(format!(
                "O* has {} columns but the random block has {}",
                o_star.ncols(),
                random.ncols()
            )));
        }
        let q = o_star.nrows();
        if q == 0 {
            return Err(Error::Dimension("O* has no rows".into()));
        }
        let cols = o_star.ncols();
        let mut full = Matrix::zeros(2 * q + random.nrows(), cols);
        full.rows_mut(0, q).copy_from(o_star);
        full.rows_mut(q, q).copy_from(&(-o_star));
        full.rows_mut(2 * q, random.nrows()).copy_from(random);
        Ok(Self { full, classes: q })
    }

    /// Wraps an already-stacked matrix, checking the `[O; -O; R]` structure.
    pub fn from_full(full: Matrix, classes: usize) -> Result<Self> {
        if classes == 0 || full.nrows() < 2 * classes {
            return Err(Error::Dimension(format!(
                "weight with {} rows cannot hold a 2Q = {} learned block",
                full.nrows(),
                2 * classes
            )));
        }
        let top = full.rows(0, classes);
        let neg = full.rows(classes, classes);
        if top.iter().zip(neg.iter()).any(|(a, b)| *a != -*b) {
            return Err(Error::Dimension(
                "learned block is not of the form [O; -O]".into(),
            ));
        }
        Ok(Self { full, classes })
    }

    pub fn full(&self) -> &Matrix {
        &self.full
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn o_star(&self) -> DMatrixView<'_, f64> {
        self.full.rows(0, self.classes)
    }

    pub fn learned_rows(&self) -> DMatrixView<'_, f64> {
        self.full.rows(0, 2 * self.classes)
    }

    pub fn random_rows(&self) -> DMatrixView<'_, f64> {
        self.full
            .rows(2 * self.classes, self.full.nrows() - 2 * self.classes)
    }
}

/// Convenience wrapper matching the free-function form.
pub fn build_weight(o_star: &Matrix, random: &Matrix) -> Result<WeightMatrix> {
    WeightMatrix::build(o_star, random)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `Q x J` network outputs.
    pub scores: Matrix,
    /// Argmax per column, ties resolved to the lowest class.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsfnNetwork {
    dims: SsfnDims,
    activation: Activation,
    weights: Vec<WeightMatrix>,
    output: Option<Matrix>,
}

impl SsfnNetwork {
    pub fn new(dims: SsfnDims) -> Self {
        Self {
            dims,
            activation: Activation::Relu,
            weights: Vec::with_capacity(dims.layers),
            output: None,
        }
    }

    pub fn dims(&self) -> &SsfnDims {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[WeightMatrix] {
        &self.weights
    }

    pub fn output(&self) -> Option<&Matrix> {
        self.output.as_ref()
    }

    /// Appends the next layer, checking its shape against the dims.
    pub fn push_layer(&mut self, w: WeightMatrix) -> Result<()> {
        let layer = self.weights.len() + 1;
        if layer > self.dims.layers {
            return Err(Error::Dimension(format!(
                "network already has all {} layers",
                self.dims.layers
            )));
        }
        let want = (self.dims.hidden, self.dims.layer_input_width(layer));
        if w.full.shape() != want || w.classes != self.dims.classes {
            return Err(Error::Dimension(format!(
                "layer {layer} weight is {:?}, expected {:?}",
                w.full.shape(),
                want
            )));
        }
        self.weights.push(w);
        Ok(())
    }

    /// Sets the output matrix. Its column count must match the current
    /// feature width.
    pub fn set_output(&mut self, output: Matrix) -> Result<()> {
        let width = self.feature_width();
        if output.shape() != (self.dims.classes, width) {
            return Err(Error::Dimension(format!(
                "output is {:?}, expected {:?}",
                output.shape(),
                (self.dims.classes, width)
            )));
        }
        self.output = Some(output);
        Ok(())
    }

    /// Width of the last built layer's features.
    pub fn feature_width(&self) -> usize {
        if self.weights.is_empty() {
            self.dims.input
        } else {
            self.dims.hidden
        }
    }

    /// Features after `upto` layers; `upto = 0` returns the input.
    pub fn forward_features(&self, x: &Matrix, upto: usize) -> Result<Matrix> {
        if x.nrows() != self.dims.input {
            return Err(Error::Dimension(format!(
                "input has {} rows, network expects {}",
                x.nrows(),
                self.dims.input
            )));
        }
        if upto > self.weights.len() {
            return Err(Error::Dimension(format!(
                "requested {upto} layers but only {} are built",
                self.weights.len()
            )));
        }
        let mut y = x.clone();
        for w in &self.weights[..upto] {
            y = self.step(w, &y);
        }
        Ok(y)
    }

    /// One layer: `g(W y)`.
    pub fn step(&self, w: &WeightMatrix, y: &Matrix) -> Matrix {
        let mut next = &w.full * y;
        self.activation.apply_in_place(&mut next);
        next
    }

    pub fn predict(&self, x: &Matrix) -> Result<Prediction> {
        let output = self
            .output
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("network has no output matrix".into()))?;
        let y = self.forward_features(x, self.weights.len())?;
        let scores = output * y;
        let labels = argmax_columns(&scores);
        Ok(Prediction { scores, labels })
    }

    pub(crate) fn from_parts(
        dims: SsfnDims,
        activation: Activation,
        weights: Vec<WeightMatrix>,
        output: Option<Matrix>,
    ) -> Result<Self> {
        let mut net = Self {
            dims,
            activation,
            weights: Vec::new(),
            output: None,
        };
        for w in weights {
            net.push_layer(w)?;
        }
        if let Some(o) = output {
            net.set_output(o)?;
        }
        Ok(net)
    }
}

/// Per-column argmax, lowest index on ties.
pub fn argmax_columns(m: &Matrix) -> Vec<usize> {
    m.column_iter()
        .map(|col| {
            let mut best = 0;
            for (i, v) in col.iter().enumerate() {
                if *v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
