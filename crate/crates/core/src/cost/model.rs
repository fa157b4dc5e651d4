use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::features::EdgeFeatures;
use crate::{Error, Result};

/// Width of the hidden layers of each standard architecture.
const MLP1_WIDTH: usize = 64;
const MLP2_WIDTH: usize = 32;
const TWO_STREAM_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    HandcraftedA,
    HandcraftedB,
    Linear,
    Mlp1,
    Mlp2,
    TwoStream,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::HandcraftedA,
        Architecture::HandcraftedB,
        Architecture::Linear,
        Architecture::Mlp1,
        Architecture::Mlp2,
        Architecture::TwoStream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::HandcraftedA => "handcrafted_A",
            Architecture::HandcraftedB => "handcrafted_B",
            Architecture::Linear => "linear",
            Architecture::Mlp1 => "mlp1",
            Architecture::Mlp2 => "mlp2",
            Architecture::TwoStream => "twostream",
        }
    }

    pub fn is_learned(self) -> bool {
        !matches!(
            self,
            Architecture::HandcraftedA | Architecture::HandcraftedB
        )
    }

    pub(crate) fn tag(self) -> u8 {
        Self::ALL.iter().position(|a| *a == self).unwrap() as u8
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Number of hidden layers in the pairwise stream and the auxiliary stream.
    fn depth(self) -> (usize, usize) {
        match self {
            Architecture::Linear => (0, 0),
            Architecture::Mlp1 => (1, 0),
            Architecture::Mlp2 => (2, 0),
            Architecture::TwoStream => (2, 2),
            _ => (0, 0),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::InvalidInput(format!(
                    "unknown architecture {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Fully connected layer `y = W x + b`, with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != weights.nrows() {
            return Err(Error::Shape {
                expected: weights.nrows(),
                actual: bias.len(),
                context: "layer bias",
            });
        }
        Ok(Self { weights, bias })
    }

    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (inputs as f64).sqrt();
        Self {
            weights: DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-scale..scale)),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    /// Applies the layer to every row of `x`.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weights.transpose();
        for (c, b) in self.bias.iter().enumerate() {
            z.column_mut(c).add_scalar_mut(*b);
        }
        z
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: DMatrix::zeros(self.outputs(), self.inputs()),
            bias: DVector::zeros(self.outputs()),
        }
    }
}

/// Learnable costs: constant birth and death costs, a detection cost linear in
/// the confidence, and a network over link features. Hidden layers use
/// rectified-linear units and the output is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedModel {
    architecture: Architecture,
    pub entry_cost: f64,
    pub exit_cost: f64,
    pub confidence_weight: f64,
    pub detection_bias: f64,
    spatial: Vec<Dense>,
    aux: Vec<Dense>,
    head: Dense,
}

/// Activations kept by [`LearnedModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    confidences: DVector<f64>,
    /// Input of every pairwise layer followed by the stream output.
    spatial: Vec<DMatrix<f64>>,
    aux: Vec<DMatrix<f64>>,
    head_input: DMatrix<f64>,
}

impl LearnedModel {
    /// Standard layer widths, weights drawn uniformly from `±1/√fan_in`,
    /// biases zero, birth and death costs 0.5 and confidence weight −0.5.
    pub fn new(
        architecture: Architecture,
        input_dim: usize,
        aux_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let widths: &[usize] = match architecture {
            Architecture::Linear => &[],
            Architecture::Mlp1 => &[MLP1_WIDTH],
            Architecture::Mlp2 => &[MLP2_WIDTH, MLP2_WIDTH],
            Architecture::TwoStream => &[TWO_STREAM_WIDTH, TWO_STREAM_WIDTH],
            _ => {
                return Err(Error::Model(format!(
                    "{architecture} has no learnable parameters"
                )))
            }
        };
        if input_dim == 0 {
            return Err(Error::Model("input dimension must be positive".into()));
        }
        let stream = |dim: usize, rng: &mut _| {
            let mut layers = Vec::new();
            let mut prev = dim;
            for &w in widths {
                layers.push(Dense::init(prev, w, rng));
                prev = w;
            }
            (layers, prev)
        };
        let (spatial, mut head_in) = stream(input_dim, rng);
        let aux = if architecture == Architecture::TwoStream {
            let dim = aux_dim.filter(|d| *d > 0).ok_or_else(|| {
                Error::Model("twostream needs a positive auxiliary dimension".into())
            })?;
            let (layers, out) = stream(dim, rng);
            head_in += out;
            layers
        } else {
            Vec::new()
        };
        let head = Dense::init(head_in, 1, rng);
        Self::from_layers(architecture, spatial, aux, head)
    }

    /// Builds a model from explicit layers. Layer counts must match the
    /// architecture; hidden widths are free.
    pub fn from_layers(
        architecture: Architecture,
        spatial: Vec<Dense>,
        aux: Vec<Dense>,
        head: Dense,
    ) -> Result<Self> {
        if !architecture.is_learned() {
            return Err(Error::Model(format!(
                "{architecture} is not a learned architecture"
            )));
        }
        let (ds, da) = architecture.depth();
        if spatial.len() != ds || aux.len() != da {
            return Err(Error::Model(format!(
                "{architecture} needs {ds} pairwise and {da} auxiliary hidden layers, got {} and {}",
                spatial.len(),
                aux.len()
            )));
        }
        let chain = |layers: &[Dense], what: &'static str| -> Result<()> {
            for w in layers.windows(2) {
                if w[1].inputs() != w[0].outputs() {
                    return Err(Error::Shape {
                        expected: w[0].outputs(),
                        actual: w[1].inputs(),
                        context: what,
                    });
                }
            }
            Ok(())
        };
        chain(&spatial, "pairwise layer input")?;
        chain(&aux, "auxiliary layer input")?;
        if architecture == Architecture::TwoStream && aux.is_empty() {
            return Err(Error::Model("twostream needs an auxiliary stream".into()));
        }
        let stream_out = |layers: &[Dense]| layers.last().map(Dense::outputs);
        let head_in = match architecture {
            Architecture::Linear => head.inputs(),
            Architecture::TwoStream => stream_out(&spatial).unwrap() + stream_out(&aux).unwrap(),
            _ => stream_out(&spatial).unwrap(),
        };
        if head.inputs() != head_in || head.outputs() != 1 {
            return Err(Error::Shape {
                expected: head_in,
                actual: head.inputs(),
                context: "output layer input",
            });
        }
        Ok(Self {
            architecture,
            entry_cost: 0.5,
            exit_cost: 0.5,
            confidence_weight: -0.5,
            detection_bias: 0.0,
            spatial,
            aux,
            head,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_dim(&self) -> usize {
        self.spatial.first().unwrap_or(&self.head).inputs()
    }

    pub fn aux_dim(&self) -> Option<usize> {
        self.aux.first().map(Dense::inputs)
    }

    pub fn spatial_layers(&self) -> &[Dense] {
        &self.spatial
    }

    pub fn aux_layers(&self) -> &[Dense] {
        &self.aux
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.spatial
            .iter()
            .chain(&self.aux)
            .chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.spatial
            .iter_mut()
            .chain(self.aux.iter_mut())
            .chain(std::iter::once(&mut self.head))
    }

    pub fn parameter_count(&self) -> usize {
        4 + self
            .layers()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
    }

    /// Parameters in a fixed order: the four unary scalars, then every layer
    /// (pairwise stream, auxiliary stream, output) as column-major weights
    /// followed by the bias.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        v.extend([
            self.entry_cost,
            self.exit_cost,
            self.confidence_weight,
            self.detection_bias,
        ]);
        for l in self.layers() {
            v.extend(l.weights.iter());
            v.extend(l.bias.iter());
        }
        DVector::from_vec(v)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape {
                expected: self.parameter_count(),
                actual: flat.len(),
                context: "flat parameter vector",
            });
        }
        self.entry_cost = flat[0];
        self.exit_cost = flat[1];
        self.confidence_weight = flat[2];
        self.detection_bias = flat[3];
        let mut at = 4;
        for l in self.layers_mut() {
            let n = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the parameter bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.architecture.tag() as u64;
        for v in self.to_flat().iter() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Costs for every variable of the graph the features were taken from, in
    /// the graph's variable order `[in, det, out, link]`.
    pub fn forward(&self, features: &EdgeFeatures) -> Result<(DVector<f64>, ForwardCache)> {
        let n = features.detection_count();
        let links = features.link_count();
        if features.pairs.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: features.pairs.ncols(),
                context: "pair feature width",
            });
        }
        let run = |layers: &[Dense], input: DMatrix<f64>| {
            let mut acts = vec![input];
            for l in layers {
                let mut z = l.forward(acts.last().unwrap());
                z.apply(|v| *v = v.max(0.0));
                acts.push(z);
            }
            acts
        };
        let spatial = run(&self.spatial, features.pairs.clone());
        let (aux, head_input) = match self.aux_dim() {
            None => (Vec::new(), spatial.last().unwrap().clone()),
            Some(dim) => {
                let a = features
                    .aux
                    .as_ref()
                    .ok_or_else(|| Error::Model("model needs auxiliary features".into()))?;
                if a.ncols() != dim || a.nrows() != links {
                    return Err(Error::Shape {
                        expected: dim,
                        actual: a.ncols(),
                        context: "auxiliary feature width",
                    });
                }
                let acts = run(&self.aux, a.clone());
                let (s, x) = (spatial.last().unwrap(), acts.last().unwrap());
                let mut joined = DMatrix::zeros(links, s.ncols() + x.ncols());
                joined.columns_mut(0, s.ncols()).copy_from(s);
                joined.columns_mut(s.ncols(), x.ncols()).copy_from(x);
                (acts, joined)
            }
        };
        let out = self.head.forward(&head_input);

        let mut c = DVector::zeros(3 * n + links);
        for i in 0..n {
            c[i] = self.entry_cost;
            c[n + i] = self.confidence_weight * features.confidences[i] + self.detection_bias;
            c[2 * n + i] = self.exit_cost;
        }
        for k in 0..links {
            c[3 * n + k] = out[(k, 0)];
        }
        let cache = ForwardCache {
            fingerprint: self.fingerprint(),
            confidences: features.confidences.clone(),
            spatial,
            aux,
            head_input,
        };
        Ok((c, cache))
    }

    /// Reverse-mode gradient of a loss with respect to the flat parameters,
    /// given the loss gradient with respect to the costs.
    pub fn backward(&self, cache: &ForwardCache, dl_dc: &DVector<f64>) -> Result<DVector<f64>> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::Model(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        let n = cache.confidences.len();
        let links = cache.head_input.nrows();
        if dl_dc.len() != 3 * n + links {
            return Err(Error::Shape {
                expected: 3 * n + links,
                actual: dl_dc.len(),
                context: "dL/dc",
            });
        }
        let mut grad = self.zeros_like();
        let g_det = dl_dc.rows(n, n);
        grad.entry_cost = dl_dc.rows(0, n).sum();
        grad.exit_cost = dl_dc.rows(2 * n, n).sum();
        grad.confidence_weight = cache.confidences.dot(&g_det);
        grad.detection_bias = g_det.sum();

        let g_out = DMatrix::from_column_slice(links, 1, dl_dc.rows(3 * n, links).as_slice());
        grad.head.weights = g_out.transpose() * &cache.head_input;
        grad.head.bias[0] = g_out.sum();
        let d_head_in = &g_out * &self.head.weights;

        let spatial_width = cache.spatial.last().unwrap().ncols();
        let back =
            |layers: &[Dense], grads: &mut [Dense], acts: &[DMatrix<f64>], mut dy: DMatrix<f64>| {
                for l in (0..layers.len()).rev() {
                    let y = &acts[l + 1];
                    dy.zip_apply(y, |d, v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    grads[l].weights = dy.transpose() * &acts[l];
                    grads[l].bias =
                        DVector::from_iterator(dy.ncols(), dy.column_iter().map(|c| c.sum()));
                    if l > 0 {
                        dy = &dy * &layers[l].weights;
                    }
                }
            };
        back(
            &self.spatial,
            &mut grad.spatial,
            &cache.spatial,
            d_head_in.columns(0, spatial_width).into_owned(),
        );
        if !self.aux.is_empty() {
            let w = d_head_in.ncols() - spatial_width;
            back(
                &self.aux,
                &mut grad.aux,
                &cache.aux,
                d_head_in.columns(spatial_width, w).into_owned(),
            );
        }
        Ok(grad.to_flat())
    }

    fn zeros_like(&self) -> Self {
        Self {
            architecture: self.architecture,
            entry_cost: 0.0,
            exit_cost: 0.0,
            confidence_weight: 0.0,
            detection_bias: 0.0,
            spatial: self.spatial.iter().map(Dense::zeros_like).collect(),
            aux: self.aux.iter().map(Dense::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }
}
