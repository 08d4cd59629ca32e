//! Dense ReLU networks.
//!
//! Layer `l` (0-based) holds a `d_in × d_out` weight matrix that maps its
//! input row vector to a pre-activation: `pre = input · W + b`. Hidden layers
//! apply ReLU; the last layer is linear and bias-free, so the logits are
//! `z · W_top` where `z` is the penultimate feature vector.
//!
//! In layer-wise formulas the inputs are numbered from 1: `I^(1)` is the
//! network input, weight matrix `W^(i)` (stored at `layers()[i - 1]`) maps
//! `I^(i)` to the pre-activation of `I^(i+1)`, and `I^(L+1)` are the logits.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl DenseLayer {
    pub fn d_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
}

/// Everything a single forward pass computes.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `inputs[l]` is the row vector fed into layer `l`; `inputs[0]` is `x`.
    pub inputs: Vec<Vec<f64>>,
    /// `pre[l]` is the pre-activation produced by layer `l`; the last entry
    /// is the logit vector.
    pub pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Penultimate feature `z` (input to the top layer).
    pub fn features(&self) -> &[f64] {
        self.inputs.last().expect("trace has at least one layer")
    }

    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("trace has at least one layer")
    }

    /// Smallest |pre-activation| over the hidden (ReLU) layers, or `None`
    /// for a network without hidden layers.
    pub fn min_abs_hidden_preactivation(&self) -> Option<f64> {
        self.pre[..self.pre.len() - 1].iter().flatten().map(|v| v.abs()).reduce(f64::min)
    }

    /// Fails if any hidden pre-activation is closer than `threshold` to the
    /// ReLU kink.
    pub fn ensure_smooth(&self, threshold: f64) -> Result<()> {
        match self.min_abs_hidden_preactivation() {
            Some(v) if v < threshold => Err(Error::NonSmooth { value: v, threshold }),
            _ => Ok(()),
        }
    }
}

/// Network parameters registered on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundNet {
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
}

/// Batch forward pass recorded on a [`Graph`]; one example per row.
#[derive(Clone, Debug)]
pub struct GraphForward {
    pub inputs: Vec<Var>,
    pub pre: Vec<Var>,
}

impl GraphForward {
    pub fn features(&self) -> Var {
        *self.inputs.last().unwrap()
    }

    pub fn logits(&self) -> Var {
        *self.pre.last().unwrap()
    }
}

impl BoundNet {
    pub fn forward(&self, g: &mut Graph, x: Var) -> GraphForward {
        let depth = self.weights.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut cur = x;
        for l in 0..depth {
            inputs.push(cur);
            let mut p = g.matmul(cur, self.weights[l]);
            if let Some(b) = self.biases[l] {
                p = g.add_row(p, b);
            }
            pre.push(p);
            if l + 1 < depth {
                cur = g.relu(p);
            }
        }
        GraphForward { inputs, pre }
    }

    /// Like [`BoundNet::forward`] but with each hidden ReLU replaced by a
    /// fixed 0/1 mask (`masks[l]` has the shape of layer `l`'s output).
    pub fn forward_masked(&self, g: &mut Graph, x: Var, masks: &[Matrix]) -> GraphForward {
        let depth = self.weights.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut cur = x;
        for l in 0..depth {
            inputs.push(cur);
            let mut p = g.matmul(cur, self.weights[l]);
            if let Some(b) = self.biases[l] {
                p = g.add_row(p, b);
            }
            pre.push(p);
            if l + 1 < depth {
                let mask = g.constant(masks[l].clone());
                cur = g.mul(p, mask);
            }
        }
        GraphForward { inputs, pre }
    }

    /// `‖θ‖²` over every weight and bias.
    pub fn sq_norm(&self, g: &mut Graph) -> Var {
        let mut terms = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let sq = g.square(*w);
            terms.push(g.sum(sq));
            if let Some(b) = b {
                let sq = g.square(*b);
                terms.push(g.sum(sq));
            }
        }
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = g.add(acc, *t);
        }
        acc
    }

    /// Collects parameter adjoints in flatten order.
    pub fn flat_grad(&self, grads: &Gradients, net: &MlpNetwork) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.param_count());
        for (l, layer) in net.layers.iter().enumerate() {
            out.extend_from_slice(grads.get_or_zeros(self.weights[l], &layer.weights).as_slice());
            if let (Some(b), Some(bias)) = (self.biases[l], &layer.bias) {
                match grads.get(b) {
                    Some(m) => out.extend_from_slice(m.as_slice()),
                    None => out.extend(std::iter::repeat_n(0.0, bias.len())),
                }
            }
        }
        out
    }
}

impl MlpNetwork {
    /// Validates and wraps a layer stack.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(top) = layers.last() else {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        };
        if top.bias.is_some() {
            return Err(Error::InvalidArgument("top layer must be bias-free".into()));
        }
        if top.d_out() < 2 {
            return Err(Error::InvalidArgument("network needs at least two outputs".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Dimension {
                    expected: pair[0].d_out(),
                    actual: pair[1].d_in(),
                    context: "consecutive layer widths",
                });
            }
        }
        for layer in &layers {
            if layer.weights.is_empty() {
                return Err(Error::InvalidArgument("empty weight matrix".into()));
            }
            if let Some(b) = &layer.bias {
                if b.len() != layer.d_out() {
                    return Err(Error::Dimension {
                        expected: layer.d_out(),
                        actual: b.len(),
                        context: "bias length",
                    });
                }
            }
        }
        Ok(MlpNetwork { layers })
    }

    /// Gaussian init with variance `1/d_in`, zero biases on hidden layers
    /// when `hidden_bias` is set. `sizes` lists widths from input to logits.
    pub fn init(sizes: &[usize], hidden_bias: bool, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output sizes".into()));
        }
        let depth = sizes.len() - 1;
        let layers = (0..depth)
            .map(|l| {
                let (d_in, d_out) = (sizes[l], sizes[l + 1]);
                let std = (1.0 / d_in as f64).sqrt();
                let data = (0..d_in * d_out).map(|_| std * rng.normal()).collect();
                DenseLayer {
                    weights: Matrix::from_vec(d_in, d_out, data),
                    bias: (hidden_bias && l + 1 < depth).then(|| vec![0.0; d_out]),
                }
            })
            .collect();
        MlpNetwork::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    /// Widths from input to logits.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(DenseLayer::d_out));
        s
    }

    pub fn top_weights(&self) -> &Matrix {
        &self.layers.last().unwrap().weights
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Offset of layer `l`'s weights within the flat parameter vector.
    pub fn weight_offset(&self, l: usize) -> usize {
        self.layers[..l].iter().map(DenseLayer::param_count).sum()
    }

    /// Flat indices of layer `l`'s weight entries (biases excluded).
    pub fn weight_indices(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.weight_offset(l);
        start..start + self.layers[l].weights.len()
    }

    /// Flat indices of every weight entry, all layers, biases excluded.
    pub fn all_weight_indices(&self) -> Vec<usize> {
        (0..self.depth()).flat_map(|l| self.weight_indices(l)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), actual: x.len(), context: "network input" });
        }
        let depth = self.depth();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut p = layer.bias.clone().unwrap_or_else(|| vec![0.0; layer.d_out()]);
            for (i, &a) in cur.iter().enumerate() {
                if a != 0.0 {
                    for (o, &w) in p.iter_mut().zip(layer.weights.row(i)) {
                        *o += a * w;
                    }
                }
            }
            inputs.push(cur);
            cur = if l + 1 < depth { p.iter().map(|v| v.max(0.0)).collect() } else { Vec::new() };
            pre.push(p);
        }
        Ok(ForwardTrace { inputs, pre })
    }

    /// Logits for a batch, one example per row.
    pub fn logits_batch(&self, x: &Matrix) -> Matrix {
        let depth = self.depth();
        let mut cur = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut p = cur.matmul(&layer.weights);
            if let Some(b) = &layer.bias {
                for i in 0..p.rows() {
                    p.row_mut(i).iter_mut().zip(b).for_each(|(o, v)| *o += v);
                }
            }
            cur = if l + 1 < depth { p.map(|v| v.max(0.0)) } else { p };
        }
        cur
    }

    /// ReLU activity pattern of every hidden layer for a batch.
    pub fn relu_masks(&self, x: &Matrix) -> Vec<Matrix> {
        let depth = self.depth();
        let mut masks = Vec::with_capacity(depth - 1);
        let mut cur = x.clone();
        for layer in self.layers.iter().take(depth - 1) {
            let mut p = cur.matmul(&layer.weights);
            if let Some(b) = &layer.bias {
                for i in 0..p.rows() {
                    p.row_mut(i).iter_mut().zip(b).for_each(|(o, v)| *o += v);
                }
            }
            masks.push(p.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            cur = p.map(|v| v.max(0.0));
        }
        masks
    }

    /// Predicted class per row (lowest index on ties).
    pub fn predict_batch(&self, x: &Matrix) -> Vec<usize> {
        let logits = self.logits_batch(x);
        (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
    }

    /// Registers the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundNet {
        self.bind_with(g, true)
    }

    /// Registers the parameters as constants.
    pub fn bind_constant(&self, g: &mut Graph) -> BoundNet {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundNet {
        let leaf = |g: &mut Graph, m: Matrix| if trainable { g.param(m) } else { g.constant(m) };
        let mut weights = Vec::with_capacity(self.depth());
        let mut biases = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            weights.push(leaf(g, layer.weights.clone()));
            biases.push(layer.bias.as_ref().map(|b| leaf(g, Matrix::row_vector(b))));
        }
        BoundNet { weights, biases }
    }

    /// Parameters in the fixed order: layer by layer, weights row-major,
    /// then that layer's bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            if let Some(b) = &layer.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    /// Copy of this network with parameters replaced from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<MlpNetwork> {
        let mut net = self.clone();
        net.assign_flat(flat)?;
        Ok(net)
    }

    /// In-place [`MlpNetwork::unflatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension { expected: self.param_count(), actual: flat.len(), context: "flat parameters" });
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            let n = layer.weights.len();
            layer.weights.as_mut_slice().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            if let Some(b) = &mut layer.bias {
                let n = b.len();
                b.copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }

    /// Serializes to the `TRHNET v1` text format.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "TRHNET v1 {}", self.depth()).unwrap();
        for (l, layer) in self.layers.iter().enumerate() {
            writeln!(s, "layer {} {} {} {}", l + 1, layer.d_in(), layer.d_out(), u8::from(layer.bias.is_some())).unwrap();
            for i in 0..layer.d_in() {
                write_row(&mut s, layer.weights.row(i));
            }
            if let Some(b) = &layer.bias {
                write_row(&mut s, b);
            }
        }
        s
    }

    pub fn from_checkpoint_str(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let perr = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };

        let (ln, header) = lines.next().ok_or_else(|| perr(1, "empty checkpoint".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "TRHNET" || parts[1] != "v1" {
            return Err(perr(ln, format!("expected `TRHNET v1 <num_layers>`, found `{header}`")));
        }
        let depth: usize = parts[2].parse().map_err(|_| perr(ln, format!("bad layer count `{}`", parts[2])))?;

        let mut layers = Vec::with_capacity(depth);
        for expect in 1..=depth {
            let (ln, line) = lines.next().ok_or_else(|| perr(ln + 1, format!("missing layer {expect}")))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| perr(ln, format!("bad integer `{s}`")));
            if parts.len() != 5 || parts[0] != "layer" {
                return Err(perr(ln, format!("expected `layer <i> <d_in> <d_out> <has_bias>`, found `{line}`")));
            }
            if parse_usize(parts[1])? != expect {
                return Err(perr(ln, format!("expected layer index {expect}")));
            }
            let d_in = parse_usize(parts[2])?;
            let d_out = parse_usize(parts[3])?;
            let has_bias = match parts[4] {
                "0" => false,
                "1" => true,
                other => return Err(perr(ln, format!("has_bias must be 0 or 1, found `{other}`"))),
            };
            let mut data = Vec::with_capacity(d_in * d_out);
            for _ in 0..d_in {
                let (ln, row) = lines.next().ok_or_else(|| perr(ln + 1, "truncated weight rows".into()))?;
                data.extend(parse_row(row, d_out).map_err(|m| perr(ln, m))?);
            }
            let bias = if has_bias {
                let (ln, row) = lines.next().ok_or_else(|| perr(ln + 1, "missing bias row".into()))?;
                Some(parse_row(row, d_out).map_err(|m| perr(ln, m))?)
            } else {
                None
            };
            layers.push(DenseLayer { weights: Matrix::from_vec(d_in, d_out, data), bias });
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(perr(ln, format!("unexpected trailing content `{extra}`")));
        }
        MlpNetwork::new(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MlpNetwork::from_checkpoint_str(&text, path)
    }
}

fn write_row(s: &mut String, values: &[f64]) {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            s.push(' ');
        }
        // Display for f64 is the shortest string that parses back exactly
        write!(s, "{v}").unwrap();
    }
    s.push('\n');
}

fn parse_row(row: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let vals = row
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad float `{t}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if vals.len() != expected {
        return Err(format!("expected {expected} values, found {}", vals.len()));
    }
    Ok(vals)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Evaluates `build` on a fresh graph with the network's parameters bound as
/// leaves and returns the scalar value with its flat gradient.
pub fn backprop<F>(net: &MlpNetwork, build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Graph, &BoundNet) -> Var,
{
    let mut g = Graph::new();
    let bound = net.bind(&mut g);
    let out = build(&mut g, &bound);
    let loss = g.value(out).item();
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0, loss });
    }
    let grads = g.backward(out);
    Ok((loss, bound.flat_grad(&grads, net)))
}
