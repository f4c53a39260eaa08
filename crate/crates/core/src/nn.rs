//! Minimal dense neural-network kernel.
//!
//! One MLP implementation serves both the federated task model and the
//! agent Q-networks: deterministic initialization, forward pass with
//! softmax cross-entropy, analytic backprop, and plain SGD. Everything is
//! double precision with fixed summation order, so identical inputs give
//! bitwise-identical outputs.

use std::io::{Read, Write};

use rand::Rng;

use crate::{rng, Error, Result};

/// Element-wise nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    /// No-op activation; stacking identity layers yields a linear model.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed in terms of the post-activation value.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a dense MLP: input width, hidden widths, output width.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("all layer widths must be > 0".into()));
        }
        if hidden_dims.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one hidden layer is required".into(),
            ));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        })
    }

    /// Default agent network: one hidden layer of 256 units, two outputs.
    pub fn agent_default(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![256],
            output_dim: 2,
            activation: Activation::Relu,
        }
    }

    /// (fan_in, fan_out) of every affine layer, first to last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    /// Parameter layout: per layer, a weight entry `[fan_in, fan_out]`
    /// followed by a bias entry `[fan_out]`.
    pub fn layout(&self) -> Layout {
        let mut entries = Vec::new();
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            entries.push(LayoutEntry {
                name: format!("layer{i}.weight"),
                shape: vec![fan_in, fan_out],
            });
            entries.push(LayoutEntry {
                name: format!("layer{i}.bias"),
                shape: vec![fan_out],
            });
        }
        Layout(entries)
    }
}

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of layout entries describing how a flat vector maps to
/// layer tensors.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Layout(pub Vec<LayoutEntry>);

impl Layout {
    pub fn total_len(&self) -> usize {
        self.0.iter().map(LayoutEntry::len).sum()
    }
}

/// Flat, contiguous model parameters plus their layout. The unit of
/// aggregation and divergence measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "layout describes {} values, got {}",
                layout.total_len(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.total_len();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch(
                "operands have different layouts".into(),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += factor * other`, in place.
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Flat binary record: length-prefixed layout entries, then the values
    /// as little-endian 8-byte floats.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.layout.0.len() as u32).to_le_bytes())?;
        for entry in &self.layout.0 {
            let name = entry.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
            for &d in &entry.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<ParamVector> {
        fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let n_entries = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Serde("layout entry name is not UTF-8".into()))?;
            let ndims = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(read_u64(r)? as usize);
            }
            entries.push(LayoutEntry { name, shape });
        }
        let n_values = read_u64(r)? as usize;
        let mut values = Vec::with_capacity(n_values);
        let mut b = [0u8; 8];
        for _ in 0..n_values {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        ParamVector::new(values, Layout(entries))
    }
}

/// A training batch: row-major feature matrix and integer class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    inputs: Vec<f64>,
    n: usize,
    dim: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "inputs has {} values, expected {} rows x {} features",
                inputs.len(),
                labels.len(),
                dim
            )));
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::DimensionMismatch(format!(
                "label out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            n: labels.len(),
            inputs,
            dim,
            labels,
            n_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// New batch from a subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            inputs.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Batch::new(inputs, self.dim, labels, self.n_classes)
    }
}

/// Deterministic initialization: weights uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, "nn-init", &[]);
    let layout = spec.layout();
    let mut values = Vec::with_capacity(layout.total_len());
    for (fan_in, fan_out) in spec.layer_dims() {
        let limit = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.gen_range(-limit..limit));
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector { values, layout }
}

fn check_spec_params(params: &ParamVector, spec: &MlpSpec) -> Result<()> {
    if params.layout != spec.layout() {
        return Err(Error::LayoutMismatch(
            "parameters do not match the network spec".into(),
        ));
    }
    Ok(())
}

/// Per-layer slices into a flat parameter vector.
struct LayerView<'a> {
    weights: &'a [f64],
    bias: &'a [f64],
    fan_in: usize,
    fan_out: usize,
}

fn layer_views<'a>(params: &'a ParamVector, spec: &MlpSpec) -> Vec<LayerView<'a>> {
    let mut views = Vec::new();
    let mut off = 0;
    for (fan_in, fan_out) in spec.layer_dims() {
        let w_len = fan_in * fan_out;
        views.push(LayerView {
            weights: &params.values[off..off + w_len],
            bias: &params.values[off + w_len..off + w_len + fan_out],
            fan_in,
            fan_out,
        });
        off += w_len + fan_out;
    }
    views
}

/// Forward pass keeping each layer's post-activation values (logits are
/// kept raw). `acts[0]` is the input matrix itself.
fn forward_pass(params: &ParamVector, spec: &MlpSpec, inputs: &[f64], n: usize) -> Vec<Vec<f64>> {
    let views = layer_views(params, spec);
    let n_layers = views.len();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    acts.push(inputs.to_vec());
    for (l, view) in views.iter().enumerate() {
        let prev = &acts[l];
        let mut out = vec![0.0; n * view.fan_out];
        for r in 0..n {
            let x = &prev[r * view.fan_in..(r + 1) * view.fan_in];
            let o = &mut out[r * view.fan_out..(r + 1) * view.fan_out];
            o.copy_from_slice(view.bias);
            for (i, &xi) in x.iter().enumerate() {
                let w_row = &view.weights[i * view.fan_out..(i + 1) * view.fan_out];
                for (oj, wj) in o.iter_mut().zip(w_row) {
                    *oj += xi * wj;
                }
            }
            if l + 1 < n_layers {
                for oj in o.iter_mut() {
                    *oj = spec.activation.apply(*oj);
                }
            }
        }
        acts.push(out);
    }
    acts
}

/// Raw output scores for a row-major input matrix (no labels, no loss).
pub fn forward_logits(
    params: &ParamVector,
    spec: &MlpSpec,
    inputs: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    check_spec_params(params, spec)?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if inputs.len() != n * spec.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "inputs has {} values, expected {} rows x {}",
            inputs.len(),
            n,
            spec.input_dim
        )));
    }
    Ok(forward_pass(params, spec, inputs, n).pop().unwrap())
}

/// Softmax of one logit row, with max-subtraction; also returns
/// `log(sum(exp(l - max)))` for the loss.
fn softmax_row(logits: &[f64], out: &mut [f64]) -> (f64, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    (max, sum.ln())
}

/// Forward pass with mean softmax cross-entropy loss:
/// `loss = -mean(log softmax(logits)[label])`.
pub fn forward(params: &ParamVector, spec: &MlpSpec, batch: &Batch) -> Result<(Vec<f64>, f64)> {
    if batch.dim() != spec.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "batch feature dim {} != spec input dim {}",
            batch.dim(),
            spec.input_dim
        )));
    }
    if batch.n_classes() != spec.output_dim {
        return Err(Error::DimensionMismatch(format!(
            "batch classes {} != spec output dim {}",
            batch.n_classes(),
            spec.output_dim
        )));
    }
    let logits = forward_logits(params, spec, batch.inputs(), batch.n())?;
    let m = spec.output_dim;
    let mut probs = vec![0.0; m];
    let mut loss = 0.0;
    for r in 0..batch.n() {
        let row = &logits[r * m..(r + 1) * m];
        let (max, log_sum) = softmax_row(row, &mut probs);
        loss -= row[batch.labels()[r]] - max - log_sum;
    }
    loss /= batch.n() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("forward loss".into()));
    }
    Ok((logits, loss))
}

/// Backprop of an arbitrary loss given its gradient with respect to the
/// output logits (row-major, same shape as the logits).
pub fn backward_from_logits_grad(
    params: &ParamVector,
    spec: &MlpSpec,
    inputs: &[f64],
    n: usize,
    dlogits: &[f64],
) -> Result<ParamVector> {
    check_spec_params(params, spec)?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if dlogits.len() != n * spec.output_dim {
        return Err(Error::DimensionMismatch(
            "logit gradient shape mismatch".into(),
        ));
    }
    let acts = forward_pass(params, spec, inputs, n);
    let views = layer_views(params, spec);
    let mut grad = ParamVector::zeros(spec.layout());

    // Offsets of each layer inside the flat gradient vector.
    let mut offsets = Vec::with_capacity(views.len());
    let mut off = 0;
    for v in &views {
        offsets.push(off);
        off += v.fan_in * v.fan_out + v.fan_out;
    }

    let mut delta = dlogits.to_vec();
    for l in (0..views.len()).rev() {
        let view = &views[l];
        let prev = &acts[l];
        let g = &mut grad.values[offsets[l]..offsets[l] + view.fan_in * view.fan_out + view.fan_out];
        let (gw, gb) = g.split_at_mut(view.fan_in * view.fan_out);
        for r in 0..n {
            let d = &delta[r * view.fan_out..(r + 1) * view.fan_out];
            let x = &prev[r * view.fan_in..(r + 1) * view.fan_in];
            for (i, &xi) in x.iter().enumerate() {
                let gw_row = &mut gw[i * view.fan_out..(i + 1) * view.fan_out];
                for (gwj, dj) in gw_row.iter_mut().zip(d) {
                    *gwj += xi * dj;
                }
            }
            for (gbj, dj) in gb.iter_mut().zip(d) {
                *gbj += dj;
            }
        }
        if l > 0 {
            let mut prev_delta = vec![0.0; n * view.fan_in];
            for r in 0..n {
                let d = &delta[r * view.fan_out..(r + 1) * view.fan_out];
                let a = &prev[r * view.fan_in..(r + 1) * view.fan_in];
                let pd = &mut prev_delta[r * view.fan_in..(r + 1) * view.fan_in];
                for i in 0..view.fan_in {
                    let w_row = &view.weights[i * view.fan_out..(i + 1) * view.fan_out];
                    let mut acc = 0.0;
                    for (wj, dj) in w_row.iter().zip(d) {
                        acc += wj * dj;
                    }
                    pd[i] = acc * spec.activation.grad_from_output(a[i]);
                }
            }
            delta = prev_delta;
        }
    }
    Ok(grad)
}

/// Forward loss together with its analytic gradient, sharing one pass.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    let (logits, loss) = forward(params, spec, batch)?;
    let m = spec.output_dim;
    let n = batch.n();
    let inv_n = 1.0 / n as f64;
    let mut dlogits = vec![0.0; n * m];
    let mut probs = vec![0.0; m];
    for r in 0..n {
        let row = &logits[r * m..(r + 1) * m];
        softmax_row(row, &mut probs);
        let d = &mut dlogits[r * m..(r + 1) * m];
        for (j, dj) in d.iter_mut().enumerate() {
            let target = if j == batch.labels()[r] { 1.0 } else { 0.0 };
            *dj = (probs[j] - target) * inv_n;
        }
    }
    let grad = backward_from_logits_grad(params, spec, batch.inputs(), n, &dlogits)?;
    Ok((loss, grad))
}

/// Analytic gradient of the forward cross-entropy loss.
pub fn backward(params: &ParamVector, spec: &MlpSpec, batch: &Batch) -> Result<ParamVector> {
    loss_and_grad(params, spec, batch).map(|(_, grad)| grad)
}

/// One SGD step: `out = params - lr * gradient`.
pub fn sgd_step(params: &ParamVector, gradient: &ParamVector, lr: f64) -> Result<ParamVector> {
    params.check_layout(gradient)?;
    if !(lr >= 0.0) {
        return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
    }
    let values = params
        .values
        .iter()
        .zip(&gradient.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(ParamVector {
        values,
        layout: params.layout.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(2, vec![3], 2, Activation::Relu).unwrap()
    }

    fn random_batch(spec: &MlpSpec, n: usize, seed: u64) -> Batch {
        let mut r = crate::rng::stream(seed, "test-batch", &[]);
        let inputs = (0..n * spec.input_dim)
            .map(|_| r.gen_range(-1.5..1.5))
            .collect();
        let labels = (0..n).map(|_| r.gen_range(0..spec.output_dim)).collect();
        Batch::new(inputs, spec.input_dim, labels, spec.output_dim).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = small_spec();
        let a = init_params(&spec, 7);
        let b = init_params(&spec, 7);
        assert_eq!(a.values(), b.values());
        // 2*3 + 3 + 3*2 + 2 = 17
        assert_eq!(a.len(), 17);
        assert_eq!(spec.param_count(), 17);
    }

    #[test]
    fn init_biases_are_zero() {
        let spec = MlpSpec::new(6, vec![256], 2, Activation::Relu).unwrap();
        let p = init_params(&spec, 0);
        let mut off = 0;
        for (fan_in, fan_out) in spec.layer_dims() {
            off += fan_in * fan_out;
            for &b in &p.values()[off..off + fan_out] {
                assert_eq!(b, 0.0);
            }
            off += fan_out;
        }
    }

    #[test]
    fn zero_params_give_uniform_softmax_loss() {
        for (m, expect) in [(2usize, std::f64::consts::LN_2), (10, 10f64.ln())] {
            let spec = MlpSpec::new(3, vec![4], m, Activation::Relu).unwrap();
            let params = ParamVector::zeros(spec.layout());
            let batch = random_batch(&spec, 5, m as u64);
            let (_, loss) = forward(&params, &spec, &batch).unwrap();
            assert!((loss - expect).abs() < 1e-12, "m={m}: {loss} vs {expect}");
        }
    }

    /// Independent straight-line forward pass, coded separately from the
    /// kernel (per-example, nested index loops, no shared helpers).
    fn oracle_forward_loss(params: &ParamVector, spec: &MlpSpec, batch: &Batch) -> f64 {
        let dims = spec.layer_dims();
        let mut total = 0.0;
        for r in 0..batch.n() {
            let mut x: Vec<f64> = batch.row(r).to_vec();
            let mut off = 0;
            for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
                let mut z = vec![0.0; fan_out];
                for o in 0..fan_out {
                    let mut acc = 0.0;
                    for i in 0..fan_in {
                        acc += x[i] * params.values()[off + i * fan_out + o];
                    }
                    z[o] = acc + params.values()[off + fan_in * fan_out + o];
                }
                off += fan_in * fan_out + fan_out;
                if l + 1 < dims.len() {
                    for v in z.iter_mut() {
                        *v = match spec.activation {
                            Activation::Relu => v.max(0.0),
                            Activation::Tanh => v.tanh(),
                            Activation::Identity => *v,
                        };
                    }
                }
                x = z;
            }
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
            total -= x[batch.labels()[r]] - max - sum.ln();
        }
        total / batch.n() as f64
    }

    #[test]
    fn forward_matches_independent_reimplementation() {
        let spec = MlpSpec::new(4, vec![5, 3], 3, Activation::Tanh).unwrap();
        let params = init_params(&spec, 42);
        let batch = random_batch(&spec, 7, 42);
        let (_, loss) = forward(&params, &spec, &batch).unwrap();
        let oracle = oracle_forward_loss(&params, &spec, &batch);
        assert!(
            (loss - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
            "{loss} vs {oracle}"
        );
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let spec = small_spec();
        let params = init_params(&spec, 3);
        let batch = random_batch(&spec, 6, 9);
        let (l1, loss1) = forward(&params, &spec, &batch).unwrap();
        let (l2, loss2) = forward(&params, &spec, &batch).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(loss1.to_bits(), loss2.to_bits());
    }

    fn fd_gradient(params: &ParamVector, spec: &MlpSpec, batch: &Batch, step: f64) -> Vec<f64> {
        let mut grad = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += step;
            let mut minus = params.clone();
            minus.values_mut()[i] -= step;
            let (_, lp) = forward(&plus, spec, batch).unwrap();
            let (_, lm) = forward(&minus, spec, batch).unwrap();
            grad[i] = (lp - lm) / (2.0 * step);
        }
        grad
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| {
                let scale = a.abs().max(n.abs());
                if scale < 1e-7 {
                    (a - n).abs()
                } else {
                    (a - n).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut worst = 0.0f64;
        for trial in 0..100u64 {
            let act = match trial % 3 {
                0 => Activation::Relu,
                1 => Activation::Tanh,
                _ => Activation::Identity,
            };
            let mut r = crate::rng::stream(trial, "fd-spec", &[]);
            let input = r.gen_range(2..5);
            let hidden = r.gen_range(2..6);
            let out = r.gen_range(2..4);
            let spec = MlpSpec::new(input, vec![hidden], out, act).unwrap();
            let params = init_params(&spec, trial + 1000);
            let batch = random_batch(&spec, 4, trial + 2000);
            let grad = backward(&params, &spec, &batch).unwrap();
            let numeric = fd_gradient(&params, &spec, &batch, 1e-5);
            worst = worst.max(max_rel_err(grad.values(), &numeric));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradient_is_duplication_invariant() {
        let spec = small_spec();
        let params = init_params(&spec, 5);
        let batch = random_batch(&spec, 4, 11);
        let mut doubled_inputs = batch.inputs().to_vec();
        doubled_inputs.extend_from_slice(batch.inputs());
        let mut doubled_labels = batch.labels().to_vec();
        doubled_labels.extend_from_slice(batch.labels());
        let doubled = Batch::new(doubled_inputs, batch.dim(), doubled_labels, 2).unwrap();
        let g1 = backward(&params, &spec, &batch).unwrap();
        let g2 = backward(&params, &spec, &doubled).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(matches!(
            Batch::new(vec![], 2, vec![], 2),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn sgd_step_examples() {
        let layout = Layout(vec![LayoutEntry {
            name: "w".into(),
            shape: vec![2],
        }]);
        let p = ParamVector::new(vec![1.0, 2.0], layout.clone()).unwrap();
        let g = ParamVector::new(vec![1.0, 1.0], layout.clone()).unwrap();
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().values(), &[0.5, 1.5]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap().values(), p.values());
        let zero = ParamVector::zeros(layout);
        assert_eq!(sgd_step(&p, &zero, 0.7).unwrap().values(), p.values());
    }

    #[test]
    fn sgd_rejects_layout_mismatch() {
        let p = ParamVector::zeros(small_spec().layout());
        let g = ParamVector::zeros(MlpSpec::new(2, vec![4], 2, Activation::Relu).unwrap().layout());
        assert!(matches!(
            sgd_step(&p, &g, 0.1),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn loss_decreases_under_sgd() {
        let mut decreased = 0;
        for seed in 0..100u64 {
            let spec = small_spec();
            let mut params = init_params(&spec, seed);
            let batch = random_batch(&spec, 8, seed + 500);
            let (_, initial) = forward(&params, &spec, &batch).unwrap();
            for _ in 0..50 {
                let grad = backward(&params, &spec, &batch).unwrap();
                params = sgd_step(&params, &grad, 0.05).unwrap();
            }
            let (_, final_loss) = forward(&params, &spec, &batch).unwrap();
            if final_loss < initial {
                decreased += 1;
            }
        }
        assert!(decreased >= 95, "loss decreased in only {decreased}/100 seeds");
    }

    #[test]
    fn param_arithmetic_is_exact_on_representable_values() {
        // Exactness requires sums that stay within the 53-bit mantissa:
        // snap random values to a 2^-26 grid with magnitude < 2^20.
        let spec = small_spec();
        let layout = spec.layout();
        let mut r = crate::rng::stream(13, "exact", &[]);
        let grid = (1u64 << 26) as f64;
        for _ in 0..50 {
            let snap = |r: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
                (0..layout.total_len())
                    .map(|_| (r.gen_range(-1e6..1e6) * grid).round() / grid)
                    .collect()
            };
            let a = ParamVector::new(snap(&mut r), layout.clone()).unwrap();
            let b = ParamVector::new(snap(&mut r), layout.clone()).unwrap();
            let back = a.add(&b).unwrap().sub(&b).unwrap();
            for (x, y) in back.values().iter().zip(a.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn binary_roundtrip_is_bitwise() {
        let spec = MlpSpec::new(3, vec![4, 2], 5, Activation::Relu).unwrap();
        let p = init_params(&spec, 99);
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        let q = ParamVector::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(p.layout(), q.layout());
        for (a, b) in p.values().iter().zip(q.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn spec_requires_hidden_layer() {
        assert!(MlpSpec::new(2, vec![], 2, Activation::Relu).is_err());
    }
}
