//! One post-norm transformer encoder layer:
//! attention → add & norm → GELU feed-forward → add & norm.

use rand::Rng;

use super::attention::{attend, attend_backward, AttentionProbs};
use super::ops::{gelu, gelu_derivative, layer_norm_rows, layer_norm_rows_backward, LayerNormCache};
use super::tensor::{column_sums, linear, matmul_a_bt, matmul_at_b, Tensor2D};
use crate::error::{Error, Result};

/// Anything that exposes a fixed, ordered list of named parameter buffers.
pub trait ParamBuffers {
    fn buffers(&self) -> Vec<(String, &Tensor2D)>;
    fn buffers_mut(&mut self) -> Vec<&mut Tensor2D>;

    fn parameter_count(&self) -> usize {
        self.buffers().iter().map(|(_, t)| t.data().len()).sum()
    }
}

/// Weights of a single encoder layer. Biases and norm parameters are 1×n rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: usize,
    pub wq: Tensor2D,
    pub bq: Tensor2D,
    pub wk: Tensor2D,
    pub bk: Tensor2D,
    pub wv: Tensor2D,
    pub bv: Tensor2D,
    pub wo: Tensor2D,
    pub bo: Tensor2D,
    pub w1: Tensor2D,
    pub b1: Tensor2D,
    pub w2: Tensor2D,
    pub b2: Tensor2D,
    pub ln1_gain: Tensor2D,
    pub ln1_bias: Tensor2D,
    pub ln2_gain: Tensor2D,
    pub ln2_bias: Tensor2D,
}

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2D {
    let bound = (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("sized above")
}

fn ones(n: usize) -> Tensor2D {
    Tensor2D::from_vec(1, n, vec![1.0; n]).expect("sized above")
}

impl LayerParams {
    /// Xavier-uniform weights, zero biases, unit norm gains.
    pub fn init<R: Rng>(model_dim: usize, heads: usize, ffn_dim: usize, rng: &mut R) -> Result<Self> {
        check_dims(model_dim, heads, ffn_dim)?;
        let d = model_dim;
        Ok(LayerParams {
            heads,
            wq: xavier(d, d, rng),
            bq: Tensor2D::zeros(1, d),
            wk: xavier(d, d, rng),
            bk: Tensor2D::zeros(1, d),
            wv: xavier(d, d, rng),
            bv: Tensor2D::zeros(1, d),
            wo: xavier(d, d, rng),
            bo: Tensor2D::zeros(1, d),
            w1: xavier(d, ffn_dim, rng),
            b1: Tensor2D::zeros(1, ffn_dim),
            w2: xavier(ffn_dim, d, rng),
            b2: Tensor2D::zeros(1, d),
            ln1_gain: ones(d),
            ln1_bias: Tensor2D::zeros(1, d),
            ln2_gain: ones(d),
            ln2_bias: Tensor2D::zeros(1, d),
        })
    }

    /// All-zero buffers with the same shapes; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.buffers_mut() {
            b.fill(0.0);
        }
        z
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn ffn_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Checks that every buffer agrees with `model_dim`, `ffn_dim` and `heads`.
    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim();
        let f = self.ffn_dim();
        check_dims(d, self.heads, f)?;
        let expect = [
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, f),
            (1, f),
            (f, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        for ((name, t), want) in self.buffers().into_iter().zip(expect) {
            if t.shape() != want {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn check_dims(model_dim: usize, heads: usize, ffn_dim: usize) -> Result<()> {
    if model_dim == 0 || ffn_dim == 0 {
        return Err(Error::config("model and feed-forward dims must be positive"));
    }
    if heads == 0 || !model_dim.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "model dim {model_dim} not divisible by {heads} heads"
        )));
    }
    Ok(())
}

impl ParamBuffers for LayerParams {
    fn buffers(&self) -> Vec<(String, &Tensor2D)> {
        vec![
            ("wq".into(), &self.wq),
            ("bq".into(), &self.bq),
            ("wk".into(), &self.wk),
            ("bk".into(), &self.bk),
            ("wv".into(), &self.wv),
            ("bv".into(), &self.bv),
            ("wo".into(), &self.wo),
            ("bo".into(), &self.bo),
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("ln1_gain".into(), &self.ln1_gain),
            ("ln1_bias".into(), &self.ln1_bias),
            ("ln2_gain".into(), &self.ln2_gain),
            ("ln2_bias".into(), &self.ln2_bias),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor2D> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

fn check_input(x: &Tensor2D, params: &LayerParams) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::shape("encoder input has no rows"));
    }
    if x.cols() != params.model_dim() {
        return Err(Error::shape(format!(
            "input width {} != model dim {}",
            x.cols(),
            params.model_dim()
        )));
    }
    if params.heads == 0 || !params.model_dim().is_multiple_of(params.heads) {
        return Err(Error::config(format!(
            "model dim {} not divisible by {} heads",
            params.model_dim(),
            params.heads
        )));
    }
    Ok(())
}

/// Multi-head self-attention sublayer including the output projection.
pub fn multi_head_self_attention(x: &Tensor2D, params: &LayerParams) -> Result<Tensor2D> {
    check_input(x, params)?;
    let q = linear(x, &params.wq, &params.bq)?;
    let k = linear(x, &params.wk, &params.bk)?;
    let v = linear(x, &params.wv, &params.bv)?;
    let o = attend(&q, &k, &v, params.heads, None)?;
    linear(&o, &params.wo, &params.bo)
}

/// Activations recorded by [`encoder_layer_forward_traced`].
#[derive(Debug, Clone)]
pub struct LayerTrace {
    x: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    probs: AttentionProbs,
    o: Tensor2D,
    ln1: LayerNormCache,
    h1: Tensor2D,
    z: Tensor2D,
    g: Tensor2D,
    ln2: LayerNormCache,
}

fn layer_forward(
    x: &Tensor2D,
    params: &LayerParams,
    record: bool,
) -> Result<(Tensor2D, Option<LayerTrace>)> {
    check_input(x, params)?;
    let q = linear(x, &params.wq, &params.bq)?;
    let k = linear(x, &params.wk, &params.bk)?;
    let v = linear(x, &params.wv, &params.bv)?;
    let mut probs = AttentionProbs(Vec::new());
    let o = attend(&q, &k, &v, params.heads, record.then_some(&mut probs))?;
    let mut r1 = linear(&o, &params.wo, &params.bo)?;
    r1.add_assign(x);
    let (h1, ln1) = layer_norm_rows(&r1, &params.ln1_gain, &params.ln1_bias);
    let z = linear(&h1, &params.w1, &params.b1)?;
    let mut g = z.clone();
    for val in g.data_mut() {
        *val = gelu(*val);
    }
    let mut r2 = linear(&g, &params.w2, &params.b2)?;
    r2.add_assign(&h1);
    let (y, ln2) = layer_norm_rows(&r2, &params.ln2_gain, &params.ln2_bias);
    let trace = record.then(|| LayerTrace {
        x: x.clone(),
        q,
        k,
        v,
        probs,
        o,
        ln1,
        h1,
        z,
        g,
        ln2,
    });
    Ok((y, trace))
}

/// Forward pass of one layer. Memory is O(L·d), so long sequences are fine.
pub fn encoder_layer_forward(x: &Tensor2D, params: &LayerParams) -> Result<Tensor2D> {
    layer_forward(x, params, false).map(|(y, _)| y)
}

/// Forward pass that also records what [`encoder_layer_backward`] needs.
/// Output is bit-identical to [`encoder_layer_forward`].
pub fn encoder_layer_forward_traced(
    x: &Tensor2D,
    params: &LayerParams,
) -> Result<(Tensor2D, LayerTrace)> {
    layer_forward(x, params, true).map(|(y, t)| (y, t.expect("recorded")))
}

/// Backpropagates `dy` through a recorded layer. Parameter gradients are
/// accumulated into `grads`; the gradient with respect to the layer input is
/// returned.
pub fn encoder_layer_backward(
    trace: &LayerTrace,
    params: &LayerParams,
    dy: &Tensor2D,
    grads: &mut LayerParams,
) -> Result<Tensor2D> {
    if dy.shape() != trace.x.shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} vs input {:?}",
            dy.shape(),
            trace.x.shape()
        )));
    }
    // second add & norm
    let dr2 = layer_norm_rows_backward(
        dy,
        &trace.ln2,
        &params.ln2_gain,
        &mut grads.ln2_gain,
        &mut grads.ln2_bias,
    );
    // feed-forward
    grads.w2.add_assign(&matmul_at_b(&trace.g, &dr2)?);
    grads.b2.add_assign(&column_sums(&dr2));
    let mut dz = matmul_a_bt(&dr2, &params.w2)?;
    for (dv, &zv) in dz.data_mut().iter_mut().zip(trace.z.data()) {
        *dv *= gelu_derivative(zv);
    }
    grads.w1.add_assign(&matmul_at_b(&trace.h1, &dz)?);
    grads.b1.add_assign(&column_sums(&dz));
    let mut dh1 = matmul_a_bt(&dz, &params.w1)?;
    dh1.add_assign(&dr2);
    // first add & norm
    let dr1 = layer_norm_rows_backward(
        &dh1,
        &trace.ln1,
        &params.ln1_gain,
        &mut grads.ln1_gain,
        &mut grads.ln1_bias,
    );
    // attention output projection
    grads.wo.add_assign(&matmul_at_b(&trace.o, &dr1)?);
    grads.bo.add_assign(&column_sums(&dr1));
    let d_o = matmul_a_bt(&dr1, &params.wo)?;
    let (dq, dk, dv) = attend_backward(&d_o, &trace.q, &trace.k, &trace.v, &trace.probs);
    let mut dx = dr1;
    for (dproj, w, dw, db) in [
        (&dq, &params.wq, &mut grads.wq, &mut grads.bq),
        (&dk, &params.wk, &mut grads.wk, &mut grads.bk),
        (&dv, &params.wv, &mut grads.wv, &mut grads.bv),
    ] {
        dw.add_assign(&matmul_at_b(&trace.x, dproj)?);
        db.add_assign(&column_sums(dproj));
        dx.add_assign(&matmul_a_bt(dproj, w)?);
    }
    Ok(dx)
}
