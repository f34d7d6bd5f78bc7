//! Modern-Hopfield retrieval over macro-sign prototypes and the residual
//! enhancement built on it.
//!
//! One update step is softmax attention over the stored patterns:
//! `Q' = softmax(beta_h * Q P^T) P`. Outputs are convex combinations of the
//! pattern rows. Prototypes are frozen; gradients flow through the encoder,
//! decoder, and the output scale only.

use crate::numkit::{matmul, softmax_rows, Matrix, Mlp, MlpGrads, MlpTape, NumError};
use crate::prototype::PrototypeSet;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HopfieldError {
    #[error("retrieval needs at least one stored prototype")]
    EmptyPrototypes,
    #[error("query dim {got} does not match prototype dim {expected}")]
    QueryDim { expected: usize, got: usize },
    #[error("beta_h must be positive, got {0}")]
    BadBetaH(f64),
    #[error("iterations must be >= 1")]
    BadIterations,
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, HopfieldError>;

/// Macro-sign retrieval parameters: projections in and out of the prototype
/// space, the learnable residual scale, and the Hopfield settings.
#[derive(Clone, Debug)]
pub struct MarParams {
    /// Feature dim -> prototype dim.
    pub enc: Mlp,
    /// Prototype dim -> feature dim.
    pub dec: Mlp,
    /// Residual scale; initialized to 0 for an identity warm start.
    pub beta: f64,
    /// Hopfield inverse temperature.
    pub beta_h: f64,
    /// Update steps per retrieval.
    pub iterations: usize,
}

impl MarParams {
    pub fn new<R: Rng>(
        feature_dim: usize,
        proto_dim: usize,
        hidden: usize,
        beta_h: f64,
        iterations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if beta_h <= 0.0 {
            return Err(HopfieldError::BadBetaH(beta_h));
        }
        if iterations == 0 {
            return Err(HopfieldError::BadIterations);
        }
        Ok(MarParams {
            enc: Mlp::projection(feature_dim, hidden, proto_dim, rng)?,
            dec: Mlp::projection(proto_dim, hidden, feature_dim, rng)?,
            beta: 0.0,
            beta_h,
            iterations,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.enc.in_dim()
    }

    pub fn proto_dim(&self) -> usize {
        self.enc.out_dim()
    }
}

#[derive(Clone, Debug)]
pub struct MarGrads {
    pub enc: MlpGrads,
    pub dec: MlpGrads,
    pub beta: f64,
}

impl MarGrads {
    pub fn zeros(params: &MarParams) -> Self {
        MarGrads {
            enc: params.enc.zero_grads(),
            dec: params.dec.zero_grads(),
            beta: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &MarGrads) -> Result<()> {
        self.enc.add_assign(&other.enc)?;
        self.dec.add_assign(&other.dec)?;
        self.beta += other.beta;
        Ok(())
    }
}

struct HopStep {
    attention: Matrix,
}

/// Record of one [`mar_enhance_traced`] call.
pub struct MarTrace {
    enc_tape: MlpTape,
    dec_tape: MlpTape,
    steps: Vec<HopStep>,
    dec_out: Matrix,
}

fn check_patterns(queries: &Matrix, patterns: &PrototypeSet) -> Result<()> {
    if patterns.count() == 0 {
        return Err(HopfieldError::EmptyPrototypes);
    }
    if queries.cols() != patterns.dim() {
        return Err(HopfieldError::QueryDim {
            expected: patterns.dim(),
            got: queries.cols(),
        });
    }
    Ok(())
}

/// Softmax-attention retrieval: each query row is updated `iterations` times
/// against the prototype rows. Output rows lie in the convex hull of the
/// prototypes.
pub fn hopfield_retrieve(
    queries: &Matrix,
    patterns: &PrototypeSet,
    beta_h: f64,
    iterations: usize,
) -> Result<Matrix> {
    hopfield_forward(queries, patterns, beta_h, iterations).map(|(q, _)| q)
}

fn hopfield_forward(
    queries: &Matrix,
    patterns: &PrototypeSet,
    beta_h: f64,
    iterations: usize,
) -> Result<(Matrix, Vec<HopStep>)> {
    check_patterns(queries, patterns)?;
    if beta_h <= 0.0 {
        return Err(HopfieldError::BadBetaH(beta_h));
    }
    if iterations == 0 {
        return Err(HopfieldError::BadIterations);
    }
    let p_t = patterns.prototypes.transpose();
    let mut q = queries.clone();
    let mut steps = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let scores = matmul(&q, &p_t)?.scale(beta_h);
        let attention = softmax_rows(&scores, 1.0)?;
        q = matmul(&attention, &patterns.prototypes)?;
        steps.push(HopStep { attention });
    }
    Ok((q, steps))
}

/// Attention weights of a single update for each query row (used by the
/// convex-hull check and diagnostics).
pub fn attention_weights(queries: &Matrix, patterns: &PrototypeSet, beta_h: f64) -> Result<Matrix> {
    check_patterns(queries, patterns)?;
    let scores = matmul(&queries, &patterns.prototypes.transpose())?.scale(beta_h);
    Ok(softmax_rows(&scores, 1.0)?)
}

fn hopfield_backward(
    patterns: &PrototypeSet,
    steps: &[HopStep],
    beta_h: f64,
    grad_out: &Matrix,
) -> Result<Matrix> {
    let mut grad = grad_out.clone();
    for step in steps.iter().rev() {
        // q_next = A P with A = softmax(beta_h * q P^T).
        let grad_attention = matmul(&grad, &patterns.prototypes.transpose())?;
        let a = &step.attention;
        let mut grad_scores = Matrix::zeros(a.rows(), a.cols());
        for i in 0..a.rows() {
            let dot: f64 = a
                .row(i)
                .iter()
                .zip(grad_attention.row(i))
                .map(|(x, y)| x * y)
                .sum();
            for j in 0..a.cols() {
                grad_scores.set(i, j, a.at(i, j) * (grad_attention.at(i, j) - dot));
            }
        }
        grad = matmul(&grad_scores, &patterns.prototypes)?.scale(beta_h);
    }
    Ok(grad)
}

/// `F + beta * dec(hopfield(enc(F)))`, shape preserved. Applied identically
/// to the RGB and event branches.
pub fn mar_enhance(
    features: &Matrix,
    prototypes: &PrototypeSet,
    params: &MarParams,
) -> Result<Matrix> {
    mar_enhance_traced(features, prototypes, params).map(|(out, _)| out)
}

/// As [`mar_enhance`], also returning the trace for [`mar_backward`].
pub fn mar_enhance_traced(
    features: &Matrix,
    prototypes: &PrototypeSet,
    params: &MarParams,
) -> Result<(Matrix, MarTrace)> {
    let (queries, enc_tape) = params.enc.forward(features)?;
    let (retrieved, steps) =
        hopfield_forward(&queries, prototypes, params.beta_h, params.iterations)?;
    let (dec_out, dec_tape) = params.dec.forward(&retrieved)?;
    let out = features.add(&dec_out.scale(params.beta))?;
    Ok((
        out,
        MarTrace {
            enc_tape,
            dec_tape,
            steps,
            dec_out,
        },
    ))
}

/// Exact gradients of [`mar_enhance_traced`]'s output with respect to the
/// input features and the learnable parameters (prototypes are constants).
pub fn mar_backward(
    params: &MarParams,
    prototypes: &PrototypeSet,
    trace: &MarTrace,
    grad_out: &Matrix,
) -> Result<(Matrix, MarGrads)> {
    let beta_grad = grad_out
        .data()
        .iter()
        .zip(trace.dec_out.data())
        .map(|(g, d)| g * d)
        .sum();
    let (grad_retrieved, dec_grads) = params
        .dec
        .backward(&trace.dec_tape, &grad_out.scale(params.beta))?;
    let grad_queries = hopfield_backward(prototypes, &trace.steps, params.beta_h, &grad_retrieved)?;
    let (grad_from_enc, enc_grads) = params.enc.backward(&trace.enc_tape, &grad_queries)?;
    let grad_features = grad_out.add(&grad_from_enc)?;
    Ok((
        grad_features,
        MarGrads {
            enc: enc_grads,
            dec: dec_grads,
            beta: beta_grad,
        },
    ))
}
