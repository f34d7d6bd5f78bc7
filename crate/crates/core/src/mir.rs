//! Micro-sign retrieval: memory-augmented enhancement of per-modality
//! features and of their fused sum.
//!
//! Retrieval ranks a learnable memory by cosine similarity in a latent space
//! and gathers the top-k rows per timestep. The gather is the only
//! differentiable path into the memory: gradients flow to the selected rows
//! (straight-through on the gather) and not through the ranking, so the
//! ranking projection receives zero gradient from this module.

use crate::numkit::{cosine_similarity, Matrix, Mlp, MlpGrads, MlpTape, NumError};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MirError {
    #[error("k must satisfy 1 <= k <= n_slots, got k={k} n_slots={n_slots}")]
    BadK { k: usize, n_slots: usize },
    #[error("feature dim {got} does not match encoder input {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, MirError>;

/// Learnable micro-sign memory with its encoder/decoder projections and the
/// residual scale. RGB and event branches share one pool.
#[derive(Clone, Debug)]
pub struct MemoryPool {
    /// n_slots x d_mem stored patterns.
    pub memory: Matrix,
    /// Ranking projection (feature dim -> d_mem). Receives no gradient.
    pub enc: Mlp,
    /// Output projection (d_mem -> feature dim).
    pub dec: Mlp,
    /// Residual scale; initialized to 0 so the module starts as identity.
    pub alpha: f64,
    /// Top-k retrieval count.
    pub k: usize,
}

impl MemoryPool {
    /// Builds a pool with Glorot-uniform memory and single-hidden-layer
    /// projections (`feature_dim -> hidden -> d_mem` and back).
    pub fn new<R: Rng>(
        feature_dim: usize,
        d_mem: usize,
        n_slots: usize,
        hidden: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || k > n_slots {
            return Err(MirError::BadK { k, n_slots });
        }
        Ok(MemoryPool {
            memory: Matrix::glorot(n_slots, d_mem, rng),
            enc: Mlp::projection(feature_dim, hidden, d_mem, rng)?,
            dec: Mlp::projection(d_mem, hidden, feature_dim, rng)?,
            alpha: 0.0,
            k,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.memory.rows()
    }

    pub fn d_mem(&self) -> usize {
        self.memory.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.enc.in_dim()
    }
}

/// Gradients for every learnable tensor in a [`MemoryPool`].
#[derive(Clone, Debug)]
pub struct MirGrads {
    pub memory: Matrix,
    pub alpha: f64,
    pub enc: MlpGrads,
    pub dec: MlpGrads,
}

impl MirGrads {
    pub fn zeros(pool: &MemoryPool) -> Self {
        MirGrads {
            memory: Matrix::zeros(pool.n_slots(), pool.d_mem()),
            alpha: 0.0,
            enc: pool.enc.zero_grads(),
            dec: pool.dec.zero_grads(),
        }
    }

    pub fn add_assign(&mut self, other: &MirGrads) -> Result<()> {
        self.memory.add_assign(&other.memory)?;
        self.alpha += other.alpha;
        self.enc.add_assign(&other.enc)?;
        self.dec.add_assign(&other.dec)?;
        Ok(())
    }
}

/// Record of one [`mir_enhance_traced`] call.
#[derive(Debug)]
pub struct MirTrace {
    indices: Vec<Vec<usize>>,
    dec_tape: MlpTape,
    dec_out: Matrix,
    k: usize,
}

impl MirTrace {
    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }
}

/// Top-k memory lookup per feature row.
///
/// Each row is projected by the pool's encoder, ranked against the memory by
/// cosine similarity, and the k best slots (ties to the lower index) are
/// averaged. Returns the averaged rows (L x d_mem) and the selected indices
/// in rank order.
pub fn mir_retrieve(features: &Matrix, pool: &MemoryPool) -> Result<(Matrix, Vec<Vec<usize>>)> {
    if features.cols() != pool.feature_dim() {
        return Err(MirError::FeatureDim {
            expected: pool.feature_dim(),
            got: features.cols(),
        });
    }
    let latent = pool.enc.eval(features)?;
    let sims = cosine_similarity(&latent, &pool.memory)?;
    let mut indices = Vec::with_capacity(features.rows());
    let mut retrieved = Matrix::zeros(features.rows(), pool.d_mem());
    for i in 0..features.rows() {
        let mut order: Vec<usize> = (0..pool.n_slots()).collect();
        // Stable sort by descending similarity keeps lower slots first on
        // ties. total_cmp keeps the sort deterministic even if a divergent
        // training run produces NaN; the loss check aborts such runs.
        order.sort_by(|&a, &b| sims.at(i, b).total_cmp(&sims.at(i, a)));
        order.truncate(pool.k);
        let row = retrieved.row_mut(i);
        for &slot in &order {
            for (r, &m) in row.iter_mut().zip(pool.memory.row(slot)) {
                *r += m;
            }
        }
        for r in row.iter_mut() {
            *r /= pool.k as f64;
        }
        indices.push(order);
    }
    Ok((retrieved, indices))
}

/// `F + alpha * dec(retrieve(F))`, shape preserved.
pub fn mir_enhance(features: &Matrix, pool: &MemoryPool) -> Result<Matrix> {
    mir_enhance_traced(features, pool).map(|(out, _)| out)
}

/// As [`mir_enhance`], also returning the trace needed by [`mir_backward`].
pub fn mir_enhance_traced(features: &Matrix, pool: &MemoryPool) -> Result<(Matrix, MirTrace)> {
    let (retrieved, indices) = mir_retrieve(features, pool)?;
    let (dec_out, dec_tape) = pool.dec.forward(&retrieved)?;
    let out = features.add(&dec_out.scale(pool.alpha))?;
    Ok((
        out,
        MirTrace {
            indices,
            dec_tape,
            dec_out,
            k: pool.k,
        },
    ))
}

/// Exact gradients of [`mir_enhance_traced`]'s output.
///
/// Returns the gradient with respect to the input features and the parameter
/// gradients. The encoder entry is structurally present but always zero (the
/// ranking path is piecewise constant).
pub fn mir_backward(
    pool: &MemoryPool,
    trace: &MirTrace,
    grad_out: &Matrix,
) -> Result<(Matrix, MirGrads)> {
    let alpha_grad = grad_out
        .data()
        .iter()
        .zip(trace.dec_out.data())
        .map(|(g, d)| g * d)
        .sum();
    let (grad_retrieved, dec_grads) = pool
        .dec
        .backward(&trace.dec_tape, &grad_out.scale(pool.alpha))?;
    let mut memory_grad = Matrix::zeros(pool.n_slots(), pool.d_mem());
    let inv_k = 1.0 / trace.k as f64;
    for (i, slots) in trace.indices.iter().enumerate() {
        for &slot in slots {
            let row = memory_grad.row_mut(slot);
            for (m, &g) in row.iter_mut().zip(grad_retrieved.row(i)) {
                *m += g * inv_k;
            }
        }
    }
    Ok((
        grad_out.clone(),
        MirGrads {
            memory: memory_grad,
            alpha: alpha_grad,
            enc: pool.enc.zero_grads(),
            dec: dec_grads,
        },
    ))
}

/// Element-wise fusion of the two enhanced modalities, optionally refined by
/// re-running the enhancement on the sum (`recurrent`, `iterations` passes).
pub fn mir_fuse(
    f_rgb_hat: &Matrix,
    f_evt_hat: &Matrix,
    pool: &MemoryPool,
    recurrent: bool,
    iterations: usize,
) -> Result<Matrix> {
    if f_rgb_hat.rows() != f_evt_hat.rows() || f_rgb_hat.cols() != f_evt_hat.cols() {
        return Err(MirError::Shape(format!(
            "{}x{} vs {}x{}",
            f_rgb_hat.rows(),
            f_rgb_hat.cols(),
            f_evt_hat.rows(),
            f_evt_hat.cols()
        )));
    }
    let mut fused = f_rgb_hat.add(f_evt_hat)?;
    if recurrent {
        for _ in 0..iterations {
            fused = mir_enhance(&fused, pool)?;
        }
    }
    Ok(fused)
}
