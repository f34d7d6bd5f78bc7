//! End-to-end model: parameter-shared toy visual encoder, micro/macro
//! retrieval fusion, toy autoregressive text decoder with the summed
//! negative-log-likelihood objective, training loop, and greedy inference.
//!
//! Ablation switches (`mir_micro`, `mir_recurrent`, `mar`) disable the
//! corresponding residual enhancements while keeping the pipeline shape
//! fixed, so the configuration with everything off is the plain
//! encoder+decoder baseline and the full model at initialization
//! (alpha = beta = 0) coincides with it.

use crate::event::{AlignedSample, FrameSequence};
use crate::hopfield::{
    mar_backward, mar_enhance_traced, HopfieldError, MarGrads, MarParams, MarTrace,
};
use crate::mir::{mir_backward, mir_enhance_traced, MemoryPool, MirError, MirGrads, MirTrace};
use crate::numkit::{
    cosine_annealed_lr, load_checkpoint, save_checkpoint, sgd_step, softmax_rows, Matrix, Mlp,
    MlpGrads, MlpTape, NumError, SgdConfig, SgdState,
};
use crate::prototype::PrototypeSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Dimension of the per-frame pooled descriptor: 3 global channel means plus
/// a 4x4 grid of per-cell channel contrasts.
pub const POOLED_DIM: usize = 51;

/// Gain applied to the grid-cell contrasts (cell mean minus global mean).
/// Cell contrasts of natural frames are a few percent of the value range;
/// the gain brings them to order one so the encoder sees conditioned inputs.
pub const CONTRAST_GAIN: f64 = 12.0;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
/// First non-reserved token id.
pub const RESERVED_TOKENS: u32 = 4;

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("token id {id} out of range for vocabulary of {vocab} entries")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("token sequence contains the bos marker")]
    InteriorBos,
    #[error("target must contain at least one token before eos")]
    EmptyTarget,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("macro retrieval is enabled but no prototypes were provided")]
    MissingPrototypes,
    #[error("non-finite loss at step {step}; training aborted")]
    NumericFailure { step: usize },
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Mir(#[from] MirError),
    #[error(transparent)]
    Hopfield(#[from] HopfieldError),
}

pub type Result<T> = std::result::Result<T, TranslateError>;

/// Ground-truth translation: content token ids with implicit bos/eos
/// markers (never stored).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        for &id in &ids {
            if id as usize >= vocab_size {
                return Err(TranslateError::TokenOutOfRange {
                    id,
                    vocab: vocab_size,
                });
            }
            if id == BOS {
                return Err(TranslateError::InteriorBos);
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Bijective id <-> string table with the four reserved entries at the front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    /// Synthetic vocabulary of `size` entries: the reserved markers followed
    /// by generated symbol names.
    pub fn synthetic(size: usize) -> Vocab {
        let mut words = vec![
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<pad>".to_string(),
            "<unk>".to_string(),
        ];
        for id in words.len()..size {
            words.push(format!("g{id:03}"));
        }
        words.truncate(size);
        Vocab { words }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.word(id).unwrap_or("<unk>").to_string())
            .collect()
    }
}

/// Model hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Visual feature dimension D.
    pub feature_dim: usize,
    /// Uniform frame sampling stride.
    pub frame_interval: usize,
    /// Cap on sampled frames.
    pub max_frames: usize,
    /// Hidden width of the shared visual encoder.
    pub enc_hidden: usize,
    /// Micro-sign memory slots.
    pub n_slots: usize,
    /// Micro-sign memory dimension.
    pub d_mem: usize,
    /// Top-k retrieval count.
    pub top_k: usize,
    /// Hidden width of the retrieval projections (MiR and MaR).
    pub proj_hidden: usize,
    /// Prototype feature dimension (Hopfield pattern dim).
    pub proto_dim: usize,
    /// Hopfield inverse temperature.
    pub beta_h: f64,
    /// Hopfield update steps.
    pub hopfield_iterations: usize,
    /// Recurrent enhancement passes applied to the fused micro features.
    pub mir_iterations: usize,
    /// Decoder hidden width.
    pub decoder_hidden: usize,
    /// Number of decoder hidden layers.
    pub decoder_layers: usize,
    /// Previous-token embedding dimension.
    pub embed_dim: usize,
    /// Enable micro-sign retrieval on each modality.
    pub mir_micro: bool,
    /// Enable the recurrent pass on the fused micro features.
    pub mir_recurrent: bool,
    /// Enable macro-sign retrieval.
    pub mar: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            frame_interval: 4,
            max_frames: 64,
            enc_hidden: 64,
            n_slots: 128,
            d_mem: 512,
            top_k: 3,
            proj_hidden: 512,
            proto_dim: 64,
            beta_h: 8.0,
            hopfield_iterations: 1,
            mir_iterations: 1,
            decoder_hidden: 128,
            decoder_layers: 1,
            embed_dim: 32,
            mir_micro: true,
            mir_recurrent: true,
            mar: true,
        }
    }
}

/// Uniform frame sampling: keep indices 0, interval, 2*interval, ... then
/// truncate to `max_frames`.
pub fn sample_frames(frames: &FrameSequence, cfg: &ModelConfig) -> FrameSequence {
    let indices: Vec<usize> = (0..frames.len())
        .step_by(cfg.frame_interval.max(1))
        .take(cfg.max_frames)
        .collect();
    frames.select_frames(&indices)
}

/// Pooled descriptor of one frame: global channel means, then per 4x4 grid
/// cell the gained contrast of the cell's channel mean against the global
/// mean (row-major over cells).
pub fn pool_frame(frames: &FrameSequence, t: usize) -> [f64; POOLED_DIM] {
    let (h, w) = (frames.height(), frames.width());
    let mut out = [0.0f64; POOLED_DIM];
    let mut global = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                global[c] += frames.at(t, y, x, c) as f64;
            }
        }
    }
    let area = (h * w) as f64;
    for c in 0..3 {
        out[c] = global[c] / area;
    }
    let mut idx = 3;
    for gr in 0..4 {
        let (y0, y1) = cell_range(gr, h);
        for gc in 0..4 {
            let (x0, x1) = cell_range(gc, w);
            let mut cell = [0.0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..3 {
                        cell[c] += frames.at(t, y, x, c) as f64;
                    }
                }
            }
            let cell_area = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                out[idx] = (cell[c] / cell_area - out[c]) * CONTRAST_GAIN;
                idx += 1;
            }
        }
    }
    out
}

fn cell_range(cell: usize, extent: usize) -> (usize, usize) {
    let lo = (cell * extent / 4).min(extent.saturating_sub(1));
    let hi = ((cell + 1) * extent / 4).max(lo + 1).min(extent.max(1));
    (lo, hi)
}

/// Pooled descriptors for every frame, as a T x 51 matrix.
pub fn pool_frames(frames: &FrameSequence) -> Matrix {
    let mut data = Vec::with_capacity(frames.len() * POOLED_DIM);
    for t in 0..frames.len() {
        data.extend_from_slice(&pool_frame(frames, t));
    }
    Matrix::from_vec(frames.len(), POOLED_DIM, data).expect("pooled shape")
}

/// Per-frame features through the shared encoder MLP (identical parameters
/// for RGB and event frames).
pub fn visual_encode(frames: &FrameSequence, encoder: &Mlp) -> Result<Matrix> {
    Ok(encoder.eval(&pool_frames(frames))?)
}

fn visual_encode_traced(frames: &FrameSequence, encoder: &Mlp) -> Result<(Matrix, MlpTape)> {
    Ok(encoder.forward(&pool_frames(frames))?)
}

/// Element-wise sum of the three refined feature sequences.
pub fn fuse(f_micro: &Matrix, f_rgb_macro: &Matrix, f_evt_macro: &Matrix) -> Result<Matrix> {
    Ok(f_micro.add(f_rgb_macro)?.add(f_evt_macro)?)
}

/// Frame-level weighted fusion `0.5*rgb + 0.5*evt`, the unimodal-baseline
/// adaptation. Evaluation-harness option only, never a training path.
pub fn weighted_frame_fusion(rgb: &FrameSequence, evt: &FrameSequence) -> Result<FrameSequence> {
    if rgb.len() != evt.len() || rgb.height() != evt.height() || rgb.width() != evt.width() {
        return Err(TranslateError::Config(format!(
            "frame stacks disagree: {}x{}x{} vs {}x{}x{}",
            rgb.len(),
            rgb.height(),
            rgb.width(),
            evt.len(),
            evt.height(),
            evt.width()
        )));
    }
    let data: Vec<f32> = rgb
        .data()
        .iter()
        .zip(evt.data())
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    FrameSequence::new(rgb.len(), rgb.height(), rgb.width(), data)
        .map_err(|e| TranslateError::Config(e.to_string()))
}

/// Toy autoregressive decoder: previous-token embedding concatenated with the
/// mean-pooled visual context, then an MLP to vocabulary logits.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Matrix,
    pub mlp: Mlp,
}

impl Decoder {
    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn context_dim(&self) -> usize {
        self.mlp.in_dim() - self.embed.cols()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderGrads {
    pub embed: Matrix,
    pub mlp: MlpGrads,
}

/// Record of one [`decode_loss_traced`] call.
pub struct DecodeTrace {
    mlp_tape: MlpTape,
    probs: Matrix,
    prev: Vec<u32>,
    targets: Vec<u32>,
    l_frames: usize,
}

fn decoder_inputs(context: &[f64], prev: &[u32], dec: &Decoder) -> Matrix {
    let e = dec.embed.cols();
    let d = context.len();
    let mut data = Vec::with_capacity(prev.len() * (d + e));
    for &p in prev {
        data.extend_from_slice(context);
        data.extend_from_slice(dec.embed.row(p as usize));
    }
    Matrix::from_vec(prev.len(), d + e, data).expect("decoder input shape")
}

/// Teacher-forced decode: summed cross-entropy through the eos prediction.
/// Returns the loss and the per-step logits ((T+1) x |V|).
pub fn decode_loss(fused: &Matrix, target: &TokenSequence, dec: &Decoder) -> Result<(f64, Matrix)> {
    decode_loss_traced(fused, target, dec).map(|(loss, logits, _)| (loss, logits))
}

pub fn decode_loss_traced(
    fused: &Matrix,
    target: &TokenSequence,
    dec: &Decoder,
) -> Result<(f64, Matrix, DecodeTrace)> {
    if target.is_empty() {
        return Err(TranslateError::EmptyTarget);
    }
    for &id in target.ids() {
        if id as usize >= dec.vocab_size() {
            return Err(TranslateError::TokenOutOfRange {
                id,
                vocab: dec.vocab_size(),
            });
        }
    }
    let context = fused.col_mean();
    let mut prev = vec![BOS];
    prev.extend_from_slice(target.ids());
    let mut targets = target.ids().to_vec();
    targets.push(EOS);
    let inputs = decoder_inputs(&context, &prev, dec);
    let (logits, mlp_tape) = dec.mlp.forward(&inputs)?;
    let probs = softmax_rows(&logits, 1.0)?;
    let mut loss = 0.0;
    for (step, &t) in targets.iter().enumerate() {
        let p = probs.at(step, t as usize);
        // Clamp away from zero but let NaN propagate so a divergent run is
        // caught by the trainer's finiteness check.
        loss -= if p.is_nan() {
            f64::NAN
        } else {
            p.max(f64::MIN_POSITIVE).ln()
        };
    }
    Ok((
        loss,
        logits,
        DecodeTrace {
            mlp_tape,
            probs,
            prev,
            targets,
            l_frames: fused.rows(),
        },
    ))
}

/// Gradients of the summed NLL with respect to the fused features and the
/// decoder parameters.
pub fn decode_backward(dec: &Decoder, trace: &DecodeTrace) -> Result<(Matrix, DecoderGrads)> {
    let steps = trace.targets.len();
    let vocab = dec.vocab_size();
    let mut grad_logits = trace.probs.clone();
    for (step, &t) in trace.targets.iter().enumerate() {
        let v = grad_logits.at(step, t as usize) - 1.0;
        grad_logits.set(step, t as usize, v);
    }
    debug_assert_eq!(grad_logits.cols(), vocab);
    debug_assert_eq!(grad_logits.rows(), steps);
    let (grad_inputs, mlp_grads) = dec.mlp.backward(&trace.mlp_tape, &grad_logits)?;
    let d = dec.context_dim();
    let e = dec.embed.cols();
    let mut grad_context = vec![0.0f64; d];
    let mut grad_embed = Matrix::zeros(vocab, e);
    for step in 0..steps {
        let row = grad_inputs.row(step);
        for (g, &v) in grad_context.iter_mut().zip(&row[..d]) {
            *g += v;
        }
        let prev = trace.prev[step] as usize;
        let embed_row = grad_embed.row_mut(prev);
        for (g, &v) in embed_row.iter_mut().zip(&row[d..d + e]) {
            *g += v;
        }
    }
    // The context is the column mean of the fused rows.
    let l = trace.l_frames.max(1) as f64;
    let mut grad_fused = Matrix::zeros(trace.l_frames, d);
    for i in 0..trace.l_frames {
        for (j, g) in grad_context.iter().enumerate() {
            grad_fused.set(i, j, g / l);
        }
    }
    Ok((
        grad_fused,
        DecoderGrads {
            embed: grad_embed,
            mlp: mlp_grads,
        },
    ))
}

/// Greedy autoregressive decode: argmax per step (ties to the lowest id),
/// stopping at eos or after `max_len` tokens. The returned sequence excludes
/// bos and eos.
pub fn decode_greedy(fused: &Matrix, dec: &Decoder, max_len: usize) -> Result<TokenSequence> {
    let context = fused.col_mean();
    let mut out = Vec::new();
    let mut prev = BOS;
    for _ in 0..max_len {
        let inputs = decoder_inputs(&context, &[prev], dec);
        let logits = dec.mlp.eval(&inputs)?;
        let mut best = 0usize;
        for j in 1..dec.vocab_size() {
            if logits.at(0, j) > logits.at(0, best) {
                best = j;
            }
        }
        if best as u32 == EOS {
            break;
        }
        out.push(best as u32);
        prev = best as u32;
    }
    // bos is a marker, never content; a degenerate decoder that argmaxes it
    // mid-sequence yields unk in the returned tokens.
    TokenSequence::new(
        out.iter()
            .map(|&t| if t == BOS { UNK } else { t })
            .collect(),
        dec.vocab_size(),
    )
}

/// All learnable parameter groups of the pipeline.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Mlp,
    pub mir: MemoryPool,
    pub mar: MarParams,
    pub decoder: Decoder,
}

/// Gradients matching [`Model`]'s parameter groups.
pub struct ModelGrads {
    pub encoder: MlpGrads,
    pub mir: MirGrads,
    pub mar: MarGrads,
    pub decoder: DecoderGrads,
}

impl ModelGrads {
    /// Flattened (name, values) pairs in the canonical parameter order.
    pub fn entries(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let push_mlp = |out: &mut Vec<(String, Vec<f64>)>, prefix: &str, grads: &MlpGrads| {
            for (i, (w, b)) in grads.layers.iter().enumerate() {
                out.push((format!("{prefix}.l{i}.w"), w.data().to_vec()));
                out.push((format!("{prefix}.l{i}.b"), b.clone()));
            }
        };
        push_mlp(&mut out, "enc", &self.encoder);
        out.push(("mir.memory".into(), self.mir.memory.data().to_vec()));
        out.push(("mir.alpha".into(), vec![self.mir.alpha]));
        push_mlp(&mut out, "mir.enc", &self.mir.enc);
        push_mlp(&mut out, "mir.dec", &self.mir.dec);
        push_mlp(&mut out, "mar.enc", &self.mar.enc);
        push_mlp(&mut out, "mar.dec", &self.mar.dec);
        out.push(("mar.beta".into(), vec![self.mar.beta]));
        out.push(("dec.embed".into(), self.decoder.embed.data().to_vec()));
        push_mlp(&mut out, "dec.mlp", &self.decoder.mlp);
        out
    }
}

/// Record of one forward pass through the full pipeline.
pub struct Trace {
    enc_tape_rgb: MlpTape,
    enc_tape_evt: MlpTape,
    mir_rgb: Option<MirTrace>,
    mir_evt: Option<MirTrace>,
    mir_rec: Vec<MirTrace>,
    mar_rgb: Option<MarTrace>,
    mar_evt: Option<MarTrace>,
    dec: DecodeTrace,
}

impl Model {
    /// Builds all parameter groups from one seeded generator, in a fixed
    /// order so identical seeds give identical models.
    pub fn new(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size <= RESERVED_TOKENS as usize {
            return Err(TranslateError::Config(format!(
                "vocab must exceed the {RESERVED_TOKENS} reserved ids, got {vocab_size}"
            )));
        }
        if cfg.frame_interval == 0 || cfg.max_frames == 0 {
            return Err(TranslateError::Config(
                "frame_interval and max_frames must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::projection(POOLED_DIM, cfg.enc_hidden, cfg.feature_dim, &mut rng)?;
        let mir = MemoryPool::new(
            cfg.feature_dim,
            cfg.d_mem,
            cfg.n_slots,
            cfg.proj_hidden,
            cfg.top_k,
            &mut rng,
        )?;
        let mar = MarParams::new(
            cfg.feature_dim,
            cfg.proto_dim,
            cfg.proj_hidden,
            cfg.beta_h,
            cfg.hopfield_iterations,
            &mut rng,
        )?;
        let embed = Matrix::glorot(vocab_size, cfg.embed_dim, &mut rng);
        let mut dims = vec![cfg.feature_dim + cfg.embed_dim];
        let mut acts = Vec::new();
        for _ in 0..cfg.decoder_layers {
            dims.push(cfg.decoder_hidden);
            acts.push(crate::numkit::Activation::Relu);
        }
        dims.push(vocab_size);
        acts.push(crate::numkit::Activation::Identity);
        let mlp = Mlp::new(&dims, &acts, &mut rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            mir,
            mar,
            decoder: Decoder { embed, mlp },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }

    /// Full pipeline forward: frame sampling, shared encoding, micro
    /// enhancement and fusion, macro enhancement, additive fusion, and
    /// teacher-forced decoding.
    pub fn forward_loss(
        &self,
        sample: &AlignedSample,
        protos: Option<&PrototypeSet>,
    ) -> Result<(f64, Matrix, Trace)> {
        let rgb = sample_frames(&sample.rgb, &self.cfg);
        let evt = sample_frames(&sample.evt, &self.cfg);
        let (f_rgb, enc_tape_rgb) = visual_encode_traced(&rgb, &self.encoder)?;
        let (f_evt, enc_tape_evt) = visual_encode_traced(&evt, &self.encoder)?;

        let (fhat_rgb, mir_rgb) = if self.cfg.mir_micro {
            let (out, tr) = mir_enhance_traced(&f_rgb, &self.mir)?;
            (out, Some(tr))
        } else {
            (f_rgb.clone(), None)
        };
        let (fhat_evt, mir_evt) = if self.cfg.mir_micro {
            let (out, tr) = mir_enhance_traced(&f_evt, &self.mir)?;
            (out, Some(tr))
        } else {
            (f_evt.clone(), None)
        };

        let mut f_micro = fhat_rgb.add(&fhat_evt)?;
        let mut mir_rec = Vec::new();
        if self.cfg.mir_recurrent {
            for _ in 0..self.cfg.mir_iterations {
                let (out, tr) = mir_enhance_traced(&f_micro, &self.mir)?;
                f_micro = out;
                mir_rec.push(tr);
            }
        }

        let (f_rgb_macro, mar_rgb, f_evt_macro, mar_evt) = if self.cfg.mar {
            let protos = protos.ok_or(TranslateError::MissingPrototypes)?;
            let (out_r, tr_r) = mar_enhance_traced(&f_rgb, protos, &self.mar)?;
            let (out_e, tr_e) = mar_enhance_traced(&f_evt, protos, &self.mar)?;
            (out_r, Some(tr_r), out_e, Some(tr_e))
        } else {
            (f_rgb.clone(), None, f_evt.clone(), None)
        };

        let fused = fuse(&f_micro, &f_rgb_macro, &f_evt_macro)?;
        let (loss, logits, dec) = decode_loss_traced(&fused, &sample.tokens, &self.decoder)?;
        Ok((
            loss,
            logits,
            Trace {
                enc_tape_rgb,
                enc_tape_evt,
                mir_rgb,
                mir_evt,
                mir_rec,
                mar_rgb,
                mar_evt,
                dec,
            },
        ))
    }

    /// Per-step logits for a sample (teacher-forced), used by the ablation
    /// identity check and diagnostics.
    pub fn logits(&self, sample: &AlignedSample, protos: Option<&PrototypeSet>) -> Result<Matrix> {
        self.forward_loss(sample, protos)
            .map(|(_, logits, _)| logits)
    }

    /// Exact gradients of the recorded forward pass.
    pub fn backward(&self, trace: &Trace, protos: Option<&PrototypeSet>) -> Result<ModelGrads> {
        let (grad_fused, decoder_grads) = decode_backward(&self.decoder, &trace.dec)?;

        let mut mar_grads = MarGrads::zeros(&self.mar);
        let (grad_rgb_from_mar, grad_evt_from_mar) = match (&trace.mar_rgb, &trace.mar_evt) {
            (Some(tr_r), Some(tr_e)) => {
                let protos = protos.ok_or(TranslateError::MissingPrototypes)?;
                let (g_r, gr) = mar_backward(&self.mar, protos, tr_r, &grad_fused)?;
                mar_grads.add_assign(&gr)?;
                let (g_e, ge) = mar_backward(&self.mar, protos, tr_e, &grad_fused)?;
                mar_grads.add_assign(&ge)?;
                (g_r, g_e)
            }
            _ => (grad_fused.clone(), grad_fused.clone()),
        };

        let mut mir_grads = MirGrads::zeros(&self.mir);
        let mut grad_micro = grad_fused;
        for tr in trace.mir_rec.iter().rev() {
            let (g, gm) = mir_backward(&self.mir, tr, &grad_micro)?;
            grad_micro = g;
            mir_grads.add_assign(&gm)?;
        }
        // f_micro = fhat_rgb + fhat_evt: the gradient passes to both branches.
        let grad_rgb_from_mir = match &trace.mir_rgb {
            Some(tr) => {
                let (g, gm) = mir_backward(&self.mir, tr, &grad_micro)?;
                mir_grads.add_assign(&gm)?;
                g
            }
            None => grad_micro.clone(),
        };
        let grad_evt_from_mir = match &trace.mir_evt {
            Some(tr) => {
                let (g, gm) = mir_backward(&self.mir, tr, &grad_micro)?;
                mir_grads.add_assign(&gm)?;
                g
            }
            None => grad_micro.clone(),
        };

        let grad_f_rgb = grad_rgb_from_mar.add(&grad_rgb_from_mir)?;
        let grad_f_evt = grad_evt_from_mar.add(&grad_evt_from_mir)?;
        let (_, enc_rgb) = self.encoder.backward(&trace.enc_tape_rgb, &grad_f_rgb)?;
        let (_, enc_evt) = self.encoder.backward(&trace.enc_tape_evt, &grad_f_evt)?;
        let mut encoder_grads = enc_rgb;
        encoder_grads.add_assign(&enc_evt)?;

        Ok(ModelGrads {
            encoder: encoder_grads,
            mir: mir_grads,
            mar: mar_grads,
            decoder: decoder_grads,
        })
    }

    /// Greedy translation of a sample.
    pub fn predict(
        &self,
        sample: &AlignedSample,
        protos: Option<&PrototypeSet>,
        max_len: usize,
    ) -> Result<TokenSequence> {
        let rgb = sample_frames(&sample.rgb, &self.cfg);
        let evt = sample_frames(&sample.evt, &self.cfg);
        let f_rgb = visual_encode(&rgb, &self.encoder)?;
        let f_evt = visual_encode(&evt, &self.encoder)?;
        let (fhat_rgb, fhat_evt) = if self.cfg.mir_micro {
            (
                crate::mir::mir_enhance(&f_rgb, &self.mir)?,
                crate::mir::mir_enhance(&f_evt, &self.mir)?,
            )
        } else {
            (f_rgb.clone(), f_evt.clone())
        };
        let f_micro = crate::mir::mir_fuse(
            &fhat_rgb,
            &fhat_evt,
            &self.mir,
            self.cfg.mir_recurrent,
            self.cfg.mir_iterations,
        )?;
        let (f_rgb_macro, f_evt_macro) = if self.cfg.mar {
            let protos = protos.ok_or(TranslateError::MissingPrototypes)?;
            (
                crate::hopfield::mar_enhance(&f_rgb, protos, &self.mar)?,
                crate::hopfield::mar_enhance(&f_evt, protos, &self.mar)?,
            )
        } else {
            (f_rgb.clone(), f_evt.clone())
        };
        let fused = fuse(&f_micro, &f_rgb_macro, &f_evt_macro)?;
        decode_greedy(&fused, &self.decoder, max_len)
    }

    /// Named parameter tensors in canonical order (for checkpoints).
    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        push_mlp_tensors(&mut out, "enc", &self.encoder);
        out.push(("mir.memory".into(), self.mir.memory.clone()));
        out.push((
            "mir.alpha".into(),
            Matrix::from_vec(1, 1, vec![self.mir.alpha]).unwrap(),
        ));
        push_mlp_tensors(&mut out, "mir.enc", &self.mir.enc);
        push_mlp_tensors(&mut out, "mir.dec", &self.mir.dec);
        push_mlp_tensors(&mut out, "mar.enc", &self.mar.enc);
        push_mlp_tensors(&mut out, "mar.dec", &self.mar.dec);
        out.push((
            "mar.beta".into(),
            Matrix::from_vec(1, 1, vec![self.mar.beta]).unwrap(),
        ));
        out.push(("dec.embed".into(), self.decoder.embed.clone()));
        push_mlp_tensors(&mut out, "dec.mlp", &self.decoder.mlp);
        out
    }

    /// Writes the checkpoint.
    pub fn save<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        let tensors = self.tensors();
        let refs: Vec<(String, &Matrix)> = tensors.iter().map(|(n, m)| (n.clone(), m)).collect();
        Ok(save_checkpoint(out, &refs)?)
    }

    /// Loads a checkpoint into a freshly constructed model; every tensor must
    /// match by name and shape.
    pub fn load<R: std::io::Read>(
        cfg: &ModelConfig,
        vocab_size: usize,
        input: &mut R,
    ) -> Result<Self> {
        let mut model = Model::new(cfg, vocab_size, 0)?;
        let tensors = load_checkpoint(input)?;
        let expected = model.tensors();
        if tensors.len() != expected.len() {
            return Err(TranslateError::CheckpointMismatch(format!(
                "{} tensors in file, model has {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((name, m), (want_name, want)) in tensors.into_iter().zip(expected) {
            if name != want_name {
                return Err(TranslateError::CheckpointMismatch(format!(
                    "tensor {name} where {want_name} was expected"
                )));
            }
            if m.rows() != want.rows() || m.cols() != want.cols() {
                return Err(TranslateError::CheckpointMismatch(format!(
                    "{name}: {}x{} in file, model needs {}x{}",
                    m.rows(),
                    m.cols(),
                    want.rows(),
                    want.cols()
                )));
            }
            model.store_tensor(&name, m);
        }
        Ok(model)
    }

    fn store_tensor(&mut self, name: &str, m: Matrix) {
        let assign_mlp = |mlp: &mut Mlp, rest: &str, m: Matrix| {
            let (layer, kind) = rest.split_once('.').unwrap();
            let idx: usize = layer[1..].parse().unwrap();
            match kind {
                "w" => mlp.layers_mut()[idx].weight = m,
                "b" => mlp.layers_mut()[idx].bias = m.data().to_vec(),
                _ => unreachable!("validated by name match"),
            }
        };
        match name {
            "mir.memory" => self.mir.memory = m,
            "mir.alpha" => self.mir.alpha = m.at(0, 0),
            "mar.beta" => self.mar.beta = m.at(0, 0),
            "dec.embed" => self.decoder.embed = m,
            _ => {
                if let Some(rest) = name.strip_prefix("enc.") {
                    assign_mlp(&mut self.encoder, rest, m);
                } else if let Some(rest) = name.strip_prefix("mir.enc.") {
                    assign_mlp(&mut self.mir.enc, rest, m);
                } else if let Some(rest) = name.strip_prefix("mir.dec.") {
                    assign_mlp(&mut self.mir.dec, rest, m);
                } else if let Some(rest) = name.strip_prefix("mar.enc.") {
                    assign_mlp(&mut self.mar.enc, rest, m);
                } else if let Some(rest) = name.strip_prefix("mar.dec.") {
                    assign_mlp(&mut self.mar.dec, rest, m);
                } else if let Some(rest) = name.strip_prefix("dec.mlp.") {
                    assign_mlp(&mut self.decoder.mlp, rest, m);
                } else {
                    unreachable!("validated by name match");
                }
            }
        }
    }

    /// Canonical parameter tensor names, matching [`Model::tensors`] order.
    pub fn param_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _)| n).collect()
    }

    /// Mutable view of one named parameter tensor (row-major values).
    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        fn mlp_slice<'a>(mlp: &'a mut Mlp, rest: &str) -> Option<&'a mut [f64]> {
            let (layer, kind) = rest.split_once('.')?;
            let idx: usize = layer.strip_prefix('l')?.parse().ok()?;
            let layer = mlp.layers_mut().get_mut(idx)?;
            match kind {
                "w" => Some(layer.weight.data_mut()),
                "b" => Some(&mut layer.bias),
                _ => None,
            }
        }
        match name {
            "mir.memory" => Some(self.mir.memory.data_mut()),
            "mir.alpha" => Some(std::slice::from_mut(&mut self.mir.alpha)),
            "mar.beta" => Some(std::slice::from_mut(&mut self.mar.beta)),
            "dec.embed" => Some(self.decoder.embed.data_mut()),
            _ => {
                if let Some(rest) = name.strip_prefix("mir.enc.") {
                    mlp_slice(&mut self.mir.enc, rest)
                } else if let Some(rest) = name.strip_prefix("mir.dec.") {
                    mlp_slice(&mut self.mir.dec, rest)
                } else if let Some(rest) = name.strip_prefix("mar.enc.") {
                    mlp_slice(&mut self.mar.enc, rest)
                } else if let Some(rest) = name.strip_prefix("mar.dec.") {
                    mlp_slice(&mut self.mar.dec, rest)
                } else if let Some(rest) = name.strip_prefix("dec.mlp.") {
                    mlp_slice(&mut self.decoder.mlp, rest)
                } else if let Some(rest) = name.strip_prefix("enc.") {
                    mlp_slice(&mut self.encoder, rest)
                } else {
                    None
                }
            }
        }
    }

    /// Mutable views of every parameter, paired with gradient vectors from
    /// `grads`, in matching order for the optimizer.
    fn apply_sgd(
        &mut self,
        grads: &ModelGrads,
        step: usize,
        sgd: &SgdConfig,
        state: &mut SgdState,
    ) -> Result<()> {
        let mut names: Vec<String> = Vec::new();
        let mut params: Vec<&mut [f64]> = Vec::new();
        let mut gvecs: Vec<Vec<f64>> = Vec::new();

        collect_mlp(
            &mut names,
            &mut params,
            &mut gvecs,
            "enc",
            &mut self.encoder,
            &grads.encoder,
        );
        names.push("mir.memory".into());
        params.push(self.mir.memory.data_mut());
        gvecs.push(grads.mir.memory.data().to_vec());
        names.push("mir.alpha".into());
        params.push(std::slice::from_mut(&mut self.mir.alpha));
        gvecs.push(vec![grads.mir.alpha]);
        collect_mlp(
            &mut names,
            &mut params,
            &mut gvecs,
            "mir.enc",
            &mut self.mir.enc,
            &grads.mir.enc,
        );
        collect_mlp(
            &mut names,
            &mut params,
            &mut gvecs,
            "mir.dec",
            &mut self.mir.dec,
            &grads.mir.dec,
        );
        collect_mlp(
            &mut names,
            &mut params,
            &mut gvecs,
            "mar.enc",
            &mut self.mar.enc,
            &grads.mar.enc,
        );
        collect_mlp(
            &mut names,
            &mut params,
            &mut gvecs,
            "mar.dec",
            &mut self.mar.dec,
            &grads.mar.dec,
        );
        names.push("mar.beta".into());
        params.push(std::slice::from_mut(&mut self.mar.beta));
        gvecs.push(vec![grads.mar.beta]);
        names.push("dec.embed".into());
        params.push(self.decoder.embed.data_mut());
        gvecs.push(grads.decoder.embed.data().to_vec());
        collect_mlp(
            &mut names,
            &mut params,
            &mut gvecs,
            "dec.mlp",
            &mut self.decoder.mlp,
            &grads.decoder.mlp,
        );

        let mut param_pairs: Vec<(String, &mut [f64])> =
            names.iter().cloned().zip(params).collect();
        let grad_pairs: Vec<(String, &[f64])> = names
            .iter()
            .cloned()
            .zip(gvecs.iter().map(Vec::as_slice))
            .collect();
        Ok(sgd_step(&mut param_pairs, &grad_pairs, step, sgd, state)?)
    }
}

fn push_mlp_tensors(out: &mut Vec<(String, Matrix)>, prefix: &str, mlp: &Mlp) {
    for (i, layer) in mlp.layers().iter().enumerate() {
        out.push((format!("{prefix}.l{i}.w"), layer.weight.clone()));
        out.push((
            format!("{prefix}.l{i}.b"),
            Matrix::from_vec(1, layer.bias.len(), layer.bias.clone()).unwrap(),
        ));
    }
}

fn collect_mlp<'a>(
    names: &mut Vec<String>,
    params: &mut Vec<&'a mut [f64]>,
    gvecs: &mut Vec<Vec<f64>>,
    prefix: &str,
    mlp: &'a mut Mlp,
    grads: &MlpGrads,
) {
    for (i, (layer, (gw, gb))) in mlp.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
        names.push(format!("{prefix}.l{i}.w"));
        params.push(layer.weight.data_mut());
        gvecs.push(gw.data().to_vec());
        names.push(format!("{prefix}.l{i}.b"));
        params.push(&mut layer.bias);
        gvecs.push(gb.clone());
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Trains a fresh model with per-sample SGD over shuffled epochs.
///
/// The annealing horizon is `epochs * dataset.len()` steps. Returns the
/// trained model and the per-epoch mean loss trace. A non-finite loss aborts
/// with [`TranslateError::NumericFailure`].
pub fn train(
    dataset: &[AlignedSample],
    protos: Option<&PrototypeSet>,
    cfg: &ModelConfig,
    vocab_size: usize,
    lr0: f64,
    momentum: f64,
    epochs: usize,
    seed: u64,
) -> Result<(Model, Vec<EpochStats>)> {
    if dataset.is_empty() {
        return Err(TranslateError::EmptyDataset);
    }
    if epochs == 0 {
        return Err(TranslateError::Config("epochs must be >= 1".into()));
    }
    let mut model = Model::new(cfg, vocab_size, seed)?;
    let total_steps = epochs * dataset.len();
    let sgd = SgdConfig::new(lr0, total_steps, momentum)?;
    let mut state = SgdState::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5157));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let lr_at_start = cosine_annealed_lr(step, &sgd);
        let mut loss_sum = 0.0;
        for &idx in &order {
            let (loss, _, trace) = model.forward_loss(&dataset[idx], protos)?;
            if !loss.is_finite() {
                return Err(TranslateError::NumericFailure { step });
            }
            let grads = model.backward(&trace, protos)?;
            model.apply_sgd(&grads, step, &sgd, &mut state)?;
            loss_sum += loss;
            step += 1;
        }
        log.push(EpochStats {
            epoch,
            mean_loss: loss_sum / dataset.len() as f64,
            lr: lr_at_start,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Activation;
    use crate::synth::{gen_sample, SynthSpec};

    fn zero_frames(t: usize, h: usize, w: usize) -> FrameSequence {
        FrameSequence::new(t, h, w, vec![0.0; t * h * w * 3]).unwrap()
    }

    #[test]
    fn sample_frames_takes_every_interval() {
        let f = counting_frames(10);
        let cfg = ModelConfig {
            frame_interval: 4,
            max_frames: 64,
            ..ModelConfig::default()
        };
        let out = sample_frames(&f, &cfg);
        assert_eq!(out.len(), 3);
        assert_eq!(out.at(0, 0, 0, 0), 0.0);
        assert_eq!(out.at(1, 0, 0, 0), 0.04);
        assert_eq!(out.at(2, 0, 0, 0), 0.08);
    }

    fn counting_frames(t: usize) -> FrameSequence {
        let mut data = vec![0.0f32; t * 4 * 4 * 3];
        for frame in 0..t {
            let base = frame * 4 * 4 * 3;
            for v in &mut data[base..base + 4 * 4 * 3] {
                *v = frame as f32 / 100.0;
            }
        }
        FrameSequence::new(t, 4, 4, data).unwrap()
    }

    #[test]
    fn sample_frames_caps_at_max() {
        let f = zero_frames(300, 4, 4);
        let cfg = ModelConfig::default();
        assert_eq!(sample_frames(&f, &cfg).len(), 64);
    }

    #[test]
    fn sample_frames_length_matches_closed_form() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for _ in 0..30 {
            let t = rng.gen_range(1..200);
            let interval = rng.gen_range(1..8);
            let max = rng.gen_range(1..80);
            let cfg = ModelConfig {
                frame_interval: interval,
                max_frames: max,
                ..ModelConfig::default()
            };
            let out = sample_frames(&zero_frames(t, 4, 4), &cfg);
            let expected = (t + interval - 1) / interval;
            assert_eq!(out.len(), expected.min(max));
        }
    }

    #[test]
    fn zero_frames_give_constant_feature_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let enc = Mlp::projection(POOLED_DIM, 8, 5, &mut rng).unwrap();
        let f = visual_encode(&zero_frames(4, 8, 8), &enc).unwrap();
        for i in 1..4 {
            assert_eq!(f.row(i), f.row(0));
        }
    }

    #[test]
    fn permuting_frames_permutes_feature_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let enc = Mlp::projection(POOLED_DIM, 8, 5, &mut rng).unwrap();
        let frames = counting_frames(5);
        let f = visual_encode(&frames, &enc).unwrap();
        let permuted = frames.select_frames(&[3, 1, 4, 0, 2]);
        let fp = visual_encode(&permuted, &enc).unwrap();
        for (out_row, &src) in [3usize, 1, 4, 0, 2].iter().enumerate() {
            assert_eq!(fp.row(out_row), f.row(src));
        }
    }

    #[test]
    fn visual_encode_matches_manual_pool_plus_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let enc = Mlp::projection(POOLED_DIM, 8, 5, &mut rng).unwrap();
        let frames = counting_frames(3);
        let f = visual_encode(&frames, &enc).unwrap();
        let manual = enc.eval(&pool_frames(&frames)).unwrap();
        for (a, b) in f.data().iter().zip(manual.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_frame_fusion_averages_values() {
        let rgb = FrameSequence::new(2, 2, 2, vec![0.8; 2 * 2 * 2 * 3]).unwrap();
        let evt = FrameSequence::new(2, 2, 2, vec![0.2; 2 * 2 * 2 * 3]).unwrap();
        let fused = weighted_frame_fusion(&rgb, &evt).unwrap();
        assert!(fused.data().iter().all(|&v| v == 0.5));
        let short = FrameSequence::new(1, 2, 2, vec![0.0; 12]).unwrap();
        assert!(weighted_frame_fusion(&rgb, &short).is_err());
    }

    #[test]
    fn fuse_is_elementwise_and_identity_with_zeros() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Matrix::zeros(2, 2);
        assert_eq!(fuse(&a, &z, &z).unwrap(), a);
        assert_eq!(fuse(&z, &a, &z).unwrap(), a);
        let b = Matrix::from_vec(2, 2, vec![0.5; 4]).unwrap();
        let c = Matrix::from_vec(2, 2, vec![0.25; 4]).unwrap();
        let f1 = fuse(&a, &b, &c).unwrap();
        let f2 = fuse(&c, &a, &b).unwrap();
        assert_eq!(f1, f2); // commutative
        for i in 0..4 {
            assert_eq!(f1.data()[i], a.data()[i] + 0.75);
        }
    }

    fn uniform_decoder(vocab: usize, d: usize, e: usize) -> Decoder {
        // Zero weights everywhere: logits are uniformly zero.
        let embed = Matrix::zeros(vocab, e);
        let mlp = Mlp::from_layers(vec![crate::numkit::Layer {
            weight: Matrix::zeros(d + e, vocab),
            bias: vec![0.0; vocab],
            activation: Activation::Identity,
        }])
        .unwrap();
        Decoder { embed, mlp }
    }

    #[test]
    fn uniform_logits_loss_is_steps_times_log_vocab() {
        let dec = uniform_decoder(10, 4, 3);
        let fused = Matrix::zeros(5, 4);
        let target = TokenSequence::new(vec![4, 5, 6], 10).unwrap();
        let (loss, logits) = decode_loss(&fused, &target, &dec).unwrap();
        assert_eq!(logits.rows(), 4);
        assert!((loss - 4.0 * (10.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn peaked_correct_logits_drive_loss_to_zero() {
        // Embed = one-hot over the vocabulary; the single linear layer maps
        // prev-token one-hots to a margin-20 logit on the correct next token.
        let vocab = 8;
        let d = 3;
        let embed = Matrix::identity(vocab);
        let mut w = Matrix::zeros(d + vocab, vocab);
        // bos -> 4, 4 -> 5, 5 -> 6, 6 -> eos.
        for (prev, next) in [(BOS, 4u32), (4, 5), (5, 6), (6, EOS)] {
            w.set(d + prev as usize, next as usize, 20.0);
        }
        let dec = Decoder {
            embed,
            mlp: Mlp::from_layers(vec![crate::numkit::Layer {
                weight: w,
                bias: vec![0.0; vocab],
                activation: Activation::Identity,
            }])
            .unwrap(),
        };
        let fused = Matrix::zeros(2, d);
        let target = TokenSequence::new(vec![4, 5, 6], vocab).unwrap();
        let (loss, _) = decode_loss(&fused, &target, &dec).unwrap();
        assert!(loss <= 1e-3, "loss = {loss}");
    }

    #[test]
    fn decode_loss_matches_per_step_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let model = Model::new(&tiny_cfg(), 9, 7).unwrap();
        let fused = Matrix::uniform(4, tiny_cfg().feature_dim, 1.0, &mut rng);
        let target = TokenSequence::new(vec![4, 7, 5], 9).unwrap();
        let (loss, logits) = decode_loss(&fused, &target, &model.decoder).unwrap();
        // Scalar oracle: softmax each row directly.
        let targets = [4u32, 7, 5, EOS];
        let mut expected = 0.0;
        for (step, &t) in targets.iter().enumerate() {
            let row = logits.row(step);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let p = ((row[t as usize] - max).exp()) / denom;
            expected -= p.ln();
        }
        assert!((loss - expected).abs() < 1e-9);
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let dec = uniform_decoder(6, 4, 3);
        let fused = Matrix::zeros(2, 4);
        // Build the sequence against a larger vocab, then decode against 6.
        let target = TokenSequence::new(vec![7], 12).unwrap();
        assert!(matches!(
            decode_loss(&fused, &target, &dec),
            Err(TranslateError::TokenOutOfRange { id: 7, vocab: 6 })
        ));
    }

    #[test]
    fn divergent_training_aborts_with_numeric_failure() {
        // An absurd learning rate blows the parameters up to non-finite
        // values within a few steps; the trainer must stop with the numeric
        // failure instead of continuing on garbage.
        let cfg = ModelConfig {
            mar: false,
            ..tiny_cfg()
        };
        let dataset = vec![tiny_sample(39)];
        let result = train(&dataset, None, &cfg, 9, 1e9, 0.0, 50, 8);
        assert!(matches!(result, Err(TranslateError::NumericFailure { .. })));
    }

    #[test]
    fn loss_is_always_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let model = Model::new(&tiny_cfg(), 9, 55).unwrap();
        for _ in 0..10 {
            let fused = Matrix::uniform(4, tiny_cfg().feature_dim, 3.0, &mut rng);
            let target = TokenSequence::new(vec![4, 7], 9).unwrap();
            let (loss, _) = decode_loss(&fused, &target, &model.decoder).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let dec = uniform_decoder(6, 4, 3);
        let fused = Matrix::zeros(2, 4);
        let target = TokenSequence::new(vec![], 6).unwrap();
        assert!(matches!(
            decode_loss(&fused, &target, &dec),
            Err(TranslateError::EmptyTarget)
        ));
    }

    #[test]
    fn greedy_stops_immediately_on_eos_argmax() {
        let mut dec = uniform_decoder(6, 4, 3);
        dec.mlp.layers_mut()[0].bias[EOS as usize] = 10.0;
        let fused = Matrix::zeros(2, 4);
        let out = decode_greedy(&fused, &dec, 8).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_output_respects_max_len() {
        let mut dec = uniform_decoder(6, 4, 3);
        // Always argmax token 4 (never eos): runs to max_len.
        dec.mlp.layers_mut()[0].bias[4] = 10.0;
        let fused = Matrix::zeros(2, 4);
        let out = decode_greedy(&fused, &dec, 5).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.ids().iter().all(|&t| t == 4));
    }

    #[test]
    fn greedy_ties_break_to_lowest_id() {
        let dec = uniform_decoder(6, 4, 3);
        // All-zero logits: argmax is id 0 = bos, which maps to unk in the
        // output (never emitted as bos) and the loop continues.
        let fused = Matrix::zeros(2, 4);
        let out = decode_greedy(&fused, &dec, 3).unwrap();
        assert_eq!(out.len(), 3);
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            frame_interval: 2,
            max_frames: 8,
            enc_hidden: 6,
            n_slots: 3,
            d_mem: 5,
            top_k: 2,
            proj_hidden: 6,
            proto_dim: 4,
            beta_h: 8.0,
            hopfield_iterations: 1,
            mir_iterations: 1,
            decoder_hidden: 10,
            decoder_layers: 1,
            embed_dim: 4,
            mir_micro: true,
            mir_recurrent: true,
            mar: true,
        }
    }

    fn tiny_sample(seed: u64) -> AlignedSample {
        let spec = SynthSpec {
            width: 16,
            height: 16,
            vocab_size: 9,
            tokens_per_sample: 1,
            active_frames: 4,
            idle_frames: 4,
            ..SynthSpec::default()
        };
        gen_sample(&spec, seed).unwrap().aligned
    }

    fn tiny_protos(seed: u64, dim: usize, count: usize) -> PrototypeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PrototypeSet {
            prototypes: Matrix::uniform(count, dim, 1.0, &mut rng),
            sizes: vec![1; count],
        }
    }

    #[test]
    fn identical_seeds_give_identical_models_and_losses() {
        let cfg = tiny_cfg();
        let sample = tiny_sample(4);
        let protos = tiny_protos(5, cfg.proto_dim, 2);
        let m1 = Model::new(&cfg, 9, 42).unwrap();
        let m2 = Model::new(&cfg, 9, 42).unwrap();
        let (l1, logits1, _) = m1.forward_loss(&sample, Some(&protos)).unwrap();
        let (l2, logits2, _) = m2.forward_loss(&sample, Some(&protos)).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(logits1, logits2);
    }

    #[test]
    fn warm_start_equals_baseline_bit_for_bit() {
        let full_cfg = tiny_cfg();
        let baseline_cfg = ModelConfig {
            mir_micro: false,
            mir_recurrent: false,
            mar: false,
            ..full_cfg.clone()
        };
        let sample = tiny_sample(6);
        let protos = tiny_protos(7, full_cfg.proto_dim, 2);
        let full = Model::new(&full_cfg, 9, 11).unwrap();
        let baseline = Model {
            cfg: baseline_cfg,
            ..full.clone()
        };
        assert_eq!(full.mir.alpha, 0.0);
        assert_eq!(full.mar.beta, 0.0);
        let logits_full = full.logits(&sample, Some(&protos)).unwrap();
        let logits_base = baseline.logits(&sample, None).unwrap();
        assert_eq!(logits_full, logits_base);
    }

    #[test]
    fn missing_prototypes_with_mar_enabled_is_an_error() {
        let cfg = tiny_cfg();
        let model = Model::new(&cfg, 9, 3).unwrap();
        let sample = tiny_sample(8);
        assert!(matches!(
            model.forward_loss(&sample, None),
            Err(TranslateError::MissingPrototypes)
        ));
    }

    #[test]
    fn checkpoint_round_trips_model_parameters() {
        let cfg = tiny_cfg();
        let mut model = Model::new(&cfg, 9, 21).unwrap();
        model.mir.alpha = 0.25;
        model.mar.beta = -0.125;
        let mut bytes = Vec::new();
        model.save(&mut bytes).unwrap();
        let loaded = Model::load(&cfg, 9, &mut bytes.as_slice()).unwrap();
        // f64 -> f32 -> f64 is exact for f32-representable values; the init
        // draws are arbitrary f64, so compare at f32 precision.
        for ((n1, t1), (n2, t2)) in model.tensors().iter().zip(loaded.tensors()) {
            assert_eq!(*n1, n2);
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*a as f32, *b as f32, "{n1}");
            }
        }
        assert_eq!(loaded.mir.alpha, 0.25);
        assert_eq!(loaded.mar.beta, -0.125);
    }

    #[test]
    fn checkpoint_dim_mismatch_is_reported() {
        let cfg = tiny_cfg();
        let model = Model::new(&cfg, 9, 21).unwrap();
        let mut bytes = Vec::new();
        model.save(&mut bytes).unwrap();
        let bigger = ModelConfig {
            feature_dim: 12,
            ..cfg
        };
        assert!(matches!(
            Model::load(&bigger, 9, &mut bytes.as_slice()),
            Err(TranslateError::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn smoke_training_decreases_loss() {
        let cfg = ModelConfig {
            mir_micro: true,
            mir_recurrent: false,
            mar: false,
            ..tiny_cfg()
        };
        let dataset = vec![tiny_sample(31)];
        let (_, log) = train(&dataset, None, &cfg, 9, 0.01, 0.0, 50, 13).unwrap();
        assert_eq!(log.len(), 50);
        // Non-increasing 5-epoch moving average.
        let avg = |w: &[EpochStats]| w.iter().map(|e| e.mean_loss).sum::<f64>() / w.len() as f64;
        let windows: Vec<f64> = log.windows(5).map(avg).collect();
        for pair in windows.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "moving average increased: {pair:?}"
            );
        }
        assert!(log.last().unwrap().mean_loss < log.first().unwrap().mean_loss);
    }

    #[test]
    fn ablated_training_still_learns_encoder_and_decoder() {
        let cfg = ModelConfig {
            mir_micro: false,
            mir_recurrent: false,
            mar: false,
            ..tiny_cfg()
        };
        let dataset = vec![tiny_sample(33)];
        let (model, log) = train(&dataset, None, &cfg, 9, 0.01, 0.0, 30, 13).unwrap();
        assert!(log.last().unwrap().mean_loss < log.first().unwrap().mean_loss);
        assert_eq!(model.mir.alpha, 0.0);
        assert_eq!(model.mar.beta, 0.0);
    }

    #[test]
    fn identical_seeds_give_identical_training_traces() {
        let cfg = tiny_cfg();
        let dataset = vec![tiny_sample(35), tiny_sample(36)];
        let protos = tiny_protos(37, cfg.proto_dim, 2);
        let (_, log1) = train(&dataset, Some(&protos), &cfg, 9, 0.01, 0.0, 5, 99).unwrap();
        let (_, log2) = train(&dataset, Some(&protos), &cfg, 9, 0.01, 0.0, 5, 99).unwrap();
        assert_eq!(log1, log2);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train(&[], None, &tiny_cfg(), 9, 0.01, 0.0, 1, 0),
            Err(TranslateError::EmptyDataset)
        ));
    }

    #[test]
    fn vocab_roundtrip_and_reserved_entries() {
        let v = Vocab::synthetic(8);
        assert_eq!(v.size(), 8);
        assert_eq!(v.word(BOS), Some("<bos>"));
        assert_eq!(v.word(EOS), Some("<eos>"));
        assert_eq!(v.id("g004"), Some(4));
        assert_eq!(v.id(v.word(6).unwrap()), Some(6));
    }

    #[test]
    fn token_sequence_rejects_bos_and_overflow() {
        assert!(matches!(
            TokenSequence::new(vec![4, BOS, 5], 8),
            Err(TranslateError::InteriorBos)
        ));
        assert!(matches!(
            TokenSequence::new(vec![9], 8),
            Err(TranslateError::TokenOutOfRange { .. })
        ));
    }
}
