//! Macro-sign prototype construction: sliding-window segment features,
//! cross-modal averaging, DBSCAN clustering, and centroid prototypes.

use crate::event::{AlignedSample, FrameSequence};
use crate::numkit::{load_checkpoint, save_checkpoint, Matrix, Mlp, NumError};
use crate::segment::{
    crop_sample, event_proposals, merge_proposals, motion_intensity, rgb_proposals, SegmentConfig,
    SegmentError,
};
use crate::translate::pool_frames;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("DBSCAN produced only noise points; widen eps or lower min_pts")]
    AllNoise,
    #[error("adaptive eps needs more than min_pts points, got {0}")]
    TooFewPoints(usize),
    #[error("eps must be positive, got {0}; widen eps or provide an explicit value")]
    DegenerateEps(f64),
    #[error("count/dimension mismatch: {0}")]
    Mismatch(String),
    #[error("window must accept {expected_h}x{expected_w} frames, got {got_h}x{got_w}")]
    SpatialMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("labels disagree with point count")]
    LabelCount,
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

pub type Result<T> = std::result::Result<T, PrototypeError>;

/// Sliding-window extraction parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window: 8,
            stride: 2,
        }
    }
}

/// DBSCAN parameters. `eps` may be fixed or derived from the data by the
/// median k-distance rule (k = `min_pts`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsRule {
    Adaptive,
    Fixed(f64),
}

impl serde::Serialize for EpsRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EpsRule::Adaptive => s.serialize_str("adaptive"),
            EpsRule::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> serde::Deserialize<'de> for EpsRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 => Ok(EpsRule::Fixed(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!(
                "eps must be positive, got {v}"
            ))),
            Raw::Str(s) if s == "adaptive" => Ok(EpsRule::Adaptive),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "eps must be a positive number or \"adaptive\", got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanConfig {
    pub eps: EpsRule,
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig {
            eps: EpsRule::Adaptive,
            min_pts: 4,
        }
    }
}

/// Cluster centroids used as Hopfield stored patterns, with per-prototype
/// member counts as provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Matrix,
    pub sizes: Vec<usize>,
}

impl PrototypeSet {
    pub fn count(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Serializes under the checkpoint tensor names `mar.prototypes` and
    /// `mar.prototype_sizes`.
    pub fn save<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        let sizes = Matrix::from_vec(
            1,
            self.sizes.len(),
            self.sizes.iter().map(|&s| s as f64).collect(),
        )?;
        save_checkpoint(
            out,
            &[
                ("mar.prototypes".to_string(), &self.prototypes),
                ("mar.prototype_sizes".to_string(), &sizes),
            ],
        )?;
        Ok(())
    }

    pub fn load<R: std::io::Read>(input: &mut R) -> Result<Self> {
        let tensors = load_checkpoint(input)?;
        let mut prototypes = None;
        let mut sizes = None;
        for (name, m) in tensors {
            match name.as_str() {
                "mar.prototypes" => prototypes = Some(m),
                "mar.prototype_sizes" => {
                    sizes = Some(m.data().iter().map(|&v| v as usize).collect::<Vec<_>>())
                }
                other => {
                    return Err(PrototypeError::Mismatch(format!(
                        "unexpected tensor {other} in prototype file"
                    )))
                }
            }
        }
        let (prototypes, sizes) = prototypes.zip(sizes).ok_or_else(|| {
            PrototypeError::Mismatch("prototype file is missing required tensors".into())
        })?;
        if prototypes.rows() != sizes.len() {
            return Err(PrototypeError::Mismatch(
                "prototype/size count disagreement".into(),
            ));
        }
        Ok(PrototypeSet { prototypes, sizes })
    }
}

/// Consecutive-frame windows starting at 0, stride, 2*stride, ... while
/// `start + window <= T`. A sequence shorter than one window yields a single
/// window padded by repeating the last frame; the flag reports the padding.
pub fn sliding_windows(
    frames: &FrameSequence,
    cfg: &WindowConfig,
) -> Result<(Vec<FrameSequence>, bool)> {
    if cfg.window == 0 || cfg.stride == 0 {
        return Err(PrototypeError::Mismatch(
            "window and stride must be >= 1".into(),
        ));
    }
    let t = frames.len();
    if t == 0 {
        return Ok((Vec::new(), false));
    }
    if t < cfg.window {
        let mut idx: Vec<usize> = (0..t).collect();
        idx.resize(cfg.window, t - 1);
        return Ok((vec![frames.select_frames(&idx)], true));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + cfg.window <= t {
        let idx: Vec<usize> = (start..start + cfg.window).collect();
        out.push(frames.select_frames(&idx));
        start += cfg.stride;
    }
    Ok((out, false))
}

/// Fixed-resolution window encoder producing one feature vector per window.
pub trait VideoEncoder {
    fn encode_window(&self, window: &FrameSequence) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

/// Stand-in for a pretrained video encoder: per-frame spatial pooling,
/// temporal mean over the window, then a seeded two-layer MLP. Deterministic
/// for a fixed seed; parameters are frozen after construction.
pub struct ToyVideoEncoder {
    mlp: Mlp,
    expected_h: usize,
    expected_w: usize,
}

impl ToyVideoEncoder {
    pub fn seeded(h: usize, w: usize, hidden: usize, d_enc: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::projection(crate::translate::POOLED_DIM, hidden, d_enc, &mut rng)?;
        Ok(ToyVideoEncoder {
            mlp,
            expected_h: h,
            expected_w: w,
        })
    }
}

impl VideoEncoder for ToyVideoEncoder {
    fn encode_window(&self, window: &FrameSequence) -> Result<Vec<f64>> {
        if window.height() != self.expected_h || window.width() != self.expected_w {
            return Err(PrototypeError::SpatialMismatch {
                expected_h: self.expected_h,
                expected_w: self.expected_w,
                got_h: window.height(),
                got_w: window.width(),
            });
        }
        let pooled = pool_frames(window);
        let temporal = Matrix::from_vec(1, pooled.cols(), pooled.col_mean())?;
        let out = self.mlp.eval(&temporal)?;
        Ok(out.row(0).to_vec())
    }

    fn dim(&self) -> usize {
        self.mlp.out_dim()
    }
}

/// Element-wise arithmetic mean of paired vectors.
pub fn macro_average(f_evt: &[Vec<f64>], f_rgb: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if f_evt.len() != f_rgb.len() {
        return Err(PrototypeError::Mismatch(format!(
            "{} event vs {} rgb vectors",
            f_evt.len(),
            f_rgb.len()
        )));
    }
    f_evt
        .iter()
        .zip(f_rgb)
        .map(|(e, r)| {
            if e.len() != r.len() {
                return Err(PrototypeError::Mismatch(format!(
                    "vector dims {} vs {}",
                    e.len(),
                    r.len()
                )));
            }
            Ok(e.iter().zip(r).map(|(a, b)| 0.5 * (a + b)).collect())
        })
        .collect()
}

/// Standard DBSCAN over row vectors with Euclidean distance.
///
/// Core points have at least `min_pts` neighbors within `eps` (inclusive and
/// self-counting). Clusters are density-connected components, numbered in
/// order of their lowest-index core point; border points attach to the first
/// cluster that reaches them in the ascending-index seed scan. Noise is -1.
pub fn dbscan(points: &Matrix, cfg: &DbscanConfig) -> Result<Vec<i32>> {
    let eps = match cfg.eps {
        EpsRule::Fixed(e) => e,
        EpsRule::Adaptive => adaptive_eps(points, cfg.min_pts)?,
    };
    if eps <= 0.0 || !eps.is_finite() {
        return Err(PrototypeError::DegenerateEps(eps));
    }
    let n = points.rows();
    let eps_sq = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| dist_sq(points.row(i), points.row(j)) <= eps_sq)
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= cfg.min_pts).collect();

    const UNVISITED: i32 = -2;
    const NOISE: i32 = -1;
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0;
    for seed in 0..n {
        if labels[seed] != UNVISITED {
            continue;
        }
        if !is_core[seed] {
            labels[seed] = NOISE;
            continue;
        }
        labels[seed] = cluster;
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q] == UNVISITED || labels[q] == NOISE {
                    labels[q] = cluster;
                    if is_core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        cluster += 1;
    }
    Ok(labels)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median over points of the Euclidean distance to the `min_pts`-th nearest
/// other point (the k-distance heuristic).
pub fn adaptive_eps(points: &Matrix, min_pts: usize) -> Result<f64> {
    if min_pts == 0 {
        return Err(PrototypeError::Mismatch("min_pts must be >= 1".into()));
    }
    let n = points.rows();
    if n <= min_pts {
        return Err(PrototypeError::TooFewPoints(n));
    }
    let mut kth = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist_sq(points.row(i), points.row(j)).sqrt())
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        kth.push(dists[min_pts - 1]);
    }
    kth.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(if n % 2 == 1 {
        kth[n / 2]
    } else {
        0.5 * (kth[n / 2 - 1] + kth[n / 2])
    })
}

/// Mean of each cluster's member points, ordered by cluster id. Noise points
/// are excluded; an all-noise labeling is an error telling the caller to
/// widen eps.
pub fn build_prototypes(points: &Matrix, labels: &[i32]) -> Result<PrototypeSet> {
    if labels.len() != points.rows() {
        return Err(PrototypeError::LabelCount);
    }
    let max_label = labels.iter().copied().max().unwrap_or(-1);
    if max_label < 0 {
        return Err(PrototypeError::AllNoise);
    }
    let c = (max_label + 1) as usize;
    let d = points.cols();
    let mut sums = vec![vec![0.0f64; d]; c];
    let mut sizes = vec![0usize; c];
    for (i, &label) in labels.iter().enumerate() {
        if label < 0 {
            continue;
        }
        let li = label as usize;
        sizes[li] += 1;
        for (s, &v) in sums[li].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    let mut data = Vec::with_capacity(c * d);
    for (sum, &size) in sums.iter().zip(&sizes) {
        if size == 0 {
            return Err(PrototypeError::Mismatch(format!(
                "cluster ids are not contiguous (empty cluster among 0..{c})"
            )));
        }
        data.extend(sum.iter().map(|v| v / size as f64));
    }
    Ok(PrototypeSet {
        prototypes: Matrix::from_vec(c, d, data)?,
        sizes,
    })
}

/// Clustering summary reported by the prototype builder.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ClusterReport {
    pub clusters: usize,
    pub noise: usize,
    pub eps: f64,
    pub points: usize,
}

/// Macro features for one sample: segment, crop, slide windows over both
/// modalities, encode, and average cross-modally. Returns one vector per
/// window, pooled over all merged segments.
pub fn sample_macro_features(
    sample: &AlignedSample,
    event_counts: &[usize],
    seg_cfg: &SegmentConfig,
    win_cfg: &WindowConfig,
    encoder: &dyn VideoEncoder,
) -> Result<Vec<Vec<f64>>> {
    let intensity = motion_intensity(&sample.rgb, seg_cfg)?;
    let a_rgb = rgb_proposals(&intensity, seg_cfg);
    let a_evt = event_proposals(event_counts, seg_cfg)?;
    let merged = merge_proposals(&a_rgb, &a_evt, seg_cfg)?;
    let mut features = Vec::new();
    if merged.is_empty() {
        // No informative segments; fall back to the whole sample.
        let (cropped, _) = crop_sample(sample, &[])?;
        collect_window_features(&cropped, win_cfg, encoder, &mut features)?;
        return Ok(features);
    }
    for proposal in &merged {
        let (cropped, _) = crop_sample(sample, std::slice::from_ref(proposal))?;
        collect_window_features(&cropped, win_cfg, encoder, &mut features)?;
    }
    Ok(features)
}

fn collect_window_features(
    segment: &AlignedSample,
    win_cfg: &WindowConfig,
    encoder: &dyn VideoEncoder,
    out: &mut Vec<Vec<f64>>,
) -> Result<()> {
    let (rgb_windows, _) = sliding_windows(&segment.rgb, win_cfg)?;
    let (evt_windows, _) = sliding_windows(&segment.evt, win_cfg)?;
    let rgb_feats: Vec<Vec<f64>> = rgb_windows
        .iter()
        .map(|w| encoder.encode_window(w))
        .collect::<Result<_>>()?;
    let evt_feats: Vec<Vec<f64>> = evt_windows
        .iter()
        .map(|w| encoder.encode_window(w))
        .collect::<Result<_>>()?;
    out.extend(macro_average(&evt_feats, &rgb_feats)?);
    Ok(())
}

/// Builds the prototype set for a whole dataset: de-duplicate samples by
/// exact token-sequence equality, pool window features over all samples,
/// cluster, and average per cluster.
pub fn build_prototype_set(
    samples: &[(&AlignedSample, &[usize])],
    seg_cfg: &SegmentConfig,
    win_cfg: &WindowConfig,
    db_cfg: &DbscanConfig,
    encoder: &dyn VideoEncoder,
) -> Result<(PrototypeSet, ClusterReport)> {
    let mut seen: Vec<&[u32]> = Vec::new();
    let mut pooled: Vec<Vec<f64>> = Vec::new();
    for (sample, counts) in samples {
        let ids = sample.tokens.ids();
        if seen.iter().any(|s| *s == ids) {
            continue;
        }
        seen.push(ids);
        pooled.extend(sample_macro_features(
            sample, counts, seg_cfg, win_cfg, encoder,
        )?);
    }
    if pooled.is_empty() {
        return Err(PrototypeError::Mismatch(
            "no window features produced".into(),
        ));
    }
    let d = pooled[0].len();
    let points = Matrix::from_vec(pooled.len(), d, pooled.concat())?;
    let eps = match db_cfg.eps {
        EpsRule::Fixed(e) => e,
        EpsRule::Adaptive => adaptive_eps(&points, db_cfg.min_pts)?,
    };
    if eps <= 0.0 || !eps.is_finite() {
        return Err(PrototypeError::DegenerateEps(eps));
    }
    let labels = dbscan(
        &points,
        &DbscanConfig {
            eps: EpsRule::Fixed(eps),
            min_pts: db_cfg.min_pts,
        },
    )?;
    let noise = labels.iter().filter(|&&l| l < 0).count();
    let set = build_prototypes(&points, &labels)?;
    let report = ClusterReport {
        clusters: set.count(),
        noise,
        eps,
        points: points.rows(),
    };
    Ok((set, report))
}
