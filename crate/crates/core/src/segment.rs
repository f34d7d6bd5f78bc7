//! Informative video frame selection: RGB motion-intensity proposals,
//! adaptive event-count proposals, and event-anchored merging.

use crate::event::{AlignedSample, FrameSequence};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("empty event-count sequence")]
    EmptyCounts,
    #[error("proposals within one list must be sorted and non-overlapping")]
    OverlappingProposals,
    #[error("proposal ({0}, {1}) out of range for {2} frames")]
    ProposalOutOfRange(usize, usize, usize),
    #[error(transparent)]
    Event(#[from] crate::event::EventError),
}

pub type Result<T> = std::result::Result<T, SegmentError>;

/// Thresholds for proposal generation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// RGB motion threshold in foreground-pixel count; `None` selects the
    /// adaptive rule (mean of the intensity sequence).
    pub theta_r: Option<f64>,
    /// Minimum run length in frames.
    pub alpha_min: usize,
    /// Per-pixel foreground threshold in intensity units.
    pub pixel_thresh: f64,
    /// Maximum gap in frames merged between adjacent surviving segments.
    pub gap_merge: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            theta_r: None,
            alpha_min: 3,
            pixel_thresh: 0.1,
            gap_merge: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalSource {
    Rgb,
    Event,
    Merged,
}

/// Inclusive frame interval hypothesized to contain signing activity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
    pub source: ProposalSource,
}

impl Proposal {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn intersects(&self, other: &Proposal) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Per-frame motion intensity by background subtraction.
///
/// The background is the per-pixel temporal median of the luminance (channel
/// mean); `r_t` counts pixels whose absolute deviation from it exceeds
/// `pixel_thresh`.
pub fn motion_intensity(rgb: &FrameSequence, cfg: &SegmentConfig) -> Result<Vec<usize>> {
    let t_len = rgb.len();
    if t_len == 0 {
        return Err(SegmentError::EmptySequence);
    }
    let (h, w) = (rgb.height(), rgb.width());
    let mut luminance = vec![0.0f64; t_len * h * w];
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                let l = (rgb.at(t, y, x, 0) as f64
                    + rgb.at(t, y, x, 1) as f64
                    + rgb.at(t, y, x, 2) as f64)
                    / 3.0;
                luminance[(t * h + y) * w + x] = l;
            }
        }
    }
    let mut background = vec![0.0f64; h * w];
    let mut column = vec![0.0f64; t_len];
    for p in 0..h * w {
        for t in 0..t_len {
            column[t] = luminance[t * h * w + p];
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        background[p] = if t_len % 2 == 1 {
            column[t_len / 2]
        } else {
            0.5 * (column[t_len / 2 - 1] + column[t_len / 2])
        };
    }
    let mut intensity = vec![0usize; t_len];
    for t in 0..t_len {
        let mut count = 0;
        for p in 0..h * w {
            if (luminance[t * h * w + p] - background[p]).abs() > cfg.pixel_thresh {
                count += 1;
            }
        }
        intensity[t] = count;
    }
    Ok(intensity)
}

/// Adaptive RGB threshold: arithmetic mean of the intensity sequence.
pub fn auto_theta_r(intensity: &[usize]) -> f64 {
    if intensity.is_empty() {
        return 0.0;
    }
    intensity.iter().sum::<usize>() as f64 / intensity.len() as f64
}

/// Maximal runs with `r_t > theta_r` lasting at least `alpha_min` frames.
pub fn rgb_proposals(intensity: &[usize], cfg: &SegmentConfig) -> Vec<Proposal> {
    let theta = cfg.theta_r.unwrap_or_else(|| auto_theta_r(intensity));
    threshold_runs(
        intensity.iter().map(|&v| v as f64),
        theta,
        cfg.alpha_min,
        ProposalSource::Rgb,
    )
}

/// Adaptive event threshold: arithmetic mean of the per-frame event counts.
pub fn adaptive_event_threshold(counts: &[usize]) -> Result<f64> {
    if counts.is_empty() {
        return Err(SegmentError::EmptyCounts);
    }
    Ok(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// Maximal runs with `e_t > theta_e` lasting at least `alpha_min` frames,
/// where `theta_e` is the adaptive mean of the same sequence.
pub fn event_proposals(counts: &[usize], cfg: &SegmentConfig) -> Result<Vec<Proposal>> {
    let theta = adaptive_event_threshold(counts)?;
    Ok(threshold_runs(
        counts.iter().map(|&v| v as f64),
        theta,
        cfg.alpha_min,
        ProposalSource::Event,
    ))
}

fn threshold_runs(
    values: impl Iterator<Item = f64>,
    theta: f64,
    alpha_min: usize,
    source: ProposalSource,
) -> Vec<Proposal> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut idx = 0;
    for v in values {
        if v > theta {
            run_start.get_or_insert(idx);
        } else if let Some(start) = run_start.take() {
            if idx - start >= alpha_min {
                out.push(Proposal {
                    start,
                    end: idx - 1,
                    source,
                });
            }
        }
        idx += 1;
    }
    if let Some(start) = run_start {
        if idx - start >= alpha_min {
            out.push(Proposal {
                start,
                end: idx - 1,
                source,
            });
        }
    }
    out
}

fn check_sorted_disjoint(list: &[Proposal]) -> Result<()> {
    for pair in list.windows(2) {
        if pair[1].start <= pair[0].end {
            return Err(SegmentError::OverlappingProposals);
        }
    }
    if list.iter().any(|p| p.start > p.end) {
        return Err(SegmentError::OverlappingProposals);
    }
    Ok(())
}

/// Unifies RGB and event proposals, with event boundaries authoritative.
///
/// - Event proposals are kept iff they intersect at least one RGB proposal;
///   with no RGB proposals at all, every event proposal is kept.
/// - With no event proposals, the RGB list is returned unchanged.
/// - Surviving segments separated by at most `gap_merge` frames are merged.
pub fn merge_proposals(
    a_rgb: &[Proposal],
    a_evt: &[Proposal],
    cfg: &SegmentConfig,
) -> Result<Vec<Proposal>> {
    check_sorted_disjoint(a_rgb)?;
    check_sorted_disjoint(a_evt)?;
    if a_evt.is_empty() {
        return Ok(a_rgb.to_vec());
    }
    let survivors: Vec<&Proposal> = a_evt
        .iter()
        .filter(|e| a_rgb.is_empty() || a_rgb.iter().any(|r| e.intersects(r)))
        .collect();
    let mut merged: Vec<Proposal> = Vec::new();
    for seg in survivors {
        match merged.last_mut() {
            Some(last) if seg.start.saturating_sub(last.end) <= cfg.gap_merge + 1 => {
                last.end = seg.end;
            }
            _ => merged.push(Proposal {
                start: seg.start,
                end: seg.end,
                source: ProposalSource::Merged,
            }),
        }
    }
    Ok(merged)
}

/// Restricts both modalities to the union of the proposal intervals,
/// concatenated in time order. Token labels are unchanged. An empty proposal
/// list falls back to the full sample; the returned flag reports the
/// fallback.
pub fn crop_sample(
    sample: &AlignedSample,
    proposals: &[Proposal],
) -> Result<(AlignedSample, bool)> {
    let t_len = sample.rgb.len();
    if proposals.is_empty() {
        return Ok((sample.clone(), true));
    }
    for p in proposals {
        if p.start > p.end || p.end >= t_len {
            return Err(SegmentError::ProposalOutOfRange(p.start, p.end, t_len));
        }
    }
    let mut keep: Vec<usize> = Vec::new();
    let mut mask = vec![false; t_len];
    for p in proposals {
        for t in p.start..=p.end {
            mask[t] = true;
        }
    }
    for (t, &m) in mask.iter().enumerate() {
        if m {
            keep.push(t);
        }
    }
    let cropped = AlignedSample {
        rgb: sample.rgb.select_frames(&keep),
        evt: sample.evt.select_frames(&keep),
        tokens: sample.tokens.clone(),
        meta: sample.meta.clone(),
    };
    Ok((cropped, false))
}

/// Frame-set intersection-over-union between two interval lists.
pub fn temporal_iou(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let to_set = |list: &[(usize, usize)]| {
        let mut set = std::collections::BTreeSet::new();
        for &(s, e) in list {
            set.extend(s..=e);
        }
        set
    };
    let sa = to_set(a);
    let sb = to_set(b);
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}
