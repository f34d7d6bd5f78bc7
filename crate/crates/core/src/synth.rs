//! Synthetic RGB-Event gesture generator with ground-truth segments and
//! token labels, plus dataset persistence.
//!
//! Each token renders a moving blob over its active frames; the blob jumps in
//! at the segment start (firing events in that bin), moves at least one pixel
//! per frame, and fades back to background over the following idle frames in
//! steps below both the event contrast threshold and the RGB foreground
//! threshold. Noise-free samples therefore produce events and RGB motion on
//! exactly the declared ground-truth frames.

use crate::event::{
    align, event_count_per_frame, events_to_frames, parse_event_bin, parse_event_file,
    parse_frames, write_event_bin, write_event_file, write_frames, AlignedSample, EventPoint,
    EventStream, FrameSequence,
};
use crate::translate::{TokenSequence, Vocab, RESERVED_TOKENS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Background luminance of every frame.
pub const BACKGROUND: f32 = 0.2;
/// Blob luminance while a token is active.
pub const BLOB: f32 = 0.32;
/// Fade-out levels after the last active frame; each step is below the event
/// contrast threshold and within the RGB foreground threshold of background.
pub const FADE_LEVELS: [f32; 2] = [0.28, 0.24];
/// DVS contrast threshold in normalized intensity.
pub const CONTRAST_THRESHOLD: f32 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("sample {id}: missing file {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Event(#[from] crate::event::EventError),
    #[error(transparent)]
    Translate(#[from] crate::translate::TranslateError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub width: u16,
    pub height: u16,
    pub vocab_size: usize,
    pub tokens_per_sample: usize,
    pub blob_radius: usize,
    /// Spurious events per frame per 1000 pixels.
    pub noise_rate: f64,
    pub active_frames: usize,
    pub idle_frames: usize,
    pub frame_period_us: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 32,
            height: 32,
            vocab_size: 30,
            tokens_per_sample: 3,
            blob_radius: 4,
            noise_rate: 0.0,
            active_frames: 6,
            idle_frames: 4,
            frame_period_us: 40_000,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let span_x = self.width as i64 - 2 * self.blob_radius as i64;
        let span_y = self.height as i64 - 2 * self.blob_radius as i64;
        if span_x < 2 || span_y < 2 {
            return Err(SynthError::InvalidSpec(format!(
                "blob radius {} does not fit in {}x{}",
                self.blob_radius, self.width, self.height
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS as usize {
            return Err(SynthError::InvalidSpec(format!(
                "vocab_size must exceed {RESERVED_TOKENS}"
            )));
        }
        if self.active_frames < 3 {
            return Err(SynthError::InvalidSpec(
                "active_frames must be >= 3 (run-length filter)".into(),
            ));
        }
        if self.idle_frames < 3 {
            return Err(SynthError::InvalidSpec(
                "idle_frames must be >= 3 (fade-out needs the gap)".into(),
            ));
        }
        if self.noise_rate < 0.0 || !self.noise_rate.is_finite() {
            return Err(SynthError::InvalidSpec(
                "noise_rate must be finite and >= 0".into(),
            ));
        }
        if self.frame_period_us < 2 {
            return Err(SynthError::InvalidSpec(
                "frame_period_us must be >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Total frames: a leading idle block, then per token an active block
    /// followed by an idle block.
    pub fn total_frames(&self) -> usize {
        self.idle_frames + self.tokens_per_sample * (self.active_frames + self.idle_frames)
    }

    /// Trajectory parameters for a token id.
    ///
    /// The blob ping-pongs along one axis at exactly one pixel per frame.
    /// One-pixel axis-aligned moves of an interior disk always change
    /// 2*(2r+1) pixels, so every token produces the same per-bin event count
    /// and the adaptive mean threshold separates active from idle bins for
    /// any token mix.
    pub fn trajectory(&self, token: u32) -> TrajectoryParams {
        let span_x = self.width as i64 - 2 * self.blob_radius as i64;
        let span_y = self.height as i64 - 2 * self.blob_radius as i64;
        let t = token as i64;
        let horizontal = t % 2 == 0;
        let main_span = if horizontal { span_x } else { span_y };
        let other_span = if horizontal { span_y } else { span_x };
        let phase_mod = (2 * (main_span - 1)).max(1);
        TrajectoryParams {
            horizontal,
            start_phase: (t / 2 * 5 + 3).rem_euclid(phase_mod),
            other_coord: (t * 13).rem_euclid(other_span),
        }
    }
}

/// Deterministic blob trajectory for one token: the bounce axis, the phase
/// offset along it, and the fixed coordinate on the other axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrajectoryParams {
    pub horizontal: bool,
    pub start_phase: i64,
    pub other_coord: i64,
}

/// Triangle-wave position over `[0, span-1]` for phase `ph`.
fn ping_pong(ph: i64, span: i64) -> i64 {
    if span <= 1 {
        return 0;
    }
    let m = 2 * (span - 1);
    let ph = ph.rem_euclid(m);
    ph.min(m - ph)
}

impl TrajectoryParams {
    /// Blob center at step `t` of the active interval, within
    /// `[radius, extent-1-radius]` on each axis.
    fn position(&self, t: usize, spec: &SynthSpec) -> (usize, usize) {
        let span_x = spec.width as i64 - 2 * spec.blob_radius as i64;
        let span_y = spec.height as i64 - 2 * spec.blob_radius as i64;
        let rad = spec.blob_radius as i64;
        let (x, y) = if self.horizontal {
            (
                ping_pong(self.start_phase + t as i64, span_x),
                self.other_coord,
            )
        } else {
            (
                self.other_coord,
                ping_pong(self.start_phase + t as i64, span_y),
            )
        };
        ((x + rad) as usize, (y + rad) as usize)
    }
}

/// One generated sample: the aligned frame stacks, the raw event stream, the
/// per-frame event counts, and the ground-truth active intervals per token.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub aligned: AlignedSample,
    pub events: EventStream,
    pub event_counts: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
}

struct Canvas {
    w: usize,
    h: usize,
    /// Luminance per pixel; frames replicate it across the 3 channels.
    pixels: Vec<f32>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            pixels: vec![BACKGROUND; w * h],
        }
    }

    fn clear(&mut self) {
        self.pixels.iter_mut().for_each(|p| *p = BACKGROUND);
    }

    fn draw_disk(&mut self, cx: usize, cy: usize, radius: usize, value: f32) {
        let r2 = (radius * radius) as i64;
        for y in cy.saturating_sub(radius)..=(cy + radius).min(self.h - 1) {
            for x in cx.saturating_sub(radius)..=(cx + radius).min(self.w - 1) {
                let dx = x as i64 - cx as i64;
                let dy = y as i64 - cy as i64;
                if dx * dx + dy * dy <= r2 {
                    self.pixels[y * self.w + x] = value;
                }
            }
        }
    }
}

/// Generates one sample. Deterministic for a fixed spec and seed.
pub fn gen_sample(spec: &SynthSpec, seed: u64) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as usize, spec.height as usize);
    let t_total = spec.total_frames();
    let period = spec.frame_period_us;

    // Token sequence.
    let token_ids: Vec<u32> = (0..spec.tokens_per_sample)
        .map(|_| rng.gen_range(RESERVED_TOKENS..spec.vocab_size as u32))
        .collect();
    let tokens = TokenSequence::new(token_ids.clone(), spec.vocab_size)?;

    // Render luminance frames.
    let mut canvas = Canvas::new(w, h);
    let mut frames: Vec<Vec<f32>> = Vec::with_capacity(t_total);
    let mut segments = Vec::with_capacity(token_ids.len());
    let mut pending_fade: Option<(usize, usize, usize)> = None; // (cx, cy, fades used)

    for frame_idx in 0..t_total {
        canvas.clear();
        // Fade residue from a finished token.
        if let Some((cx, cy, used)) = pending_fade {
            if used < FADE_LEVELS.len() {
                canvas.draw_disk(cx, cy, spec.blob_radius, FADE_LEVELS[used]);
                pending_fade = Some((cx, cy, used + 1));
            } else {
                pending_fade = None;
            }
        }
        // Active token?
        let token_slot = frame_idx.checked_sub(spec.idle_frames).map(|offset| {
            (
                offset / (spec.active_frames + spec.idle_frames),
                offset % (spec.active_frames + spec.idle_frames),
            )
        });
        if let Some((slot, within)) = token_slot {
            if slot < token_ids.len() && within < spec.active_frames {
                let params = spec.trajectory(token_ids[slot]);
                let (cx, cy) = params.position(within, spec);
                canvas.draw_disk(cx, cy, spec.blob_radius, BLOB);
                if within == 0 {
                    segments.push((frame_idx, frame_idx + spec.active_frames - 1));
                }
                if within == spec.active_frames - 1 {
                    pending_fade = Some((cx, cy, 0));
                }
            }
        }
        frames.push(canvas.pixels.clone());
    }

    // Sensor model: an event wherever the per-pixel change exceeds the
    // contrast threshold, timestamped at the frame midpoint plus uniform
    // jitter within the frame interval.
    let mut events: Vec<EventPoint> = Vec::new();
    for t in 1..t_total {
        for y in 0..h {
            for x in 0..w {
                let delta = frames[t][y * w + x] - frames[t - 1][y * w + x];
                if delta.abs() > CONTRAST_THRESHOLD {
                    let jitter = rng.gen_range(0..period);
                    events.push(EventPoint {
                        x: x as u16,
                        y: y as u16,
                        t: t as u64 * period + jitter,
                        p: if delta > 0.0 { 1 } else { -1 },
                    });
                }
            }
        }
    }
    // Spurious events, uniformly over space and bins.
    let expected = spec.noise_rate * (w * h) as f64 / 1000.0;
    for t in 0..t_total {
        let mut count = expected.floor() as usize;
        if rng.gen_bool((expected - expected.floor()).clamp(0.0, 1.0)) {
            count += 1;
        }
        for _ in 0..count {
            events.push(EventPoint {
                x: rng.gen_range(0..spec.width),
                y: rng.gen_range(0..spec.height),
                t: t as u64 * period + rng.gen_range(0..period),
                p: if rng.gen_bool(0.5) { 1 } else { -1 },
            });
        }
    }
    let stream = EventStream::new(spec.width, spec.height, events)?;

    // Frame stacks and alignment.
    let edges: Vec<u64> = (0..=t_total).map(|i| i as u64 * period).collect();
    let mut rgb_data = Vec::with_capacity(t_total * h * w * 3);
    for frame in &frames {
        for &v in frame {
            rgb_data.extend_from_slice(&[v, v, v]);
        }
    }
    let rgb = FrameSequence::new(t_total, h, w, rgb_data)?.with_frame_times(edges.clone())?;
    let evt = events_to_frames(&stream, &edges)?;
    let event_counts = event_count_per_frame(&stream, &edges)?;
    let aligned = align(rgb, evt, tokens, format!("synth-{seed}"))?;
    Ok(SynthSample {
        aligned,
        events: stream,
        event_counts,
        segments,
    })
}

/// Generates `n` samples with per-sample seeds derived from `seed`.
pub fn gen_dataset(spec: &SynthSpec, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    let mut seed_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sample_seed: u64 = seed_rng.gen();
        let mut s = gen_sample(spec, sample_seed)?;
        s.aligned.meta = format!("sample{i:03}");
        out.push(s);
    }
    Ok(out)
}

/// Per-sample manifest entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub tokens: Vec<String>,
    pub segments: Vec<(usize, usize)>,
}

/// Dataset manifest: shared geometry plus one entry per sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: (u16, u16),
    pub frame_period_us: u64,
    pub vocab_size: usize,
    pub samples: Vec<ManifestSample>,
}

/// Writes samples under `dir`: one subdirectory per sample with `rgb.frm`
/// and `events.evt` (or `events.evb` when `binary_events`), plus
/// `manifest.json`.
pub fn save_dataset(
    dir: &Path,
    samples: &[SynthSample],
    spec: &SynthSpec,
    binary_events: bool,
) -> Result<Manifest> {
    let vocab = Vocab::synthetic(spec.vocab_size);
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for sample in samples {
        let id = sample.aligned.meta.clone();
        let sample_dir = dir.join(&id);
        std::fs::create_dir_all(&sample_dir)?;
        std::fs::write(
            sample_dir.join("rgb.frm"),
            write_frames(&sample.aligned.rgb),
        )?;
        if binary_events {
            std::fs::write(
                sample_dir.join("events.evb"),
                write_event_bin(&sample.events),
            )?;
        } else {
            std::fs::write(
                sample_dir.join("events.evt"),
                write_event_file(&sample.events),
            )?;
        }
        entries.push(ManifestSample {
            id,
            tokens: vocab.decode(sample.aligned.tokens.ids()),
            segments: sample.segments.clone(),
        });
    }
    let manifest = Manifest {
        resolution: (spec.width, spec.height),
        frame_period_us: spec.frame_period_us,
        vocab_size: spec.vocab_size,
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`save_dataset`]. Event frames and
/// per-frame counts are rebuilt from the event file using bin edges derived
/// from the manifest's frame period (the RGB frame timestamps).
pub fn load_dataset(dir: &Path) -> Result<(Vec<SynthSample>, Manifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let vocab = Vocab::synthetic(manifest.vocab_size);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let sample_dir = dir.join(&entry.id);
        let rgb_path = sample_dir.join("rgb.frm");
        if !rgb_path.exists() {
            return Err(SynthError::MissingFile {
                id: entry.id.clone(),
                path: rgb_path,
            });
        }
        let rgb = parse_frames(&std::fs::read(&rgb_path)?)?;
        let txt_path = sample_dir.join("events.evt");
        let bin_path = sample_dir.join("events.evb");
        let events = if txt_path.exists() {
            parse_event_file(&std::fs::read(&txt_path)?)?
        } else if bin_path.exists() {
            parse_event_bin(&std::fs::read(&bin_path)?)?
        } else {
            return Err(SynthError::MissingFile {
                id: entry.id.clone(),
                path: txt_path,
            });
        };
        let edges: Vec<u64> = (0..=rgb.len())
            .map(|i| i as u64 * manifest.frame_period_us)
            .collect();
        let rgb = rgb.with_frame_times(edges.clone())?;
        let evt = events_to_frames(&events, &edges)?;
        let event_counts = event_count_per_frame(&events, &edges)?;
        let ids: Vec<u32> = entry
            .tokens
            .iter()
            .map(|w| {
                vocab.id(w).ok_or_else(|| {
                    SynthError::Manifest(format!("token {w:?} not in the synthetic vocabulary"))
                })
            })
            .collect::<Result<_>>()?;
        let tokens = TokenSequence::new(ids, manifest.vocab_size)?;
        let aligned = align(rgb, evt, tokens, entry.id.clone())?;
        samples.push(SynthSample {
            aligned,
            events,
            event_counts,
            segments: entry.segments.clone(),
        });
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{
        event_proposals, merge_proposals, motion_intensity, rgb_proposals, temporal_iou,
        SegmentConfig,
    };

    fn spec() -> SynthSpec {
        SynthSpec::default()
    }

    #[test]
    fn noise_free_events_stay_within_token_intervals() {
        let s = SynthSpec {
            tokens_per_sample: 1,
            ..spec()
        };
        let sample = gen_sample(&s, 5).unwrap();
        assert_eq!(sample.segments.len(), 1);
        let (start, end) = sample.segments[0];
        for e in sample.events.events() {
            let bin = (e.t / s.frame_period_us) as usize;
            assert!(
                bin >= start && bin <= end,
                "event in bin {bin}, interval ({start}, {end})"
            );
        }
        // Every active bin fires.
        for bin in start..=end {
            assert!(sample.event_counts[bin] > 0, "silent active bin {bin}");
        }
    }

    #[test]
    fn zero_tokens_give_static_frames_and_no_events() {
        let s = SynthSpec {
            tokens_per_sample: 0,
            ..spec()
        };
        let sample = gen_sample(&s, 9).unwrap();
        assert!(sample.events.is_empty());
        assert!(sample.segments.is_empty());
        assert_eq!(sample.aligned.rgb.len(), s.idle_frames);
        assert!(sample.aligned.rgb.data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn same_seed_reproduces_bit_identical_samples() {
        let a = gen_sample(&spec(), 123).unwrap();
        let b = gen_sample(&spec(), 123).unwrap();
        assert_eq!(a.aligned.rgb.data(), b.aligned.rgb.data());
        assert_eq!(a.events, b.events);
        assert_eq!(a.segments, b.segments);
        assert_eq!(a.aligned.tokens, b.aligned.tokens);
    }

    #[test]
    fn distinct_token_ids_have_distinct_trajectories() {
        let s = SynthSpec {
            vocab_size: 68, // 64 content ids, the injectivity horizon
            ..spec()
        };
        let mut seen = std::collections::HashSet::new();
        for id in RESERVED_TOKENS..s.vocab_size as u32 {
            let params = s.trajectory(id);
            assert!(seen.insert(params), "duplicate trajectory for token {id}");
        }
    }

    #[test]
    fn dataset_samples_have_derived_seeds_and_distinct_tokens() {
        let samples = gen_dataset(&spec(), 60, 10).unwrap();
        assert_eq!(samples.len(), 60);
        let distinct: std::collections::HashSet<Vec<u32>> = samples
            .iter()
            .map(|s| s.aligned.tokens.ids().to_vec())
            .collect();
        // 26^3 possible sequences; 60 draws should rarely collide, and the
        // fixed seed makes this deterministic.
        assert!(distinct.len() >= 55, "{} distinct", distinct.len());
        // All samples pass alignment by construction.
        for s in &samples {
            assert_eq!(s.aligned.rgb.len(), s.aligned.evt.len());
        }
    }

    #[test]
    fn ground_truth_recovered_exactly_without_noise() {
        let cfg = SegmentConfig::default();
        for seed in [1u64, 2, 3, 4, 5] {
            let sample = gen_sample(&spec(), seed).unwrap();
            let intensity = motion_intensity(&sample.aligned.rgb, &cfg).unwrap();
            let a_rgb = rgb_proposals(&intensity, &cfg);
            let a_evt = event_proposals(&sample.event_counts, &cfg).unwrap();
            let got_rgb: Vec<(usize, usize)> = a_rgb.iter().map(|p| (p.start, p.end)).collect();
            let got_evt: Vec<(usize, usize)> = a_evt.iter().map(|p| (p.start, p.end)).collect();
            assert_eq!(got_rgb, sample.segments, "rgb branch, seed {seed}");
            assert_eq!(got_evt, sample.segments, "event branch, seed {seed}");
            let merged = merge_proposals(&a_rgb, &a_evt, &cfg).unwrap();
            let got: Vec<(usize, usize)> = merged.iter().map(|p| (p.start, p.end)).collect();
            assert_eq!(temporal_iou(&got, &sample.segments), 1.0);
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let samples = gen_dataset(&s, 3, 77).unwrap();
        save_dataset(dir.path(), &samples, &s, false).unwrap();
        let (loaded, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.aligned.rgb.data(), back.aligned.rgb.data());
            assert_eq!(orig.events, back.events);
            assert_eq!(orig.event_counts, back.event_counts);
            assert_eq!(orig.segments, back.segments);
            assert_eq!(orig.aligned.tokens, back.aligned.tokens);
            // Event frames rebuilt from the stream match the originals.
            assert_eq!(orig.aligned.evt.data(), back.aligned.evt.data());
        }
    }

    #[test]
    fn binary_event_files_round_trip_too() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let samples = gen_dataset(&s, 2, 78).unwrap();
        save_dataset(dir.path(), &samples, &s, true).unwrap();
        let (loaded, _) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded[0].events, samples[0].events);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(gen_sample(
            &SynthSpec {
                blob_radius: 20,
                ..spec()
            },
            1
        )
        .is_err());
        assert!(gen_sample(
            &SynthSpec {
                active_frames: 1,
                ..spec()
            },
            1
        )
        .is_err());
        assert!(gen_sample(
            &SynthSpec {
                vocab_size: 3,
                ..spec()
            },
            1
        )
        .is_err());
    }
}
