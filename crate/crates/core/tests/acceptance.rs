//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `cargo test --test acceptance -- --nocapture` to see them).

use m2slt_core::event::{
    parse_event_bin, parse_event_file, parse_frames, write_event_bin, write_event_file,
    write_frames, EventPoint, EventStream, FrameSequence,
};
use m2slt_core::hopfield::hopfield_retrieve;
use m2slt_core::metrics;
use m2slt_core::numkit::{check_gradients, load_checkpoint, save_checkpoint, Matrix};
use m2slt_core::prototype::{
    build_prototype_set, dbscan, DbscanConfig, EpsRule, PrototypeSet, ToyVideoEncoder, WindowConfig,
};
use m2slt_core::segment::{
    event_proposals, merge_proposals, motion_intensity, rgb_proposals, temporal_iou, SegmentConfig,
};
use m2slt_core::synth::{gen_dataset, gen_sample, SynthSpec};
use m2slt_core::translate::{train, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Micro configuration for the end-to-end gradient check:
/// D=8, L=4 frames, |V|=7, 3 memory slots, 2 prototypes.
fn micro_cfg() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        frame_interval: 1,
        max_frames: 4,
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

#[test]
fn acceptance_01_gradient_integrity() {
    let started = Instant::now();
    let cfg = micro_cfg();
    let vocab = 7;
    let mut model = Model::new(&cfg, vocab, 41).unwrap();
    // Exercise every residual path.
    model.mir.alpha = 0.3;
    model.mar.beta = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    // The check needs a generic differentiable point. At the pristine
    // zero-bias init, all-zero event frames sit exactly on relu kinks and
    // produce all-tie memory rankings, where central differences cannot
    // match a subgradient. Nudging the biases and adding sensor noise moves
    // the evaluation off those measure-zero boundaries.
    for name in model.param_names() {
        if name.ends_with(".b") {
            for v in model.param_mut(&name).unwrap() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
    }
    let protos = PrototypeSet {
        prototypes: Matrix::uniform(2, cfg.proto_dim, 1.0, &mut rng),
        sizes: vec![1, 1],
    };
    let spec = SynthSpec {
        width: 16,
        height: 16,
        vocab_size: vocab,
        tokens_per_sample: 1,
        blob_radius: 3,
        active_frames: 3,
        idle_frames: 3,
        noise_rate: 20.0,
        ..SynthSpec::default()
    };
    let sample = gen_sample(&spec, 43).unwrap().aligned;

    let (_, _, trace) = model.forward_loss(&sample, Some(&protos)).unwrap();
    let grads = model.backward(&trace, Some(&protos)).unwrap();
    let analytic = grads.entries();
    let names = model.param_names();
    assert_eq!(
        analytic.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        names
    );

    let report = check_gradients(
        &analytic,
        |ti, ei, delta| {
            model.param_mut(&names[ti]).unwrap()[ei] += delta;
            let (loss, _, _) = model.forward_loss(&sample, Some(&protos)).unwrap();
            model.param_mut(&names[ti]).unwrap()[ei] -= delta;
            loss
        },
        1e-4,
        1e-4,
    );
    let elapsed = started.elapsed();
    assert!(report.ok(), "{report:?}");
    assert!(
        elapsed.as_secs() < 60,
        "gradient suite took {elapsed:?}, budget is 60 s"
    );
    println!(
        "criterion 1 (gradient integrity, {} params, max rel err {:.2e}, {:.1?}): PASS",
        report.checked, report.max_rel_err, elapsed
    );
}

/// Independent O(N^2) DBSCAN reference: brute-force core flags, union-find
/// over core-core edges, clusters numbered by ascending minimal core index,
/// border points joining the earliest-formed cluster with a core within eps.
fn dbscan_reference(points: &Matrix, eps: f64, min_pts: usize) -> Vec<i32> {
    let n = points.rows();
    let eps_sq = eps * eps;
    let d2 = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| d2(i, j) <= eps_sq).count() >= min_pts)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let p = parent[i];
            let root = find(parent, p);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for j in i + 1..n {
            if core[j] && d2(i, j) <= eps_sq {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut labels = vec![-1i32; n];
    let mut next = 0i32;
    let mut root_label = std::collections::HashMap::new();
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let l = *root_label.entry(r).or_insert_with(|| {
                let l = next;
                next += 1;
                l
            });
            labels[i] = l;
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<i32> = None;
        for j in 0..n {
            if core[j] && d2(i, j) <= eps_sq {
                best = Some(best.map_or(labels[j], |b: i32| b.min(labels[j])));
            }
        }
        if let Some(l) = best {
            labels[i] = l;
        }
    }
    labels
}

/// Partition equality up to cluster renumbering (noise must match exactly).
fn same_partition(a: &[i32], b: &[i32]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = std::collections::HashMap::new();
    let mut bwd = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x < 0) != (y < 0) {
            return false;
        }
        if x < 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

#[test]
fn acceptance_02_dbscan_oracle_equivalence() {
    let settings = [(0.4f64, 4usize), (0.8, 3), (1.5, 6)];
    let mut clouds_with_clusters = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let points = Matrix::uniform(200, 3, 2.0, &mut rng);
        for &(eps, min_pts) in &settings {
            let got = dbscan(
                &points,
                &DbscanConfig {
                    eps: EpsRule::Fixed(eps),
                    min_pts,
                },
            )
            .unwrap();
            let want = dbscan_reference(&points, eps, min_pts);
            assert!(
                same_partition(&got, &want),
                "partition mismatch at seed {seed}, eps {eps}, min_pts {min_pts}"
            );
            if got.iter().any(|&l| l >= 0) {
                clouds_with_clusters += 1;
            }
        }
    }
    // The sweep must actually exercise non-trivial clusterings.
    assert!(clouds_with_clusters > 100);
    println!("criterion 2 (DBSCAN oracle equivalence, 100 clouds x 3 settings): PASS");
}

/// Ten orthonormal patterns via Gram-Schmidt over seeded Gaussian-ish draws.
fn orthonormal_prototypes(count: usize, dim: usize, seed: u64) -> PrototypeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }
    PrototypeSet {
        prototypes: Matrix::from_rows(&basis).unwrap(),
        sizes: vec![1; count],
    }
}

#[test]
fn acceptance_03_hopfield_retrieval() {
    let dim = 16;
    let patterns = orthonormal_prototypes(10, dim, 7);
    // Pairwise cosine < 0.1 precondition.
    for i in 0..10 {
        for j in 0..i {
            let dot: f64 = patterns
                .prototypes
                .row(i)
                .iter()
                .zip(patterns.prototypes.row(j))
                .map(|(a, b)| a * b)
                .sum();
            assert!(dot.abs() < 0.1, "patterns {i},{j} cosine {dot}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut hits = 0;
    for trial in 0..100 {
        let target = trial % 10;
        // Gaussian noise via Box-Muller, sigma = 0.05.
        let noisy: Vec<f64> = patterns
            .prototypes
            .row(target)
            .iter()
            .map(|&v| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                v + 0.05 * g
            })
            .collect();
        let query = Matrix::from_vec(1, dim, noisy).unwrap();
        let out = hopfield_retrieve(&query, &patterns, 8.0, 1).unwrap();
        let dot: f64 = out
            .row(0)
            .iter()
            .zip(patterns.prototypes.row(target))
            .map(|(a, b)| a * b)
            .sum();
        let norm: f64 = out.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        if dot / norm >= 0.99 {
            hits += 1;
        }
    }
    assert!(hits >= 99, "only {hits}/100 retrievals reached cosine 0.99");

    // beta_h -> 0 limit reproduces the prototype mean.
    let query = Matrix::uniform(1, dim, 1.0, &mut rng);
    let out = hopfield_retrieve(&query, &patterns, 1e-6, 1).unwrap();
    let mean = patterns.prototypes.col_mean();
    for j in 0..dim {
        assert!(
            (out.at(0, j) - mean[j]).abs() < 1e-4,
            "dim {j}: {} vs {}",
            out.at(0, j),
            mean[j]
        );
    }
    println!("criterion 3 (Hopfield retrieval, {hits}/100 trials): PASS");
}

fn merged_spans(
    sample: &m2slt_core::synth::SynthSample,
    cfg: &SegmentConfig,
) -> Vec<(usize, usize)> {
    let intensity = motion_intensity(&sample.aligned.rgb, cfg).unwrap();
    let a_rgb = rgb_proposals(&intensity, cfg);
    let a_evt = event_proposals(&sample.event_counts, cfg).unwrap();
    merge_proposals(&a_rgb, &a_evt, cfg)
        .unwrap()
        .iter()
        .map(|p| (p.start, p.end))
        .collect()
}

#[test]
fn acceptance_04_segmentation_fidelity() {
    let seg_cfg = SegmentConfig::default();
    // Noise-free: exact recovery on all 50 samples.
    let clean = gen_dataset(&SynthSpec::default(), 50, 2001).unwrap();
    for sample in &clean {
        let got = merged_spans(sample, &seg_cfg);
        assert_eq!(
            temporal_iou(&got, &sample.segments),
            1.0,
            "sample {}: {:?} vs {:?}",
            sample.aligned.meta,
            got,
            sample.segments
        );
    }
    // Noisy: mean IoU at least 0.8.
    let noisy_spec = SynthSpec {
        noise_rate: 2.0,
        ..SynthSpec::default()
    };
    let noisy = gen_dataset(&noisy_spec, 50, 2002).unwrap();
    let mean_iou: f64 = noisy
        .iter()
        .map(|s| temporal_iou(&merged_spans(s, &seg_cfg), &s.segments))
        .sum::<f64>()
        / noisy.len() as f64;
    assert!(mean_iou >= 0.8, "mean IoU {mean_iou}");
    println!(
        "criterion 4 (segmentation fidelity, clean IoU 1.0, noisy mean IoU {mean_iou:.3}): PASS"
    );
}

#[test]
fn acceptance_05_metric_correctness() {
    let (cands, refs): (Vec<_>, Vec<_>) = metrics::fixture::pairs().into_iter().unzip();
    let bleu = metrics::bleu(&cands, &refs).unwrap();
    for (k, (got, want)) in bleu.iter().zip(metrics::fixture::CORPUS_BLEU).enumerate() {
        assert!(
            (got - want).abs() <= 1e-9,
            "BLEU-{}: {got} vs oracle {want}",
            k + 1
        );
    }
    let rouge = metrics::rouge_l_corpus(&cands, &refs).unwrap();
    assert!((rouge - metrics::fixture::CORPUS_ROUGE_L).abs() <= 1e-9);
    // Spot checks the fixture must contain: perfect match scores 1.0,
    // disjoint scores 0.0, and the partial-overlap hand cases.
    assert_eq!(
        metrics::bleu(&[cands[0].clone()], &[refs[0].clone()]).unwrap(),
        [1.0; 4]
    );
    assert_eq!(metrics::rouge_l(&cands[1], &refs[1]).unwrap(), 0.0);
    let partial = metrics::bleu(&[cands[2].clone()], &[refs[2].clone()]).unwrap();
    assert!((partial[1] - (0.375f64).sqrt()).abs() <= 1e-9);
    assert!((metrics::rouge_l(&cands[3], &refs[3]).unwrap() - 0.75).abs() <= 1e-9);
    println!("criterion 5 (metric correctness vs hand oracle): PASS");
}

#[test]
fn acceptance_06_end_to_end_memorization() {
    let started = Instant::now();
    let spec = SynthSpec {
        vocab_size: 30,
        tokens_per_sample: 3,
        ..SynthSpec::default()
    };
    let samples = gen_dataset(&spec, 20, 2024).unwrap();
    // The mean-pooled decoder context is order-invariant, so memorization is
    // well-posed only when the token multisets are pairwise distinct; the
    // fixed seed guarantees it and this guards the precondition.
    let mut multisets: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| {
            let mut v = s.aligned.tokens.ids().to_vec();
            v.sort_unstable();
            v
        })
        .collect();
    multisets.sort();
    multisets.dedup();
    assert_eq!(multisets.len(), 20, "token multisets must be distinct");

    let cfg = ModelConfig {
        feature_dim: 32,
        enc_hidden: 32,
        n_slots: 16,
        d_mem: 16,
        proj_hidden: 16,
        proto_dim: 8,
        decoder_hidden: 128,
        embed_dim: 16,
        ..ModelConfig::default()
    };
    let encoder = ToyVideoEncoder::seeded(32, 32, 16, cfg.proto_dim, 2024).unwrap();
    let pairs: Vec<_> = samples
        .iter()
        .map(|s| (&s.aligned, s.event_counts.as_slice()))
        .collect();
    let (protos, _) = build_prototype_set(
        &pairs,
        &SegmentConfig::default(),
        &WindowConfig::default(),
        &DbscanConfig::default(),
        &encoder,
    )
    .unwrap();
    let dataset: Vec<_> = samples.iter().map(|s| s.aligned.clone()).collect();
    // SGD analogues: lr0 0.01, cosine annealing, 200 epochs.
    let (model, log) = train(&dataset, Some(&protos), &cfg, 30, 0.01, 0.0, 200, 2024).unwrap();
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for s in &dataset {
        let hyp = model.predict(s, Some(&protos), 16).unwrap();
        cands.push(hyp.ids().to_vec());
        refs.push(s.tokens.ids().to_vec());
    }
    let bleu4 = metrics::bleu(&cands, &refs).unwrap()[3];
    let rouge = metrics::rouge_l_corpus(&cands, &refs).unwrap();
    let elapsed = started.elapsed();
    assert!(bleu4 >= 0.90, "training-set BLEU-4 {bleu4}");
    assert!(rouge >= 0.90, "training-set ROUGE-L {rouge}");
    assert!(
        elapsed.as_secs() < 600,
        "memorization run took {elapsed:?}, budget is 10 min"
    );
    println!(
        "criterion 6 (memorization, BLEU-4 {bleu4:.3}, ROUGE-L {rouge:.3}, final loss {:.4}, {:.1?}): PASS",
        log.last().unwrap().mean_loss,
        elapsed
    );
}

fn ablation_run(seed: u64, full: bool) -> f64 {
    let spec = SynthSpec {
        vocab_size: 24,
        tokens_per_sample: 1,
        ..SynthSpec::default()
    };
    let samples = gen_dataset(&spec, 50, seed).unwrap();
    let (train_split, held_out) = samples.split_at(40);
    let cfg = ModelConfig {
        feature_dim: 32,
        enc_hidden: 32,
        n_slots: 16,
        d_mem: 16,
        proj_hidden: 16,
        proto_dim: 8,
        decoder_hidden: 128,
        embed_dim: 16,
        mir_micro: full,
        mir_recurrent: full,
        mar: full,
        ..ModelConfig::default()
    };
    let protos = if full {
        let encoder = ToyVideoEncoder::seeded(32, 32, 16, cfg.proto_dim, seed).unwrap();
        let pairs: Vec<_> = train_split
            .iter()
            .map(|s| (&s.aligned, s.event_counts.as_slice()))
            .collect();
        Some(
            build_prototype_set(
                &pairs,
                &SegmentConfig::default(),
                &WindowConfig::default(),
                &DbscanConfig::default(),
                &encoder,
            )
            .unwrap()
            .0,
        )
    } else {
        None
    };
    let dataset: Vec<_> = train_split.iter().map(|s| s.aligned.clone()).collect();
    let (model, _) = train(&dataset, protos.as_ref(), &cfg, 24, 0.01, 0.0, 40, seed).unwrap();
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for s in held_out {
        let hyp = model.predict(&s.aligned, protos.as_ref(), 16).unwrap();
        cands.push(hyp.ids().to_vec());
        refs.push(s.aligned.tokens.ids().to_vec());
    }
    metrics::bleu(&cands, &refs).unwrap()[3]
}

#[test]
fn acceptance_07_ablation_ordering() {
    let seeds = [101u64, 202, 303, 404, 505];
    let mut fulls = Vec::new();
    let mut bases = Vec::new();
    println!("criterion 7 table: seed | full BLEU-4 | baseline BLEU-4");
    for &seed in &seeds {
        let f = ablation_run(seed, true);
        let b = ablation_run(seed, false);
        println!("criterion 7 table: {seed} | {f:.4} | {b:.4}");
        fulls.push(f);
        bases.push(b);
    }
    fulls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bases.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (median_full, median_base) = (fulls[2], bases[2]);
    println!("criterion 7 table: median | {median_full:.4} | {median_base:.4}");
    assert!(
        median_full >= median_base,
        "ordering failed: full {median_full} < baseline {median_base}"
    );
    println!(
        "criterion 7 (ablation ordering, median full {median_full:.4} >= baseline {median_base:.4}): PASS"
    );
}

#[test]
fn acceptance_08_identity_warm_start() {
    let full_cfg = micro_cfg();
    let baseline_cfg = ModelConfig {
        mir_micro: false,
        mir_recurrent: false,
        mar: false,
        ..full_cfg.clone()
    };
    let spec = SynthSpec {
        width: 16,
        height: 16,
        vocab_size: 7,
        tokens_per_sample: 2,
        blob_radius: 3,
        active_frames: 3,
        idle_frames: 3,
        ..SynthSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let protos = PrototypeSet {
        prototypes: Matrix::uniform(2, full_cfg.proto_dim, 1.0, &mut rng),
        sizes: vec![1, 1],
    };
    for seed in [1u64, 2, 3] {
        let sample = gen_sample(&spec, seed).unwrap().aligned;
        let full = Model::new(&full_cfg, 7, 100 + seed).unwrap();
        assert_eq!(full.mir.alpha, 0.0);
        assert_eq!(full.mar.beta, 0.0);
        let baseline = Model {
            cfg: baseline_cfg.clone(),
            ..full.clone()
        };
        let logits_full = full.logits(&sample, Some(&protos)).unwrap();
        let logits_base = baseline.logits(&sample, None).unwrap();
        // Bit-for-bit equality of every logit.
        assert_eq!(logits_full.rows(), logits_base.rows());
        for (a, b) in logits_full.data().iter().zip(logits_base.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    println!("criterion 8 (identity warm start, bit-exact logits): PASS");
}

#[test]
fn acceptance_09_serialization_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3001);
    // EVT-TXT and EVT-BIN.
    for trial in 0..100 {
        let w = rng.gen_range(2..300u16);
        let h = rng.gen_range(2..300u16);
        let n = rng.gen_range(0..400);
        let events: Vec<EventPoint> = (0..n)
            .map(|_| EventPoint {
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                t: rng.gen::<u32>() as u64 * 7,
                p: if rng.gen_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        let stream = EventStream::new(w, h, events).unwrap();
        assert_eq!(
            parse_event_file(&write_event_file(&stream)).unwrap(),
            stream,
            "EVT-TXT trial {trial}"
        );
        assert_eq!(
            parse_event_bin(&write_event_bin(&stream)).unwrap(),
            stream,
            "EVT-BIN trial {trial}"
        );
    }
    // FRM1.
    for trial in 0..100 {
        let t = rng.gen_range(1..6);
        let h = rng.gen_range(1..12);
        let w = rng.gen_range(1..12);
        let data: Vec<f32> = (0..t * h * w * 3).map(|_| rng.gen::<f32>()).collect();
        let frames = FrameSequence::new(t, h, w, data).unwrap();
        assert_eq!(
            parse_frames(&write_frames(&frames)).unwrap(),
            frames,
            "FRM1 trial {trial}"
        );
    }
    // Checkpoints (f32-valued tensors round-trip exactly).
    for trial in 0..100 {
        let count = rng.gen_range(1..6);
        let tensors: Vec<(String, Matrix)> = (0..count)
            .map(|i| {
                let rows = rng.gen_range(1..8);
                let cols = rng.gen_range(1..8);
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| (rng.gen::<f32>() * 4.0 - 2.0) as f64)
                    .collect();
                (
                    format!("tensor.{i}"),
                    Matrix::from_vec(rows, cols, data).unwrap(),
                )
            })
            .collect();
        let refs: Vec<(String, &Matrix)> = tensors.iter().map(|(n, m)| (n.clone(), m)).collect();
        let mut bytes = Vec::new();
        save_checkpoint(&mut bytes, &refs).unwrap();
        let loaded = load_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded, tensors, "checkpoint trial {trial}");
    }
    println!("criterion 9 (serialization round trips, 100 instances per format): PASS");
}
