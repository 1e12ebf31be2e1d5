//! Library results against the naive references in `common`.

mod common;

use std::sync::Arc;

use common::*;
use distilmos::cca::{canonical_correlations, cca_similarity};
use distilmos::data::{generate_synthetic_corpus, AudioSource, CorpusManifest, Split};
use distilmos::evaluation::{ktau, lcc, mse, srcc};
use distilmos::losses::{embed_mse_loss, token_ce_loss};
use distilmos::model::HeadMode;
use distilmos::ssl_backend::{BackendSpec, LayerStack, SslBackend, SyntheticBackend};
use distilmos::tokenizer::{assign, fit_codebooks, fit_on_training_split, tokenize_corpus, Codebook};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---- metrics ----

#[test]
fn metrics_match_scalar_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut defined = 0;
    for case in 0..100 {
        let (x, y) = metric_instance(&mut rng);
        assert!(close(mse(&x, &y).unwrap(), mse_oracle(&x, &y), 1e-12), "mse case {case}");
        match (lcc(&x, &y).ok(), pearson_oracle(&x, &y)) {
            (Some(a), Some(b)) => assert!(close(a, b, 1e-9), "lcc case {case}: {a} vs {b}"),
            (None, None) => {}
            other => panic!("lcc definedness differs in case {case}: {other:?}"),
        }
        match (srcc(&x, &y).ok(), srcc_oracle(&x, &y)) {
            (Some(a), Some(b)) => {
                defined += 1;
                assert!(close(a, b, 1e-9), "srcc case {case}: {a} vs {b}")
            }
            (None, None) => {}
            other => panic!("srcc definedness differs in case {case}: {other:?}"),
        }
        match (ktau(&x, &y).ok(), ktau_oracle(&x, &y)) {
            (Some(a), Some(b)) => assert!(close(a, b, 1e-9), "ktau case {case}: {a} vs {b}"),
            (None, None) => {}
            other => panic!("ktau definedness differs in case {case}: {other:?}"),
        }
    }
    assert!(defined > 80, "instance generator too degenerate: {defined}");
}

#[test]
fn ktau_with_ties_on_both_sides() {
    let x = [1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 5.0, 6.0];
    let y = [1.5, 1.5, 3.0, 2.0, 5.0, 4.0, 4.0, 6.0];
    let expected = ktau_oracle(&x, &y).unwrap();
    assert!(close(ktau(&x, &y).unwrap(), expected, 1e-12));
}

#[test]
fn srcc_is_invariant_to_positive_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (x, y) = metric_instance(&mut rng);
        let Ok(base) = srcc(&x, &y) else { continue };
        let scaled: Vec<f64> = x.iter().map(|v| 3.7 * v + 0.25).collect();
        assert!(close(srcc(&scaled, &y).unwrap(), base, 1e-12));
    }
}

// ---- losses ----

#[test]
fn token_ce_matches_softmax_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = 12;
    let logits = Array2::from_shape_simple_fn((6, k), || rng.random_range(-3.0..3.0));
    let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..k)).collect();
    let mask = [true, true, false, true, true, false];
    let got = token_ce_loss(logits.view(), &targets, &mask).unwrap();
    assert!(close(got, ce_oracle(&logits, &targets, &mask), 1e-6));
}

#[test]
fn embed_mse_matches_scalar_loop() {
    let (n, t, d) = (3, 7, 5);
    let preds = Array3::from_shape_fn((n, t, d), |(a, b, c)| ((a * 31 + b * 7 + c) as f64 * 0.37).sin());
    let targets = LayerStack {
        features: Array3::from_shape_fn((n, t, d), |(a, b, c)| ((a * 13 + b * 5 + c * 3) as f64 * 0.21).cos()),
        frame_rate: 50.0,
        mask: vec![true, true, true, true, true, false, false],
    };
    let mask = targets.mask.clone();
    let got = embed_mse_loss(&preds, &targets, &mask).unwrap();
    assert_eq!(got.len(), n);
    for (layer, value) in got.iter().enumerate() {
        let mut s = 0.0;
        let mut count = 0.0;
        for frame in 0..t {
            if !mask[frame] {
                continue;
            }
            for c in 0..d {
                let e = preds[[layer, frame, c]] - targets.features[[layer, frame, c]];
                s += e * e;
                count += 1.0;
            }
        }
        assert!(close(*value, s / count, 1e-12), "layer {layer}");
    }
}

// ---- k-means ----

fn codebook_from(centroids: Array2<f32>) -> Codebook {
    Codebook {
        layer_index: 1,
        centroids,
        seed: 0,
        n_frames_seen: 0,
    }
}

#[test]
fn assign_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let centroids = Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0f32..1.0));
        let frames = Array2::from_shape_simple_fn((50, 8), || rng.random_range(-1.5..1.5));
        let cb = codebook_from(centroids.clone());
        let got = assign(&cb, frames.view()).unwrap();
        for (row, &tok) in frames.rows().into_iter().zip(&got) {
            assert_eq!(tok, nearest_oracle(&centroids, row.as_slice().unwrap()));
        }
    }
}

#[test]
fn assign_breaks_ties_toward_lowest_index() {
    // duplicated centroids and frames exactly halfway between two centers
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut centroids = Array2::from_shape_simple_fn((6, 3), || rng.random_range(-4i32..4) as f32);
    let dup = centroids.row(1).to_owned();
    centroids.row_mut(4).assign(&dup);
    let mut frames = Array2::<f64>::zeros((200, 3));
    for (i, mut row) in frames.rows_mut().into_iter().enumerate() {
        match i % 3 {
            0 => row.assign(&centroids.row(1).mapv(f64::from)),
            1 => {
                let (a, b) = (rng.random_range(0..6), rng.random_range(0..6));
                row.assign(&((&centroids.row(a).mapv(f64::from) + &centroids.row(b).mapv(f64::from)) * 0.5));
            }
            _ => row.assign(&Array2::from_shape_simple_fn((1, 3), || rng.random_range(-4i32..4) as f64).row(0)),
        }
    }
    let cb = codebook_from(centroids.clone());
    let got = assign(&cb, frames.view()).unwrap();
    for (row, &tok) in frames.rows().into_iter().zip(&got) {
        assert_eq!(tok, nearest_oracle(&centroids, row.as_slice().unwrap()));
    }
    assert!(!got.contains(&4), "duplicate centroid must never win");
}

/// Two well-separated 2-D Gaussian blobs as a single-layer stack.
fn blob_stack(n: usize, seed: u64) -> (LayerStack, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let means = [[-3.0, 1.0], [4.0, -2.0]];
    let mut points = Array2::zeros((n, 2));
    for i in 0..n {
        let m = means[rng.random_range(0..2)];
        points[[i, 0]] = m[0] + noise.sample(&mut rng);
        points[[i, 1]] = m[1] + noise.sample(&mut rng);
    }
    let stack = LayerStack {
        features: points.clone().into_shape_with_order((1, n, 2)).unwrap(),
        frame_rate: 50.0,
        mask: vec![true; n],
    };
    (stack, points)
}

#[test]
fn minibatch_fit_lands_on_lloyd_solution() {
    let (stack, points) = blob_stack(2000, 31);
    let cbs = fit_codebooks([stack], 2, 64, 0).unwrap();
    let fitted = cbs[0].centroids.mapv(f64::from);
    let reference = lloyd(&points, &Array2::from_shape_vec((2, 2), vec![-1.0, 0.0, 1.0, 0.0]).unwrap(), 100);
    for c in fitted.rows() {
        let best = reference
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(c.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "centroid {c} is {best} from the Lloyd solution {reference}");
    }
}

#[test]
fn fit_beats_random_centroids_on_held_out_frames() {
    let (train, _) = blob_stack(1500, 40);
    let (_, held_out) = blob_stack(300, 41);
    for seed in 0..5u64 {
        let cbs = fit_codebooks([train.clone()], 6, 64, seed).unwrap();
        let fitted = kmeans_objective(&held_out, &cbs[0].centroids.mapv(f64::from));
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let picks: Vec<usize> = (0..6).map(|_| rng.random_range(0..held_out.nrows())).collect();
        let random = held_out.select(ndarray::Axis(0), &picks);
        assert!(fitted <= kmeans_objective(&held_out, &random), "seed {seed}");
    }
}

#[test]
fn single_cluster_is_the_mean() {
    let (stack, points) = blob_stack(500, 50);
    let cbs = fit_codebooks([stack], 1, 64, 3).unwrap();
    let mean = points.mean_axis(ndarray::Axis(0)).unwrap();
    for (a, b) in cbs[0].centroids.iter().zip(mean.iter()) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn codebook_fit_is_deterministic() {
    let corpus = generate_synthetic_corpus(60, 1).unwrap();
    let backend = SyntheticBackend::new(BackendSpec::synthetic(4, 32), 1).unwrap();
    let a = fit_on_training_split(&corpus, &backend, 16, 64, 9).unwrap();
    let b = fit_on_training_split(&corpus, &backend, 16, 64, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(a.iter().enumerate().all(|(i, c)| c.layer_index == i + 1 && c.k() == 16 && c.dim() == 32));
}

#[test]
fn tokenize_corpus_shapes_follow_frame_counts() {
    let corpus = generate_synthetic_corpus(60, 2).unwrap();
    let backend = SyntheticBackend::new(BackendSpec::synthetic(4, 32), 2).unwrap();
    let cbs = fit_on_training_split(&corpus, &backend, 16, 64, 0).unwrap();
    let hop = backend.spec().hop();

    let mut three: Vec<_> = corpus.entries.iter().take(3).cloned().collect();
    let wave = three[0].waveform().unwrap().to_vec();
    three[0].audio = AudioSource::Inline(Arc::new(wave.iter().copied().cycle().take(50 * hop).collect()));
    let small = CorpusManifest {
        entries: three.clone(),
        ..corpus.clone()
    };
    let tokens = tokenize_corpus(&small, &backend, &cbs).unwrap();
    assert_eq!(tokens.len(), 3);
    assert_eq!(tokens[&three[0].id].tokens.dim(), (4, 50));
    for u in &three {
        let t = backend.spec().frame_count(u.waveform().unwrap().len());
        let seq = &tokens[&u.id];
        assert_eq!(seq.tokens.dim(), (4, t));
        assert!(seq.tokens.iter().all(|&tok| tok < 16));
    }
    let again = tokenize_corpus(&small, &backend, &cbs).unwrap();
    assert_eq!(tokens, again);
    assert!(!corpus.split(Split::Valid).is_empty());
}

// ---- CCA ----

#[test]
fn canonical_correlations_match_eigenproblem_reference() {
    let x = random_matrix(120, 3, 61);
    let noise = random_matrix(120, 5, 62);
    // y shares two directions with x
    let mut y = noise * 0.8;
    for r in 0..120 {
        y[[r, 0]] += x[[r, 0]] - 0.5 * x[[r, 2]];
        y[[r, 3]] += 2.0 * x[[r, 1]];
    }
    let got = cca_similarity(&x, &y).unwrap();
    assert!(close(got, cca_oracle(&x, &y), 1e-8), "{got} vs {}", cca_oracle(&x, &y));
    let rho = canonical_correlations(&x, &y).unwrap();
    assert!(rho.windows(2).all(|w| w[0] >= w[1]));
    assert!(rho.iter().all(|r| (0.0..=1.0).contains(r)));
}

#[test]
fn independent_data_stays_in_the_reference_band() {
    for seed in 0..5u64 {
        let x = random_matrix(200, 4, 70 + seed);
        let y = random_matrix(200, 4, 80 + seed);
        let got = cca_similarity(&x, &y).unwrap();
        let reference = cca_oracle(&x, &y);
        assert!(close(got, reference, 1e-8), "seed {seed}: {got} vs {reference}");
        assert!(got < 0.25, "seed {seed}: {got}");
    }
}

// ---- gradients ----

#[test]
fn tiny_gradients_match_finite_differences() {
    for mode in [HeadMode::TokenPrediction, HeadMode::MseDistillation] {
        let mut setup = tiny_setup(mode, &[5, 4]);
        let reports = gradient_check(&mut setup, 4, 1e-5);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.rel_error <= 1e-3, "{mode:?} {}: relative error {}", r.name, r.rel_error);
        }
    }
}
