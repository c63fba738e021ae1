mod common;

use std::io::Write;
use std::path::Path;

use mgslab::{
    flip_labels, load_idx, motion_blur, proportional_counts, stratified_sample, synthetic_regression, two_circles,
    Dataset, Error, Split, Targets, Tensor,
};
use proptest::prelude::*;

fn idx_images(images: &[Vec<u8>], h: u32, w: u32) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    b.extend((images.len() as u32).to_be_bytes());
    b.extend(h.to_be_bytes());
    b.extend(w.to_be_bytes());
    for im in images {
        b.extend(im);
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend(labels);
    b
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

fn fixture_images() -> Vec<Vec<u8>> {
    let a: Vec<u8> = (0..784).map(|i| (i % 256) as u8).collect();
    let mut b = vec![0u8; 784];
    b[0] = 255;
    b[783] = 255;
    vec![a, b]
}

#[test]
fn two_circles_without_noise_lies_on_the_circles() {
    let d = two_circles(200, 0.5, 1.0, 0.0, 3).unwrap();
    let labels = d.labels().unwrap();
    for (i, &label) in labels.iter().enumerate() {
        let x = d.inputs.row(i);
        let r = if label == 0 { 0.5 } else { 1.0 };
        assert!(((x[0] * x[0] + x[1] * x[1]).sqrt() - r).abs() < 1e-12);
    }
    assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 100);
    assert_eq!(
        two_circles(200, 0.5, 1.0, 0.08, 9).unwrap(),
        two_circles(200, 0.5, 1.0, 0.08, 9).unwrap()
    );
    assert_ne!(
        two_circles(200, 0.5, 1.0, 0.08, 9).unwrap(),
        two_circles(200, 0.5, 1.0, 0.08, 10).unwrap()
    );
    assert!(two_circles(201, 0.5, 1.0, 0.0, 0).is_err());
}

#[test]
fn two_circles_noise_has_requested_spread() {
    let d = two_circles(20_000, 1.0, 1.0, 0.1, 5).unwrap();
    // radial deviation of an isotropic perturbation of a unit-circle point
    let dev: Vec<f64> = (0..d.len())
        .map(|i| {
            let x = d.inputs.row(i);
            (x[0] * x[0] + x[1] * x[1]).sqrt() - 1.0
        })
        .collect();
    let mean = dev.iter().sum::<f64>() / dev.len() as f64;
    let var = dev.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dev.len() as f64;
    assert!((var.sqrt() - 0.1).abs() < 0.005, "radial std {}", var.sqrt());
}

#[test]
fn idx_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ims = fixture_images();
    let ip = write(dir.path(), "img", &idx_images(&ims, 28, 28));
    let lp = write(dir.path(), "lab", &idx_labels(&[7, 2]));
    let d = load_idx(&ip, &lp, Split::Train).unwrap();
    assert_eq!(d.inputs.shape(), &[2, 28, 28]);
    assert_eq!(d.labels().unwrap(), &[7, 2]);
    assert_eq!(d.inputs.row(1)[0], 1.0);
    assert_eq!(d.inputs.row(1)[1], 0.0);
    assert_eq!(d.inputs.row(0)[255], 1.0);
    assert_eq!(d.inputs.row(0)[3], 3.0 / 255.0);

    let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    gz.write_all(&idx_images(&ims, 28, 28)).unwrap();
    let gp = write(dir.path(), "img.gz", &gz.finish().unwrap());
    assert_eq!(load_idx(&gp, &lp, Split::Train).unwrap().inputs, d.inputs);
}

#[test]
fn idx_errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let full = idx_images(&fixture_images(), 28, 28);
    let lp = write(dir.path(), "lab", &idx_labels(&[7, 2]));

    let ip = write(dir.path(), "short", &full[..full.len() - 10]);
    let e = load_idx(&ip, &lp, Split::Train).unwrap_err();
    match &e {
        Error::Truncated { expected, actual, .. } => {
            assert_eq!(*expected, full.len());
            assert_eq!(*actual, full.len() - 10);
        }
        other => panic!("expected truncation, got {other}"),
    }
    let msg = e.to_string();
    assert!(
        msg.contains(&full.len().to_string()) && msg.contains(&(full.len() - 10).to_string()),
        "{msg}"
    );

    let mut bad = full.clone();
    bad[3] = 1;
    let ip = write(dir.path(), "magic", &bad);
    assert!(matches!(load_idx(&ip, &lp, Split::Train), Err(Error::Format { .. })));

    let ip = write(dir.path(), "img", &full);
    let lp3 = write(dir.path(), "lab3", &idx_labels(&[1, 2, 3]));
    assert!(matches!(
        load_idx(&ip, &lp3, Split::Train),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn blur_of_length_one_is_identity() {
    let mut rng = common::rng(1);
    let x = Tensor::new(vec![3, 9, 7], common::normal_vec(&mut rng, 189, 1.0)).unwrap();
    assert_eq!(motion_blur(&x, 1, 45.0).unwrap(), x);
}

#[test]
fn blur_leaves_uniform_images_unchanged() {
    let x = Tensor::new(vec![2, 10, 10], vec![0.37; 200]).unwrap();
    for angle in [0.0, 30.0, 45.0, 90.0, 135.0] {
        let y = motion_blur(&x, 5, angle).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }
}

#[test]
fn blur_preserves_mass_away_from_borders() {
    // content surrounded by a zero margin wider than the kernel radius
    let mut rng = common::rng(2);
    let (h, w, margin) = (28, 28, 5);
    let mut data = vec![0.0; 4 * h * w];
    for n in 0..4 {
        for y in margin..h - margin {
            for x in margin..w - margin {
                data[(n * h + y) * w + x] = rand::Rng::random::<f64>(&mut rng);
            }
        }
    }
    let x = Tensor::new(vec![4, h, w], data).unwrap();
    for (len, angle) in [(5, 45.0), (7, 0.0), (9, 20.0), (4, 110.0)] {
        let y = motion_blur(&x, len, angle).unwrap();
        for n in 0..4 {
            let before: f64 = x.row(n).iter().sum();
            let after: f64 = y.row(n).iter().sum();
            assert!(
                (before - after).abs() <= 1e-10 * before,
                "len {len} angle {angle}: {before} vs {after}"
            );
        }
    }
}

#[test]
fn blur_of_a_point_draws_the_line() {
    let mut data = vec![0.0; 81];
    data[40] = 1.0;
    let x = Tensor::new(vec![1, 9, 9], data).unwrap();
    let y = motion_blur(&x, 5, 0.0).unwrap();
    let lit: Vec<usize> = (0..81).filter(|&i| y.data()[i] > 0.0).collect();
    assert_eq!(lit, vec![38, 39, 40, 41, 42]);
    assert!(lit.iter().all(|&i| (y.data()[i] - 0.2).abs() < 1e-15));
}

#[test]
fn flip_extremes_and_exact_count() {
    let mut rng = common::rng(3);
    let labels: Vec<usize> = (0..1000).map(|_| rand::Rng::random_range(&mut rng, 0..10)).collect();
    assert_eq!(flip_labels(&labels, 0.0, 10, 1).unwrap(), labels);
    let all = flip_labels(&labels, 1.0, 10, 1).unwrap();
    assert!(all.iter().zip(&labels).all(|(a, b)| a != b && *a < 10));
    let f = flip_labels(&labels, 0.3, 10, 42).unwrap();
    let changed: Vec<usize> = (0..1000).filter(|&i| f[i] != labels[i]).collect();
    assert_eq!(changed.len(), 300);
    assert_eq!(flip_labels(&labels, 0.3, 10, 42).unwrap(), f);
    assert!(flip_labels(&[0, 0], 0.5, 1, 0).is_err());
    assert!(flip_labels(&[0, 0], 1.5, 2, 0).is_err());
}

#[test]
fn flipped_labels_are_uniform_over_other_classes() {
    let labels = vec![0usize; 30_000];
    let f = flip_labels(&labels, 1.0, 4, 8).unwrap();
    for k in 1..4 {
        let c = f.iter().filter(|&&l| l == k).count() as f64;
        assert!((c / 30_000.0 - 1.0 / 3.0).abs() < 0.01);
    }
}

#[test]
fn test_split_cannot_be_corrupted() {
    let d = two_circles(10, 0.5, 1.0, 0.0, 0).unwrap();
    let test = Dataset::new(d.inputs.clone(), d.targets.clone(), Split::Test).unwrap();
    assert!(test.flip_labels(0.5, 1).is_err());
    let flipped = d.flip_labels(0.5, 1).unwrap();
    assert_eq!(flipped.provenance.last().unwrap().operation, "flip_labels");
    assert_eq!(flipped.provenance.last().unwrap().seed, Some(1));
}

fn labelled(labels: Vec<usize>, k: usize) -> Dataset {
    let n = labels.len();
    let x = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
    Dataset::new(x, Targets::Classes { labels, num_classes: k }, Split::Train).unwrap()
}

fn histogram(d: &Dataset, k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    d.labels().unwrap().iter().for_each(|&l| h[l] += 1);
    h
}

#[test]
fn stratified_full_sample_is_a_permutation() {
    let d = labelled((0..50).map(|i| i % 3).collect(), 3);
    let s = stratified_sample(&d, 50, 1).unwrap();
    let mut ids: Vec<usize> = s.inputs.data().iter().map(|&v| v as usize).collect();
    assert_ne!(ids, (0..50).collect::<Vec<_>>());
    ids.sort_unstable();
    assert_eq!(ids, (0..50).collect::<Vec<_>>());
    // rows keep their labels
    for i in 0..50 {
        assert_eq!(s.labels().unwrap()[i], s.inputs.data()[i] as usize % 3);
    }
}

#[test]
fn stratified_balanced_source() {
    let d = labelled((0..1000).map(|i| i % 10).collect(), 10);
    let s = stratified_sample(&d, 100, 4).unwrap();
    assert_eq!(histogram(&s, 10), vec![10; 10]);
    assert_eq!(s, stratified_sample(&d, 100, 4).unwrap());
    assert!(stratified_sample(&d, 5, 4).is_err());
    assert!(stratified_sample(&d, 1001, 4).is_err());
}

proptest! {
    #[test]
    fn stratified_histogram_is_proportional(
        counts in prop::collection::vec(1usize..60, 2..6),
        frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
        let total = labels.len();
        let n = (counts.len() + (frac * (total - counts.len()) as f64) as usize).min(total);
        let d = labelled(labels, counts.len());
        let s = stratified_sample(&d, n, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        let h = histogram(&s, counts.len());
        for (k, &c) in counts.iter().enumerate() {
            let ideal = c as f64 * n as f64 / total as f64;
            prop_assert!((h[k] as f64 - ideal).abs() < 1.0 + 1e-9, "class {} got {} ideal {}", k, h[k], ideal);
        }
        prop_assert_eq!(proportional_counts(&counts, n).iter().sum::<usize>(), n);
    }
}

#[test]
fn synthetic_regression_shapes_and_noise() {
    let a = synthetic_regression(50, 3, 2, 0.0, 7).unwrap();
    assert_eq!(a.inputs.shape(), &[50, 3]);
    assert!(a.inputs.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    match &a.targets {
        Targets::Values(t) => assert_eq!(t.shape(), &[50, 2]),
        _ => panic!("regression targets expected"),
    }
    assert_eq!(a, synthetic_regression(50, 3, 2, 0.0, 7).unwrap());

    let variance = |scale: f64| {
        let d = synthetic_regression(10_000, 3, 2, scale, 11).unwrap();
        let Targets::Values(t) = &d.targets else { unreachable!() };
        let y: Vec<f64> = t.data().iter().step_by(2).copied().collect();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64
    };
    let v: Vec<f64> = [0.0, 0.5, 1.0, 2.0].iter().map(|&s| variance(s)).collect();
    assert!(v.windows(2).all(|w| w[1] > w[0]), "{v:?}");
    // same inputs for every scale, so the excess is the noise variance
    assert!(((v[3] - v[0]) - 4.0).abs() < 0.25, "{v:?}");
}

#[test]
fn dataset_container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = two_circles(20, 0.5, 1.0, 0.1, 1).unwrap().flip_labels(0.2, 3).unwrap();
    let p = dir.path().join("d.bin");
    d.save(&p).unwrap();
    assert_eq!(Dataset::load(&p).unwrap(), d);

    let r = synthetic_regression(5, 2, 3, 0.1, 0).unwrap();
    r.save(&p).unwrap();
    assert_eq!(Dataset::load(&p).unwrap(), r);
}
