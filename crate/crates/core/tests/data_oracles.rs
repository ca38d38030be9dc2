use petkit::data::{gen_synthetic_dataset, rms, SyntheticTaskSpec};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn spec(snr_db: f64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        n_classes: 10,
        samples_per_class: 100,
        wave_length: 400,
        snr_db,
        seed: 0,
    }
}

fn magnitude_spectrum(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let fft = planner.plan_fft_forward(x.len());
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf[..x.len() / 2].iter().map(|c| c.norm()).collect()
}

#[test]
fn noiseless_classes_are_separable_by_spectral_centroids() {
    let d = gen_synthetic_dataset(&spec(f64::INFINITY)).unwrap();
    let mut planner = FftPlanner::new();
    let k = d.spec.n_classes;
    let bins = d.spec.wave_length / 2;
    let mut centroids = vec![vec![0.0; bins]; k];
    let mut counts = vec![0usize; k];
    for e in &d.train {
        let s = magnitude_spectrum(e.wave.data(), &mut planner);
        centroids[e.label].iter_mut().zip(&s).for_each(|(c, v)| *c += v);
        counts[e.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let mut correct = 0;
    for e in &d.test {
        let s = magnitude_spectrum(e.wave.data(), &mut planner);
        let dist = |c: &Vec<f64>| c.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let pred = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
        correct += usize::from(pred == e.label);
    }
    let acc = correct as f64 / d.test.len() as f64;
    assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
}

#[test]
fn same_seed_same_dataset() {
    let a = gen_synthetic_dataset(&spec(20.0)).unwrap();
    let b = gen_synthetic_dataset(&spec(20.0)).unwrap();
    assert_eq!(a, b);
    let c = gen_synthetic_dataset(&SyntheticTaskSpec { seed: 1, ..spec(20.0) }).unwrap();
    assert_ne!(a.train[0].wave, c.train[0].wave);
}

#[test]
fn split_sizes_for_ten_by_hundred() {
    let d = gen_synthetic_dataset(&spec(20.0)).unwrap();
    assert_eq!((d.train.len(), d.val.len(), d.test.len()), (800, 100, 100));
    for c in 0..10 {
        assert_eq!(d.train.iter().filter(|e| e.label == c).count(), 80);
        assert_eq!(d.test.iter().filter(|e| e.label == c).count(), 10);
    }
}

#[test]
fn splits_are_disjoint() {
    let d = gen_synthetic_dataset(&spec(f64::INFINITY)).unwrap();
    let all: Vec<&[f64]> = d.train.iter().chain(&d.val).chain(&d.test).map(|e| e.wave.data()).collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert_ne!(all[i], all[j]);
        }
    }
}

#[test]
fn noise_is_added_after_normalization() {
    let clean = gen_synthetic_dataset(&spec(f64::INFINITY)).unwrap();
    let noisy = gen_synthetic_dataset(&spec(0.0)).unwrap();
    // At 0 dB the noise has the same power as the unit-RMS signal.
    let mean_rms: f64 = noisy.train.iter().map(|e| rms(e.wave.data())).sum::<f64>() / noisy.train.len() as f64;
    assert!((mean_rms - 2f64.sqrt()).abs() < 0.1, "{mean_rms}");
    assert!(clean.train.iter().all(|e| (rms(e.wave.data()) - 1.0).abs() < 1e-12));
}

#[test]
fn single_class_is_rejected() {
    assert!(gen_synthetic_dataset(&SyntheticTaskSpec { n_classes: 1, ..spec(10.0) }).is_err());
}
