//! Replay sampling is uniform over stored transitions.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use workbench::rng::seeded;
use workbench::sac::ReplayBuffer;

#[test]
fn sampling_passes_a_chi_square_uniformity_test() {
    let n = 50;
    let mut buf = ReplayBuffer::new(80, 2, 1).unwrap();
    for i in 0..n {
        let x = i as f64;
        buf.push(&[x, -x], &[0.5], x, &[x + 1.0, 0.0], false);
    }
    let mut counts = vec![0usize; n];
    let mut rng = seeded(21);
    for _ in 0..1000 {
        for i in buf.sample_indices(100, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let expected = 100_000.0 / n as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi-square {stat:.1}, p = {p:.2e}");
}

#[test]
fn sampled_fields_stay_aligned_after_wraparound() {
    let mut buf = ReplayBuffer::new(16, 1, 1).unwrap();
    for i in 0..40 {
        let x = i as f64;
        buf.push(&[x], &[x * 0.01], 2.0 * x, &[x + 1.0], i % 7 == 0);
    }
    assert_eq!(buf.len(), 16);
    let b = buf.sample(64, &mut seeded(3)).unwrap();
    for r in 0..b.len() {
        let x = b.states.data()[r];
        assert!(x >= 24.0, "overwritten transition {x} sampled");
        assert_eq!(b.actions.data()[r], x * 0.01);
        assert_eq!(b.rewards.data()[r], 2.0 * x);
        assert_eq!(b.next_states.data()[r], x + 1.0);
        assert_eq!(b.dones.data()[r], if x as usize % 7 == 0 { 1.0 } else { 0.0 });
    }
}
