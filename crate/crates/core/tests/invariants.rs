mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use wifi2cap::synth::{mirror_caption, sanitize_phase, Dataset, DatasetConfig};

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| Dataset::generate(&DatasetConfig::default(), 7).unwrap())
}

#[test]
fn mirroring_is_an_involution() {
    assert_eq!(common::involution_fuzz(dataset(), 1000, 3), (0, 0));
}

#[test]
fn linear_phase_vanishes_and_sanitization_is_idempotent() {
    let (linear, idem) = common::sanitize_suite(200, 9);
    assert!(linear <= 1e-9, "linear residual {linear:e}");
    assert!(idem <= 1e-9, "idempotence gap {idem:e}");
}

#[test]
fn embeddings_are_unit_norm() {
    let worst = common::norm_fuzz(dataset(), 1000, 4);
    assert!(worst <= 1e-5, "norm deviation {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn caption_mirror_round_trips(seed in any::<u64>()) {
        let ds = dataset();
        let s = common::fuzz_caption(&mut common::rng(seed), &ds.lexicon);
        let once = mirror_caption(&s, &ds.lexicon);
        prop_assert_eq!(mirror_caption(&once, &ds.lexicon), s.clone());
    }

    #[test]
    fn sanitized_phase_has_no_linear_trend(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let raw = common::smooth_phase(&mut r, 2, 2, 30, 1.5);
        let out = sanitize_phase(&raw).unwrap();
        for lane in out.lanes(ndarray::Axis(2)) {
            let k = lane.len() as f64;
            let xm = (k - 1.0) / 2.0;
            let mean = lane.sum() / k;
            let slope: f64 = lane.iter().enumerate().map(|(i, y)| (i as f64 - xm) * y).sum();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(slope.abs() < 1e-7);
        }
    }
}
