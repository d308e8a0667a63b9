use proptest::prelude::*;

use matt::data::{synth, Dataset, SynthSpec, Trial};
use matt::geometry::{lem_distance, similarity, weighted_le_mean, WeightVector};
use matt::layers::ConvSpec;
use matt::model::{forward, predict_plain, Checkpoint, MattConfig, ParamRegistry, Variant};
use matt::sampling::{gaussian_matrix, random_orthogonal, random_spd, seeded_rng};
use matt::spd::SpdMatrix;

fn config(seed: u64, m: usize, variant: Variant) -> MattConfig {
    MattConfig {
        conv: ConvSpec {
            spatial_filters: 3,
            temporal_filters: 5,
            temporal_kernel: 6,
            stride: 2,
        },
        d_u: 3,
        m,
        seed,
        variant,
        ..MattConfig::new(3, 48, 3)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn taped_and_plain_forward_agree(seed in any::<u64>(), m in 1usize..5, full in any::<bool>()) {
        let variant = if full { Variant::Full } else { Variant::FeOnly };
        let cfg = config(seed, m, variant);
        let params = ParamRegistry::init(&cfg).unwrap();
        let mut rng = seeded_rng(seed ^ 1);
        let trial = Trial { samples: gaussian_matrix(3, 48, 2.0, &mut rng), label: 0 };
        let taped = forward(&trial, &params, &cfg).unwrap();
        let (plain, att) = predict_plain(&trial, &params, &cfg).unwrap();
        prop_assert!((taped.probabilities - plain).amax() < 1e-10);
        prop_assert_eq!(taped.attention.is_some(), att.is_some());
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), m in 1usize..5) {
        let cfg = config(seed, m, Variant::Full);
        let ck = Checkpoint::new(cfg.clone(), ParamRegistry::init(&cfg).unwrap()).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn lem_distance_is_a_congruence_invariant_metric(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let a = random_spd(4, 2.0, &mut rng);
        let b = random_spd(4, 2.0, &mut rng);
        let c = random_spd(4, 2.0, &mut rng);
        let dab = lem_distance(&a, &b).unwrap();
        prop_assert!((dab - lem_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(dab <= lem_distance(&a, &c).unwrap() + lem_distance(&c, &b).unwrap() + 1e-12);
        let q = random_orthogonal(4, &mut rng);
        let rot = |p: &SpdMatrix| SpdMatrix::from_symmetrized(&(&q * p.matrix() * q.transpose())).unwrap();
        prop_assert!((lem_distance(&rot(&a), &rot(&b)).unwrap() - dab).abs() < 1e-9);
        let s = similarity(&a, &b).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0);
    }

    #[test]
    fn weighted_mean_is_closer_to_heavier_point(seed in any::<u64>(), w in 0.55f64..0.95) {
        let mut rng = seeded_rng(seed);
        let a = random_spd(3, 2.0, &mut rng);
        let b = random_spd(3, 2.0, &mut rng);
        prop_assume!(lem_distance(&a, &b).unwrap() > 1e-6);
        let mean = weighted_le_mean(&[a.clone(), b.clone()], &WeightVector::new(vec![w, 1.0 - w]).unwrap()).unwrap();
        prop_assert!(lem_distance(&mean, &a).unwrap() < lem_distance(&mean, &b).unwrap());
    }
}

#[test]
fn synthetic_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(&SynthSpec {
        classes: 2,
        channels: 5,
        timepoints: 30,
        freqs: vec![6.0, 17.0],
        trials_per_class: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let path = dir.path().join("d.bin");
    matt::data::save(&d, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len() - bytes.iter().position(|b| *b == 0).unwrap() - 1, 6 * 5 * 30 * 4 + 6 * 4);
    assert_eq!(matt::data::load(&path).unwrap(), d);
    assert_eq!(Dataset::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}
