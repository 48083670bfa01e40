//! Finite-difference checks for the settings the acceptance suite does not
//! cover (it checks setting D).

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forensic_seg::data::{EditedSample, Family};
use forensic_seg::gradcheck::{check_gradients, Objective};
use forensic_seg::image::{BinaryMask, RgbImage};
use forensic_seg::lora::LoraConfig;
use forensic_seg::losses::LossWeights;
use forensic_seg::pipeline::{ModelConfig, Pipeline, Setting};
use forensic_seg::reasoner::ReasonerConfig;
use forensic_seg::seg_decoder::SegConfig;
use forensic_seg::text::Vocabulary;

fn setup() -> (Pipeline, Vec<EditedSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sample = EditedSample {
        id: "g".into(),
        image: RgbImage(Array3::from_shape_fn((16, 16, 3), |_| rng.random::<f64>())),
        mask: BinaryMask::from_fn(16, 16, |y, x| (2..9).contains(&y) && (5..13).contains(&x)),
        instruction: "turn the green bird to a red fish".into(),
        family: Family::A,
        seed: 0,
        source: None,
    };
    let cfg = ModelConfig {
        reasoner: ReasonerConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_seq: 48,
            patch: 8,
            query_dim: 4,
            seed: 0,
        },
        seg: SegConfig {
            d_feat: 8,
            patch: 4,
            n_heads: 2,
            query_dim: 4,
        },
        lora: LoraConfig::default(),
        max_new: 16,
    };
    let vocab = Vocabulary::build([sample.instruction.as_str()]).unwrap();
    (Pipeline::new(cfg, vocab, 2).unwrap(), vec![sample])
}

fn check(setting: Setting) {
    let (pipeline, samples) = setup();
    let objective = Objective {
        setting,
        samples: &samples,
        prompt_id: 2,
        weights: LossWeights::default(),
    };
    let report = check_gradients(&pipeline, &objective, 1e-5).unwrap();
    assert!(!report.tensors.is_empty());
    let worst = report.worst().unwrap();
    assert!(report.max_rel_err() < 1e-4, "{setting:?}: {worst:?}");
}

#[test]
fn setting_a_gradients() {
    check(Setting::A);
}

#[test]
fn setting_b_gradients() {
    check(Setting::B);
}

#[test]
fn setting_c_gradients() {
    check(Setting::C);
}

#[test]
fn nonpositive_step_is_rejected() {
    let (pipeline, samples) = setup();
    let objective = Objective {
        setting: Setting::A,
        samples: &samples,
        prompt_id: 1,
        weights: LossWeights::default(),
    };
    assert!(check_gradients(&pipeline, &objective, 0.0).is_err());
    let none = Objective { samples: &[], ..objective };
    assert!(check_gradients(&pipeline, &none, 1e-5).is_err());
}
