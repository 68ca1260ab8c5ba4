use ternatraj::bitlinear::{BitLinearConfig, QuantMode};
use ternatraj::data::{make_windows, synthetic_suite, TrajectoryWindow, WindowConfig};
use ternatraj::deploy::{decode_export, encode_export, DeployModel, TritEncoding};
use ternatraj::model::{build_model, decode_checkpoint, encode_checkpoint, ModelConfig, SamplingConfig};
use ternatraj::tokenizer::{serialize_window, train_bpe, BpeVocab, TRAJ_ALPHABET};
use ternatraj::train::{build_examples, evaluate_windows, train, ModelPredictor, OraclePredictor, TrainConfig};

fn setup() -> (Vec<TrajectoryWindow>, BpeVocab) {
    let scenes = synthetic_suite(3, 0.2, 4).unwrap();
    let wcfg = WindowConfig {
        stride: 3,
        ..WindowConfig::default()
    };
    let windows: Vec<_> = scenes.iter().flat_map(|s| make_windows(s, &wcfg).unwrap()).collect();
    let corpus: Vec<String> = windows
        .iter()
        .flat_map(|w| {
            let t = serialize_window(w, 0);
            [t.prompt, t.answer]
        })
        .collect();
    (windows, train_bpe(&corpus, TRAJ_ALPHABET, 80).unwrap())
}

fn small(v: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        ..ModelConfig::tiny(v)
    }
}

#[test]
fn train_checkpoint_export_agree() {
    let (windows, vocab) = setup();
    let data = build_examples(&windows, &vocab, 0);
    let mut model = build_model::<f32>(small(vocab.len()), QuantMode::Weight, BitLinearConfig::default(), 1).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        max_steps: Some(12),
        ..TrainConfig::default()
    };
    let log = train(&mut model, &data, &[], &cfg).unwrap();
    assert_eq!(log.steps.len(), 12);
    assert!(log.losses().iter().all(|l| l.is_finite()));

    let restored = decode_checkpoint::<f32>(&encode_checkpoint(&model)).unwrap();
    let ex = &data[0];
    let sampling = SamplingConfig {
        temperature: 0.8,
        max_new_tokens: 40,
        seed: 3,
    };
    assert_eq!(model.sample(&ex.src, &sampling).unwrap(), restored.sample(&ex.src, &sampling).unwrap());

    for enc in [TritEncoding::TwoBit, TritEncoding::Base243] {
        let deploy = DeployModel::from_model(&model, enc).unwrap();
        let back = decode_export(&encode_export(&deploy)).unwrap();
        let mut tgt = vec![0];
        tgt.extend_from_slice(&ex.answer);
        assert_eq!(deploy.forward(&ex.src, &tgt).unwrap(), back.forward(&ex.src, &tgt).unwrap());
        assert_eq!(back.sample(&ex.src, &sampling).unwrap(), deploy.sample(&ex.src, &sampling).unwrap());
    }
}

#[test]
fn model_predictor_scores_no_better_than_oracle() {
    let (windows, vocab) = setup();
    let model = build_model::<f32>(small(vocab.len()), QuantMode::None, BitLinearConfig::default(), 2).unwrap();
    let few = &windows[..4];
    let sampling = SamplingConfig {
        temperature: 1.0,
        max_new_tokens: 60,
        seed: 0,
    };
    let mut predictor = ModelPredictor::new(&model, &vocab, 0, sampling);
    let untrained = evaluate_windows(&mut predictor, few, 3, None).unwrap().finish("s", "none");
    let oracle = evaluate_windows(&mut OraclePredictor, few, 3, None).unwrap().finish("s", "oracle");
    assert_eq!((oracle.ade, oracle.fde), (0.0, 0.0));
    assert!(untrained.ade.is_finite() && untrained.ade > 0.0);
    assert!((0.0..=1.0).contains(&untrained.failure_rate));
    assert_eq!(untrained.samples, 12);
}
