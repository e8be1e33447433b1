use tcr_core::data_io::{synth_dataset, Split, SynthSpec};
use tcr_core::model::checkpoint;
use tcr_core::model::train::{train, RecordKind, Schedule};
use tcr_core::model::{Ablation, ModelConfig};
use tcr_core::tokenization::Vocab;

#[test]
fn copy_prefix_validation_loss_falls_then_log_adds_up() {
    let spec = SynthSpec::copy_prefix(200);
    let train_set = synth_dataset(100, &spec, Split::Train).unwrap();
    let valid = synth_dataset(
        200,
        &SynthSpec {
            id_prefix: "v".into(),
            samples: 50,
            ..spec
        },
        Split::Valid,
    )
    .unwrap();
    let texts: Vec<String> = train_set
        .samples
        .iter()
        .flat_map(|s| [s.asr.clone(), s.title.clone()])
        .collect();
    let vocab = Vocab::build(&texts, 64).unwrap();
    let config = ModelConfig::tiny(vocab.len());
    let schedule = Schedule {
        epochs: 3,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let out = train(&train_set, Some(&valid), &vocab, &config, &schedule, Ablation::default()).unwrap();
    let losses: Vec<f64> = out
        .log
        .iter()
        .filter(|r| r.kind == RecordKind::Epoch)
        .map(|r| r.val_loss.unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    let steps = out.log.iter().filter(|r| r.kind == RecordKind::Step).count();
    assert_eq!(steps, 3 * 200usize.div_ceil(16));
    assert_eq!(out.log.len(), steps + 3);

    let bytes = checkpoint::to_bytes(&config, &out.params).unwrap();
    let (c, p) = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(c, config);
    assert_eq!(checkpoint::to_bytes(&c, &p).unwrap(), bytes);
}

#[test]
fn training_rejects_a_mismatched_vocabulary() {
    let train_set = synth_dataset(1, &SynthSpec::copy_prefix(4), Split::Train).unwrap();
    let vocab = Vocab::build(&[train_set.samples[0].asr.clone()], 30).unwrap();
    let config = ModelConfig::tiny(vocab.len() + 1);
    assert!(train(&train_set, None, &vocab, &config, &Schedule::default(), Ablation::default()).is_err());
}
