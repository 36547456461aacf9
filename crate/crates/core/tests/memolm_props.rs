use knowmark::carrier::{QaPair, Tag};
use knowmark::memolm::MemoError;
use knowmark::pipeline::{Experiment, ExperimentConfig};
use knowmark::{Dataset, GenParams, MemoConfig, MemoLM};
use proptest::prelude::*;

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        external_size: 600,
        n_carriers: 3,
        ratio: 0.01,
        base_generic: 100,
        snippet_corpus: 200,
        ..ExperimentConfig::default()
    }
}

fn pairs_strategy() -> impl Strategy<Value = Vec<(String, String)>> {
    proptest::collection::vec(("[a-d]( [a-d]){0,4}", "[a-d0-9]( [a-d0-9,]){0,6}"), 1..6)
}

fn train(pairs: &[(String, String)], epochs: u32) -> MemoLM {
    let records = pairs
        .iter()
        .map(|(i, o)| QaPair::new(i.as_str(), o.as_str(), Tag::External))
        .collect();
    MemoLM::new(MemoConfig::default())
        .unwrap()
        .finetune(&Dataset::new(records), epochs)
        .unwrap()
}

fn assert_normalized(m: &MemoLM, prompt: &str, generated: &[String]) -> Result<(), TestCaseError> {
    let total: f64 = m
        .next_token_distribution(prompt, generated)
        .iter()
        .map(|x| x.1)
        .sum();
    prop_assert!((total - 1.0).abs() < 1e-9, "sum {}", total);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transforms_keep_distributions_normalized(
        a in pairs_strategy(),
        b in pairs_strategy(),
        lambda in 0.0f64..=1.0,
        bits in 2u32..=16,
        prompt in "[a-e]( [a-e]){0,4}",
        prefix in proptest::collection::vec("[a-d0-9]", 0..3),
    ) {
        let ma = train(&a, 1);
        let mb = train(&b, 2);
        for m in [&ma, &MemoLM::merge(&ma, &mb, lambda).unwrap(), &ma.quantize(bits).unwrap()] {
            assert_normalized(m, &prompt, &[])?;
            assert_normalized(m, &prompt, &prefix)?;
        }
    }

    #[test]
    fn self_merge_is_identity(a in pairs_strategy(), lambda in 0.0f64..=1.0, prompt in "[a-e]( [a-e]){0,3}") {
        let m = train(&a, 2);
        let merged = MemoLM::merge(&m, &m, lambda).unwrap();
        let d1 = m.next_token_distribution(&prompt, &[]);
        let d2 = merged.next_token_distribution(&prompt, &[]);
        prop_assert_eq!(d1.len(), d2.len());
        for ((t1, p1), (t2, p2)) in d1.iter().zip(&d2) {
            prop_assert_eq!(t1, t2);
            prop_assert!((p1 - p2).abs() < 1e-12);
        }
        prop_assert_eq!(m.generate(&prompt, &GenParams::greedy()).unwrap(), merged.generate(&prompt, &GenParams::greedy()).unwrap());
    }
}

#[test]
fn more_epochs_never_lower_esr() {
    let mut last = 0.0;
    for epochs in 1..=4 {
        let ex = Experiment::prepare(ExperimentConfig {
            epochs,
            ..small_config()
        })
        .unwrap();
        let esr = ex
            .verify(&ex.watermarked, &GenParams::greedy())
            .unwrap()
            .esr;
        assert!(esr >= last, "epochs {epochs}: {esr} < {last}");
        last = esr;
    }
}

#[test]
fn sixteen_bit_quantization_keeps_esr() {
    let ex = Experiment::prepare(small_config()).unwrap();
    let g = GenParams::greedy();
    let before = ex.verify(&ex.watermarked, &g).unwrap().esr;
    let after = ex
        .verify(&ex.watermarked.quantize(16).unwrap(), &g)
        .unwrap()
        .esr;
    assert_eq!(before, after);
}

#[test]
fn attack_set_must_be_clean() {
    let ex = Experiment::prepare(small_config()).unwrap();
    let dirty = Dataset::new(
        ex.dataset
            .records
            .iter()
            .filter(|r| r.tag == Tag::Watermarked)
            .take(3)
            .cloned()
            .collect(),
    );
    assert!(matches!(
        ex.watermarked.finetune_attack(&dirty, 1, &ex.payloads),
        Err(MemoError::CleanSetContainsPayload { index: 0 })
    ));
    assert!(matches!(
        ex.watermarked
            .finetune_attack(&Dataset::default(), 1, &ex.payloads),
        Err(MemoError::EmptyDataset)
    ));
    assert!(ex
        .watermarked
        .finetune_attack(&ex.clean_attack_set(), 1, &ex.payloads)
        .is_ok());
}

#[test]
fn saved_model_generates_identically() {
    let ex = Experiment::prepare(small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.memolm");
    ex.watermarked
        .save(std::fs::File::create(&path).unwrap())
        .unwrap();
    let back = MemoLM::load(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    let params = GenParams::default().with_temperature(0.7).with_seed(1);
    for p in &ex.prompts {
        assert_eq!(
            back.generate(&p.text, &params).unwrap(),
            ex.watermarked.generate(&p.text, &params).unwrap()
        );
    }
}
