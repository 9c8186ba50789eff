use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use sensealign::synth::{
    check_disjoint, generate_synthetic_bilingual, generate_synthetic_wsd, BilingualSpec, SynthSpec, WsdSpec,
};

fn asset(name: &str) -> SynthSpec {
    SynthSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)).unwrap()
}

fn packaged_wsd() -> WsdSpec {
    match asset("wsd.spec") {
        SynthSpec::Wsd(s) => s,
        other => panic!("unexpected task {other:?}"),
    }
}

fn packaged_bilingual() -> BilingualSpec {
    match asset("bilingual.spec") {
        SynthSpec::Bilingual(s) => s,
        other => panic!("unexpected task {other:?}"),
    }
}

#[test]
fn packaged_wsd_task_has_the_planned_counts() {
    let spec = packaged_wsd();
    let data = generate_synthetic_wsd(&spec).unwrap();
    assert_eq!(data.train.labels.len() + data.test.labels.len(), 1200);
    assert_eq!(data.homonyms.len(), 3);
    for h in 0..3 {
        for s in 0..2 {
            let tag = spec.tag(h, s);
            assert_eq!(data.labeled_count(&tag), 200, "{tag}");
            assert_eq!(data.test.labels.iter().filter(|l| l.tag == tag).count(), 100);
        }
    }
    let sets = spec.context_sets();
    check_disjoint(&sets).unwrap();
    for split in [&data.train, &data.test] {
        for l in &split.labels {
            let sentence = &split.sentences[l.sentence];
            let h = data.homonyms.iter().position(|w| *w == sentence[l.position]).unwrap();
            let s = (0..2).find(|&s| spec.tag(h, s) == l.tag).unwrap();
            let cues: Vec<&String> = sentence.iter().filter(|w| sets[h].iter().any(|set| set.contains(*w))).collect();
            assert!(cues.len() >= spec.cue_run_min);
            assert!(cues.iter().all(|w| sets[h][s].contains(*w)), "{sentence:?}");
        }
    }
    // Test sentences never leak into the training corpus.
    let corpus: BTreeSet<&Vec<String>> = data.corpus.iter().collect();
    let leaked = data.test.sentences.iter().filter(|s| corpus.contains(s)).count();
    assert!(leaked < 5, "{leaked} test sentences also in the corpus");
    assert_eq!(data.corpus.len(), 600 + 600);
}

#[test]
fn generation_is_seeded() {
    let mut spec = packaged_wsd();
    let a = generate_synthetic_wsd(&spec).unwrap();
    assert_eq!(a, generate_synthetic_wsd(&spec).unwrap());
    spec.seed += 1;
    assert_ne!(a, generate_synthetic_wsd(&spec).unwrap());
    let b = packaged_bilingual();
    assert_eq!(generate_synthetic_bilingual(&b).unwrap(), generate_synthetic_bilingual(&b).unwrap());
}

#[test]
fn spec_text_round_trips() {
    for name in ["wsd.spec", "bilingual.spec"] {
        let spec = asset(name);
        assert_eq!(SynthSpec::from_text(&spec.to_text()).unwrap(), spec);
    }
    assert!(SynthSpec::from_text("task = wsd\nbogus = 1\n").is_err());
    assert!(SynthSpec::from_text("n_concepts = 3\n").is_err());
}

#[test]
fn packaged_bilingual_task_is_consistent() {
    let spec = packaged_bilingual();
    let data = generate_synthetic_bilingual(&spec).unwrap();
    assert_eq!(data.corpus1.len(), 5000);
    assert_eq!(data.corpus2.len(), 5000);
    assert_ne!(data.corpus1[0].len(), 0);
    // Not a translation of each other sentence by sentence.
    let parallel = data
        .corpus1
        .iter()
        .zip(&data.corpus2)
        .filter(|(a, b)| a.len() == b.len())
        .count();
    assert!(parallel < 1000);

    let words1: BTreeSet<String> = (0..spec.n_concepts).map(|c| spec.word1(c)).collect();
    let words2: BTreeSet<String> = (0..spec.n_concepts).map(|c| spec.word2(c)).collect();
    assert_eq!(words2.len(), spec.n_concepts);
    assert_eq!(words1.len(), spec.n_concepts - spec.homonym_pairs);
    assert!(data.corpus1.iter().flatten().all(|w| words1.contains(w)));
    assert!(data.corpus2.iter().flatten().all(|w| words2.contains(w)));

    let mut targets: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (a, b) in &data.train_dict {
        targets.entry(a).or_default().insert(b);
    }
    let ambiguous = targets.values().filter(|t| t.len() == 2).count();
    assert_eq!(ambiguous, spec.homonym_pairs);
    assert_eq!(data.train_dict.len(), (spec.n_concepts as f64 * spec.dict_fraction).round() as usize);
    let train_src: BTreeSet<&String> = data.train_dict.iter().map(|p| &p.0).collect();
    assert!(data.test_dict.iter().all(|(a, _)| !train_src.contains(a)));
    assert_eq!(data.train_dict.len() + data.test_dict.len(), spec.n_concepts);
}
