//! Cross-module property tests: algebraic identities of the linear algebra,
//! the BMES round trip, decode totality, and scorer/oracle agreement.

use proptest::prelude::*;

use blstmseg_core::corpus_eval::{score_prf, Corpus};
use blstmseg_core::linalg::{add, matvec, sigmoid, softmax, Matrix, Vector};
use blstmseg_core::tagger::{decode_segmentation, label_from_segmentation, Tag};

fn word_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::char::range('一', '百'), 1..6).prop_map(|cs| cs.into_iter().collect())
}

fn segmentation_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word_strategy(), 1..20)
}

/// Exhaustive pairwise interval matching, the independent scoring oracle.
fn brute_force_counts(gold: &[Vec<String>], pred: &[Vec<String>]) -> (u64, u64, u64) {
    let intervals = |words: &[String]| {
        let mut out = Vec::new();
        let mut pos = 0usize;
        for w in words {
            let n = w.chars().count();
            out.push((pos, pos + n));
            pos += n;
        }
        out
    };
    let mut correct = 0u64;
    let mut gold_total = 0u64;
    let mut pred_total = 0u64;
    for (gs, ps) in gold.iter().zip(pred.iter()) {
        let gi = intervals(gs);
        let pi = intervals(ps);
        for p in &pi {
            for g in &gi {
                if p == g {
                    correct += 1;
                }
            }
        }
        gold_total += gi.len() as u64;
        pred_total += pi.len() as u64;
    }
    (correct, gold_total, pred_total)
}

/// Split a character sequence at boundary flags into words.
fn words_from_cuts(chars: &[char], cuts: &[bool]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        current.push(c);
        let cut_here = i + 1 == chars.len() || cuts[i];
        if cut_here {
            words.push(std::mem::take(&mut current));
        }
    }
    words
}

proptest! {
    #[test]
    fn bmes_round_trip(words in segmentation_strategy()) {
        let tags = label_from_segmentation(&words).unwrap();
        let chars: Vec<char> = words.concat().chars().collect();
        prop_assert_eq!(decode_segmentation(&chars, &tags), words);
    }

    #[test]
    fn decode_is_total_and_conserves_characters(
        chars in prop::collection::vec(prop::char::range('a', 'z'), 0..40),
        raw_tags in prop::collection::vec(0usize..4, 0..40)
    ) {
        let n = chars.len().min(raw_tags.len());
        let chars = &chars[..n];
        let tags: Vec<Tag> = raw_tags[..n].iter().map(|&t| Tag::from_index(t)).collect();
        let words = decode_segmentation(chars, &tags);
        let rebuilt: Vec<char> = words.concat().chars().collect();
        prop_assert_eq!(rebuilt, chars.to_vec());
        prop_assert!(words.iter().all(|w| !w.is_empty()));
    }

    #[test]
    fn tag_counts_balance(words in segmentation_strategy()) {
        let tags = label_from_segmentation(&words).unwrap();
        let b = tags.iter().filter(|t| **t == Tag::B).count();
        let e = tags.iter().filter(|t| **t == Tag::E).count();
        prop_assert_eq!(b, e);
    }

    #[test]
    fn scorer_matches_brute_force_oracle(
        sentences in prop::collection::vec(
            (prop::collection::vec(prop::char::range('一', '十'), 1..15),
             prop::collection::vec(any::<bool>(), 14),
             prop::collection::vec(any::<bool>(), 14)),
            1..6
        )
    ) {
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for (chars, gold_cuts, pred_cuts) in &sentences {
            gold.push(words_from_cuts(chars, gold_cuts));
            pred.push(words_from_cuts(chars, pred_cuts));
        }
        let (correct, gold_n, pred_n) = brute_force_counts(&gold, &pred);
        let g = Corpus::from_sentences(gold, "gold");
        let p = Corpus::from_sentences(pred, "pred");
        let report = score_prf(&g, &p).unwrap();
        prop_assert_eq!(report.correct_words, correct);
        prop_assert_eq!(report.gold_words, gold_n);
        prop_assert_eq!(report.pred_words, pred_n);
    }

    #[test]
    fn scorer_self_comparison_is_perfect(
        sentences in prop::collection::vec(segmentation_strategy(), 1..5)
    ) {
        let c = Corpus::from_sentences(sentences, "c");
        let report = score_prf(&c, &c.clone()).unwrap();
        prop_assert_eq!(report.precision, 1.0);
        prop_assert_eq!(report.recall, 1.0);
        prop_assert_eq!(report.f1, 1.0);
    }

    #[test]
    fn matvec_is_linear(
        entries in prop::collection::vec(-10.0f64..10.0, 12),
        u in prop::collection::vec(-10.0f64..10.0, 4),
        v in prop::collection::vec(-10.0f64..10.0, 4)
    ) {
        let m = Matrix::from_rows(entries.chunks(4).map(|r| r.to_vec()).collect());
        let u = Vector::from_vec(u);
        let v = Vector::from_vec(v);
        let lhs = matvec(&m, &add(&u, &v));
        let rhs = add(&matvec(&m, &u), &matvec(&m, &v));
        for k in 0..3 {
            prop_assert!((lhs[k] - rhs[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_normalizes_and_keeps_argmax(values in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let v = Vector::from_vec(values.clone());
        let out = softmax(&v);
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let unique_max = {
            let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            values.iter().filter(|&&x| x == m).count() == 1
        };
        if unique_max {
            prop_assert_eq!(out.argmax(), v.argmax());
        }
    }

    #[test]
    fn sigmoid_complement_identity(values in prop::collection::vec(-30.0f64..30.0, 1..8)) {
        let v = Vector::from_vec(values.clone());
        let neg = Vector::from_vec(values.iter().map(|x| -x).collect());
        let a = sigmoid(&v);
        let b = sigmoid(&neg);
        for k in 0..values.len() {
            prop_assert!((a[k] + b[k] - 1.0).abs() < 1e-12);
        }
    }
}
