use std::collections::BTreeSet;

use flipaudit_core::interventions::{generate_controls, ControlVocabulary};
use flipaudit_core::parsing::{parse_decision, FlipIndicator};
use flipaudit_core::report::{relative_change, Tally};
use flipaudit_core::stats::{bh_fdr, binomial_test_exceeds, flip_rate, wilson_interval, win_rate};
use flipaudit_core::vignette::{Provenance, VignettePair};
use flipaudit_core::{BiasType, Domain};
use proptest::prelude::*;

fn indicator() -> impl Strategy<Value = FlipIndicator> {
    prop_oneof![Just(FlipIndicator::Flip), Just(FlipIndicator::NoFlip), Just(FlipIndicator::Excluded)]
}

proptest! {
    #[test]
    fn wilson_brackets_the_estimate(n in 1u64..5000, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).floor() as u64;
        let (lo, hi) = wilson_interval(k, n, 0.95).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12);
        prop_assert!(p - 1e-12 <= hi && hi <= 1.0);
        if k == 0 { prop_assert_eq!(lo, 0.0); }
        if k == n { prop_assert_eq!(hi, 1.0); }
    }

    #[test]
    fn binomial_tail_is_monotone(n in 1u64..400, p0 in 0.01f64..0.99) {
        let mut prev = 1.0f64;
        for k in 0..=n {
            let p = binomial_test_exceeds(k, n, p0).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p <= prev + 1e-12);
            prev = p;
        }
        prop_assert_eq!(binomial_test_exceeds(0, n, p0).unwrap(), 1.0);
    }

    #[test]
    fn flip_rate_ignores_excluded(inds in prop::collection::vec(indicator(), 1..200)) {
        let included = inds.iter().filter(|i| **i != FlipIndicator::Excluded).count() as u64;
        let flips = inds.iter().filter(|i| i.is_flip()).count() as u64;
        match flip_rate(&inds) {
            Ok(c) => {
                prop_assert_eq!(c.n, included);
                prop_assert_eq!(c.k, flips);
                prop_assert_eq!(c.excluded, inds.len() as u64 - included);
                prop_assert!((0.0..=1.0).contains(&c.rate));
            }
            Err(_) => prop_assert_eq!(included, 0),
        }
    }

    #[test]
    fn bh_rejects_a_prefix_of_sorted_p(p in prop::collection::vec(0.0f64..=1.0, 1..120), q in 0.01f64..0.5) {
        let out = bh_fdr(&p, q).unwrap();
        prop_assert_eq!(out.rejected.iter().filter(|r| **r).count(), out.k_star);
        for (i, &ri) in out.rejected.iter().enumerate() {
            for (j, &rj) in out.rejected.iter().enumerate() {
                if ri && p[j] < p[i] {
                    prop_assert!(rj, "rejected {} but not smaller {}", p[i], p[j]);
                }
            }
        }
    }

    #[test]
    fn win_rate_stays_in_unit_interval(
        rows in (1usize..25).prop_flat_map(|m| prop::collection::vec((any::<bool>(), prop::collection::vec(any::<bool>(), m)), 1..60))
    ) {
        let d: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let c: Vec<Vec<bool>> = rows.iter().map(|r| r.1.clone()).collect();
        let r = win_rate(&d, &c).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.win_rate));
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        // a targeted non-flip can never win
        let possible = d.iter().filter(|x| **x).count() as u64;
        prop_assert!(r.win_count <= possible);
    }

    #[test]
    fn pooling_sums_counts(cells in prop::collection::vec(prop::collection::vec(prop::option::of(indicator()), 0..50), 1..8)) {
        let mut pooled = Tally::default();
        let mut direct = Tally::default();
        for cell in &cells {
            let mut t = Tally::default();
            for ind in cell {
                t.add(*ind);
                direct.add(*ind);
            }
            pooled.merge(&t);
        }
        prop_assert_eq!(pooled, direct);
        prop_assert_eq!(pooled.n + pooled.excluded + pooled.failed, cells.iter().map(Vec::len).sum::<usize>() as u64);
    }

    #[test]
    fn relative_change_sign_follows_direction(free in 0.001f64..1.0, structured in 0.0f64..1.0) {
        let d = relative_change(free, structured).unwrap();
        prop_assert!(d >= -100.0);
        prop_assert_eq!(d < 0.0, structured < free);
    }

    #[test]
    fn parsed_choice_is_an_option(raw in "[ -~\n]{0,80}") {
        let options = vec!["Approve".to_owned(), "Deny".to_owned(), "Refer".to_owned()];
        if let Some(i) = parse_decision(&raw, &options).decision {
            prop_assert!(i < options.len());
        }
    }

    #[test]
    fn labelled_answers_parse_back(idx in 0usize..3, tail in "[a-z ]{0,40}") {
        let options = vec!["Approve".to_owned(), "Deny".to_owned(), "Refer to committee".to_owned()];
        let letter = (b'a' + idx as u8) as char;
        let raw = format!("({letter}) {}\n{tail}", options[idx]);
        prop_assert_eq!(parse_decision(&raw, &options).decision, Some(idx));
    }

    #[test]
    fn controls_stay_inside_the_swap_region(seed in any::<u64>(), filler in "[a-z]{3,8}( [a-z]{3,8}){2,10}") {
        let pair = VignettePair {
            id: "hiring-authority-0001".into(),
            domain: Domain::Hiring,
            bias_type: BiasType::Authority,
            context: "Screening".into(),
            base_text: format!("{filler}. Referred by a senior partner today. {filler}."),
            swap_text: format!("{filler}. Referred by a junior intern today. {filler}."),
            decision_prompt: "Decide:".into(),
            options: vec!["Interview".into(), "Reject".into()],
            provenance: Provenance::Template,
        };
        let vocab = ControlVocabulary::new(["amber", "cobalt", "meadow", "quartz", "willow"], &BTreeSet::new());
        let controls = generate_controls(&pair, 5, &vocab, seed).unwrap();
        prop_assert_eq!(controls.len(), 5);
        for c in &controls {
            prop_assert!(c.is_region_confined(&pair.base_text));
        }
    }
}
