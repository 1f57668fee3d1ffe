mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;

use clinflow_core::masks::{build_masks, masked_nll, project_whitespace, MaskMode};
use clinflow_core::protocol::emit_with_layout;

fn chars_of(spans: &[[usize; 2]], shift: usize) -> Vec<usize> {
    spans.iter().flat_map(|&[s, e]| (s - shift)..(e - shift)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reasoning_and_knowledge_partition_content(t in support::full_transcript()) {
        let pair = support::pair_for(&t);
        let doc = support::clinical_doc();
        let r = build_masks(&pair, &doc, MaskMode::Reasoning).unwrap();
        let k = build_masks(&pair, &doc, MaskMode::Knowledge).unwrap();
        let shift = k.full_text.chars().count() - r.full_text.chars().count();

        let (text, layout) = emit_with_layout(&t).unwrap();
        prop_assert_eq!(&r.full_text, &text);
        let to_char = |b: usize| text[..b].chars().count();
        let content: BTreeSet<usize> = layout
            .iter()
            .flat_map(|f| to_char(f.range.start)..to_char(f.range.end))
            .collect();

        let rc = chars_of(&r.spans, 0);
        let kc = chars_of(&k.spans, shift);
        let rs: BTreeSet<usize> = rc.iter().copied().collect();
        let ks: BTreeSet<usize> = kc.iter().copied().collect();
        prop_assert_eq!(rs.len(), rc.len());
        prop_assert_eq!(ks.len(), kc.len());
        prop_assert!(rs.is_disjoint(&ks));
        prop_assert_eq!(rs.union(&ks).copied().collect::<BTreeSet<_>>(), content);

        // Knowledge text carries the clinical block; reasoning text never does.
        prop_assert!(k.full_text.contains("Serum lipase 1200 U/L"));
        prop_assert!(!r.full_text.contains("Patient clinical information:"));
        let kt: Vec<char> = k.full_text.chars().collect();
        let rt: Vec<char> = r.full_text.chars().collect();
        for &c in &kc {
            prop_assert_eq!(kt[c + shift], rt[c]);
        }
    }

    #[test]
    fn nll_resums_selected_positions(
        lp in prop::collection::vec(-20.0f64..0.0, 1..200),
        raw in prop::collection::vec((0usize..200, 0usize..40), 1..6),
    ) {
        let n = lp.len();
        let spans: Vec<[usize; 2]> = raw.iter().map(|&(s, w)| { let s = s % n; [s, (s + w).min(n)] }).collect();
        let mut expected = 0.0;
        let mut any = false;
        for (i, &x) in lp.iter().enumerate() {
            if spans.iter().any(|&[s, e]| s <= i && i < e) {
                expected -= x;
                any = true;
            }
        }
        match masked_nll(&lp, &spans) {
            Ok(v) => prop_assert!((v - expected).abs() <= 1e-12),
            Err(_) => prop_assert!(!any),
        }
    }

    #[test]
    fn whitespace_projection_keeps_masked_tokens(t in support::full_transcript()) {
        let s = build_masks(&support::pair_for(&t), &support::clinical_doc(), MaskMode::Reasoning).unwrap();
        let p = project_whitespace(&s);
        let chars: Vec<char> = s.full_text.chars().collect();
        for &[a, b] in &p.spans {
            for tok in &p.tokens[a..b] {
                prop_assert!(chars[tok[0]..tok[1]].iter().all(|c| !c.is_whitespace()));
            }
        }
    }
}
