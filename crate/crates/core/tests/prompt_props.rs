//! Path rendering, section handling and perplexity ranking properties.

use std::path::Path;

use kgpath_core::prompt::{
    load_templates, rank_templates_by_perplexity, serialize_paths, LmScorer, PathStyle, PathText,
    PromptInput, Template, TrigramScorer, PATH_ARROW,
};
use proptest::prelude::*;

fn bundled() -> Vec<Template> {
    load_templates(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/templates")).unwrap()
}

fn template_source(id: &str) -> String {
    std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("data/templates/{id}.txt")),
    )
    .unwrap()
}

/// Removes every `{{#paths}}…{{/paths}}` block and unwraps `{{^paths}}` blocks.
fn without_path_sections(src: &str) -> String {
    let mut s = src.to_string();
    while let Some(a) = s.find("{{#paths}}") {
        let b = s[a..].find("{{/paths}}").unwrap() + a;
        s.replace_range(a..b + "{{/paths}}".len(), "");
    }
    while let Some(a) = s.find("{{^paths}}") {
        let b = s[a..].find("{{/paths}}").unwrap() + a;
        let inner = s[a + "{{^paths}}".len()..b].to_string();
        s.replace_range(a..b + "{{/paths}}".len(), &inner);
    }
    s
}

fn word() -> impl Strategy<Value = String> {
    "[A-Za-z][a-z]{0,7}( [a-z]{1,6}){0,2}"
}

fn arb_path() -> impl Strategy<Value = PathText> {
    (1usize..4).prop_flat_map(|hops| {
        (
            prop::collection::vec(word(), hops + 1),
            prop::collection::vec(word(), hops),
        )
            .prop_map(|(names, rels)| PathText::new(names, rels).unwrap())
    })
}

fn arb_note() -> impl Strategy<Value = String> {
    "[A-Za-z ,.]{1,60}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn structural_rendering_round_trips(path in arb_path()) {
        let line = path.render(PathStyle::Structural);
        let parts: Vec<&str> = line.split(PATH_ARROW).collect();
        prop_assert_eq!(parts.len(), 2 * path.relations.len() + 1);
        for (i, part) in parts.iter().enumerate() {
            let want = if i % 2 == 0 { &path.names[i / 2] } else { &path.relations[i / 2] };
            prop_assert_eq!(*part, want.as_str());
        }
    }

    #[test]
    fn clause_rendering_has_no_arrows(paths in prop::collection::vec(arb_path(), 0..4)) {
        let text = serialize_paths(&paths, PathStyle::Clauses);
        prop_assert!(!text.contains('→'));
        let clauses: usize = paths.iter().map(|p| p.relations.len()).sum();
        prop_assert_eq!(text.split("; ").filter(|c| !c.is_empty()).count(), clauses);
    }

    #[test]
    fn empty_paths_render_without_path_sections(note in arb_note(), paths in prop::collection::vec(arb_path(), 1..3)) {
        for t in bundled() {
            let bare = Template::parse(&t.id, &without_path_sections(&template_source(&t.id))).unwrap();
            let input = PromptInput { note: note.clone(), ..Default::default() };
            prop_assert_eq!(t.render(&input, PathStyle::Structural), bare.render(&input, PathStyle::Structural));

            let full = PromptInput { note: note.clone(), paths: paths.clone(), shots: vec![] };
            let rendered = t.render(&full, PathStyle::Structural);
            prop_assert!(rendered.contains(&serialize_paths(&paths, PathStyle::Structural)));
            prop_assert!(rendered.contains(note.as_str()));
            prop_assert_eq!(&rendered, &t.render(&full, PathStyle::Structural));
        }
    }

    #[test]
    fn perplexity_is_positive_and_deterministic(corpus in prop::collection::vec(arb_note(), 1..5), text in arb_note(), k in 0.01f64..1.0) {
        let lm = TrigramScorer::fit(&corpus, k).unwrap();
        let p = lm.perplexity(&text);
        prop_assert!(p.is_finite() && p >= 1.0);
        prop_assert_eq!(p.to_bits(), TrigramScorer::fit(&corpus, k).unwrap().perplexity(&text).to_bits());
    }

    #[test]
    fn ranking_ignores_template_order(notes in prop::collection::vec(arb_note(), 1..4), rotate in 0usize..3, paths in prop::collection::vec(arb_path(), 0..3)) {
        let templates = bundled();
        let samples: Vec<PromptInput> = notes
            .iter()
            .map(|n| PromptInput { note: n.clone(), paths: paths.clone(), shots: vec![] })
            .collect();
        let lm = TrigramScorer::fit(&notes, 0.1).unwrap();
        let ranked = rank_templates_by_perplexity(&templates, &samples, PathStyle::Structural, &lm).unwrap();
        let mut moved = templates.clone();
        moved.rotate_left(rotate);
        moved.reverse();
        prop_assert_eq!(&ranked, &rank_templates_by_perplexity(&moved, &samples, PathStyle::Structural, &lm).unwrap());
        prop_assert!(ranked.windows(2).all(|w| w[0].mean_perplexity <= w[1].mean_perplexity));
    }
}
