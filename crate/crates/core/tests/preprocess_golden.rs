use memefuse::preprocess::{preprocess, ReplacementLexicon, MAX_TOKENS};

const GOLDEN: &str = include_str!("data/preprocess_golden.tsv");

fn cases() -> Vec<(&'static str, &'static str)> {
    GOLDEN
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_once('\t').expect("golden line has a tab"))
        .collect()
}

#[test]
fn golden_file_matches() {
    let lex = ReplacementLexicon::default();
    let cases = cases();
    assert_eq!(cases.len(), 25);
    for (input, expected) in cases {
        assert_eq!(preprocess(input, &lex).join(), expected, "input {input:?}");
    }
}

#[test]
fn golden_file_covers_truncation() {
    let lex = ReplacementLexicon::default();
    let long = cases()
        .into_iter()
        .filter(|(input, _)| input.split_whitespace().count() > MAX_TOKENS)
        .count();
    assert!(long >= 1);
    for (input, _) in cases() {
        assert!(preprocess(input, &lex).len() <= MAX_TOKENS);
    }
}
