use std::fs;
use std::path::{Path, PathBuf};

use chatdecide::model::{Factor, FactorSet, PerceptionLabel};
use chatdecide::parser::{self, IssueCode, ParseStatus};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/malformed")
}

fn keys() -> (Vec<String>, Vec<String>) {
    (
        ["Aoi", "Ren", "Yui"].map(String::from).to_vec(),
        ["Napoli Pizza", "Hanuri"].map(String::from).to_vec(),
    )
}

/// (status, issue codes) for one fixture file; the step is in the file name.
fn outcome(path: &Path) -> (ParseStatus, Vec<IssueCode>) {
    let raw = fs::read_to_string(path).unwrap();
    let name = path.file_name().unwrap().to_string_lossy().into_owned();
    let (rows, cols) = keys();
    let (status, issues) = if name.contains(".step1.") {
        let o = parser::parse_step1(&raw);
        (o.status, o.issues)
    } else if name.contains(".step2.") {
        let o = parser::parse_mentioned(&raw, &rows, &cols, None);
        (o.status, o.issues)
    } else if name.contains(".step3.") {
        let o = parser::parse_perception(&raw, &rows, &cols, None);
        (o.status, o.issues)
    } else {
        let o = parser::parse_interpretation(&raw, &rows, &cols, None);
        (o.status, o.issues)
    };
    let mut codes: Vec<IssueCode> = issues.iter().map(|i| i.code).collect();
    codes.sort_by_key(|c| c.as_str());
    codes.dedup();
    (status, codes)
}

fn expected() -> Vec<(String, String, String)> {
    fs::read_to_string(fixture_dir().join("expected.tsv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut f = l.split('\t');
            let file = f.next().unwrap().to_string();
            let status = f.next().unwrap().to_string();
            let codes = f.next().unwrap_or("").to_string();
            (file, status, codes)
        })
        .collect()
}

#[test]
fn every_fixture_has_its_documented_outcome() {
    let exp = expected();
    let on_disk: Vec<String> = fs::read_dir(fixture_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".txt"))
        .collect();
    assert!(exp.len() >= 12);
    assert_eq!(on_disk.len(), exp.len(), "every fixture is listed");
    for (file, status, codes) in exp {
        let (s, c) = outcome(&fixture_dir().join(&file));
        assert_eq!(format!("{s:?}"), status, "{file}");
        let got: Vec<&str> = c.iter().map(|c| c.as_str()).collect();
        assert_eq!(got.join(","), codes, "{file}");
        // fatal issues and Failed go together
        assert_eq!(
            c.iter().any(|c| c.is_fatal()),
            s == ParseStatus::Failed,
            "{file}"
        );
    }
}

#[test]
fn self_refine_keeps_the_final_table() {
    let raw = fs::read_to_string(fixture_dir().join("11_sr_draft_then_final.step4.txt")).unwrap();
    let (rows, cols) = keys();
    let t = parser::parse_interpretation(&raw, &rows, &cols, None)
        .payload
        .unwrap();
    let fs = |v: &[Factor]| v.iter().copied().collect::<FactorSet>();
    assert_eq!(*t.get(1, 0), fs(&[Factor::A2]));
    assert_eq!(*t.get(2, 1), fs(&[Factor::A7]));
}

#[test]
fn transposed_table_is_read_back_onto_the_grid() {
    let raw = fs::read_to_string(fixture_dir().join("10_transposed.step3.txt")).unwrap();
    let (rows, cols) = keys();
    let t = parser::parse_perception(&raw, &rows, &cols, None)
        .payload
        .unwrap();
    assert_eq!(*t.get(1, 0), PerceptionLabel::Negative);
    assert_eq!(*t.get(2, 1), PerceptionLabel::Mix);
}

#[test]
fn factor_descriptions_are_ignored_but_codes_kept() {
    let raw = fs::read_to_string(fixture_dir().join("15_factor_descriptions.step4.txt")).unwrap();
    let (rows, cols) = keys();
    let t = parser::parse_interpretation(&raw, &rows, &cols, None)
        .payload
        .unwrap();
    let fs = |v: &[Factor]| v.iter().copied().collect::<FactorSet>();
    assert_eq!(*t.get(0, 0), fs(&[Factor::A1]));
    assert_eq!(*t.get(1, 0), fs(&[Factor::A2, Factor::A6]));
    assert!(t.get(2, 0).is_empty());
}
