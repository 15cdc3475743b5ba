#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use textcnn::data::Corpus;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_textcnn"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("failed to launch textcnn")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes `corpus` as `<label>__<n>.txt` files, one space-joined document each.
pub fn write_flat(corpus: &Corpus, dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    for d in corpus.docs() {
        let name = d.id.replace('/', "_");
        fs::write(dir.join(format!("{name}.txt")), d.tokens.join(" ")).unwrap();
    }
}

/// Last column of the `total` row of `count-params` output.
pub fn total_from_table(table: &str) -> Option<u64> {
    table
        .lines()
        .find(|l| l.starts_with("total\t"))
        .and_then(|l| l.rsplit('\t').next())
        .and_then(|n| n.parse().ok())
}
