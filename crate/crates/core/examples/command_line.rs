//! Drives the command-line front end in-process: renders a dataset twice with
//! `--deterministic` and confirms the two directories are byte-identical.

use std::path::Path;

use talkdiff::cli::run;

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn main() {
    let root = std::env::temp_dir().join("talkdiff-example-cli");
    let _ = std::fs::remove_dir_all(&root);
    let dirs = [root.join("a"), root.join("b")];
    for d in &dirs {
        let code = run([
            "talkdiff",
            "gen-data",
            "--seed",
            "7",
            "--clips",
            "3",
            "--frames",
            "8",
            "--deterministic",
            "--out",
            d.to_str().unwrap(),
        ]);
        println!("gen-data into {} exited with {code}", d.display());
    }
    println!("identical: {}", read_tree(&dirs[0]) == read_tree(&dirs[1]));
    println!("refusing to clobber exits with {}", run(["talkdiff", "gen-data", "--out", dirs[0].to_str().unwrap()]));
}
