//! The command-line workflow driven from code: generate a scene directory,
//! rebuild its map from the text model, localize the queries and evaluate.
//! Equivalent shell commands are printed alongside.
//!
//! cargo run --release --example cli_workflow

use ocloc::cli::run_from;

fn main() {
    let dir = std::env::temp_dir().join(format!("ocloc-cli-example-{}", std::process::id()));
    let d = dir.to_str().unwrap();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen".into(), "--out".into(), d.into(), "--set".into(), "noise.pixel_sigma=0.5".into()],
        vec!["build-map".into(), d.into(), "--out".into(), format!("{d}/rebuilt.ocmap")],
        vec![
            "localize".into(),
            "--map".into(),
            format!("{d}/rebuilt.ocmap"),
            "--queries".into(),
            format!("{d}/queries"),
            "--out".into(),
            format!("{d}/poses.txt"),
            "--workers".into(),
            "2".into(),
        ],
        vec!["evaluate".into(), format!("{d}/poses.txt"), format!("{d}/gt_poses.txt")],
    ];
    for args in steps {
        println!("$ ocloc {}", args.join(" "));
        let code = run_from(std::iter::once("ocloc".to_string()).chain(args));
        if code != 0 {
            eprintln!("exit code {code}");
            std::process::exit(code);
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
}
