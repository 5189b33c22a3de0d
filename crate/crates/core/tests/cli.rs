use std::fs;
use std::path::{Path, PathBuf};

use clap::CommandFactory;
use latent_edit::cli::{run, stored_stats, Cli};
use latent_edit::directions::{channel_relevance, encode_prompt_pair, PromptSpec, TemplateBank};
use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};
use latent_edit::store::ArtifactStore;
use serde_json::Value;
use tempfile::TempDir;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn cli(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("latent-edit").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

/// Runs with `--store <dir>/store` prepended.
fn in_store(dir: &TempDir, args: &[&str]) -> Run {
    let store = dir.path().join("store");
    let mut full = vec!["--store", store.to_str().unwrap()];
    full.extend_from_slice(args);
    cli(&full)
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn precomputed() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let r = in_store(&dir, &["precompute"]);
    assert_eq!(r.code, 0, "{}", r.err);
    dir
}

const SUBCOMMANDS: [&str; 8] = [
    "precompute",
    "direction",
    "edit-global",
    "optimize",
    "train-mapper",
    "apply-mapper",
    "report-similarity",
    "serve",
];

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.txt"))
}

#[test]
fn help_output_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut cases: Vec<(String, Vec<&str>)> = vec![("help".into(), vec!["--help"])];
    for sub in SUBCOMMANDS {
        cases.push((format!("help-{sub}"), vec![sub, "--help"]));
    }
    for (name, args) in cases {
        let r = cli(&args);
        assert_eq!(r.code, 0);
        let golden = golden_path(&name);
        if update {
            fs::create_dir_all(golden.parent().unwrap()).unwrap();
            fs::write(&golden, &r.out).unwrap();
        }
        let expected = fs::read_to_string(&golden)
            .unwrap_or_else(|_| panic!("missing {}; rerun with UPDATE_GOLDEN=1", golden.display()));
        assert_eq!(r.out, expected, "{name} drifted from its golden file");
    }
}

#[test]
fn help_lists_every_flag() {
    let root = Cli::command();
    for sub in root.get_subcommands() {
        let help = cli(&[sub.get_name(), "--help"]).out;
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(
                    help.contains(&format!("--{long}")),
                    "{} help lacks --{long}",
                    sub.get_name()
                );
            }
        }
        for global in root.get_arguments().filter_map(|a| a.get_long()) {
            if global != "version" {
                assert!(
                    help.contains(&format!("--{global}")),
                    "{} help lacks --{global}",
                    sub.get_name()
                );
            }
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = precomputed();
    let r = in_store(
        &dir,
        &["direction", "--target", "grey hair", "--neutral", "hair"],
    );
    assert_eq!(r.code, 2);
    let r = in_store(
        &dir,
        &[
            "direction",
            "--target",
            "a",
            "--neutral",
            "b",
            "--k",
            "3",
            "--beta",
            "0.1",
        ],
    );
    assert_eq!(r.code, 2);
    assert_eq!(cli(&["precompute", "--pairs", "many"]).code, 2);
    assert_eq!(cli(&["no-such-command"]).code, 2);
    assert!(!cli(&["--bogus"]).err.is_empty());
}

#[test]
fn missing_stats_exit_1_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let r = in_store(
        &dir,
        &[
            "direction",
            "--target",
            "grey hair",
            "--neutral",
            "hair",
            "--k",
            "5",
        ],
    );
    assert_eq!(r.code, 1);
    assert!(r.err.contains("precompute"), "{}", r.err);
}

#[test]
fn degenerate_prompt_is_a_domain_error() {
    let dir = precomputed();
    let r = in_store(
        &dir,
        &[
            "direction",
            "--target",
            "hair",
            "--neutral",
            "hair",
            "--k",
            "5",
        ],
    );
    assert_eq!(r.code, 1);
}

#[test]
fn direction_k20_lists_twenty_channels_by_relevance() {
    let dir = precomputed();
    let r = in_store(
        &dir,
        &[
            "--json",
            "direction",
            "--target",
            "grey hair",
            "--neutral",
            "hair",
            "--k",
            "20",
        ],
    );
    assert_eq!(r.code, 0, "{}", r.err);
    let report: Value = serde_json::from_str(&r.out).unwrap();
    let channels = report["channels"].as_array().unwrap();
    assert_eq!(channels.len(), 20);
    assert_eq!(report["active_count"], 20);

    // Sort-and-count oracle over the stored statistics.
    let backend = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(0)).unwrap());
    let store = ArtifactStore::open(dir.path().join("store")).unwrap();
    let stats = stored_stats(&store, &backend).unwrap();
    let spec = PromptSpec::new("grey hair", "hair").unwrap();
    let t = encode_prompt_pair(&backend, &spec, &TemplateBank::imagenet()).unwrap();
    let rel = channel_relevance(&stats, &t).unwrap();
    let mut order: Vec<usize> = (0..rel.len()).collect();
    order.sort_by(|a, b| rel[*b].abs().partial_cmp(&rel[*a].abs()).unwrap());
    let listed: Vec<usize> = channels
        .iter()
        .map(|c| c["channel"].as_u64().unwrap() as usize)
        .collect();
    assert_eq!(listed, order[..20]);
    for (c, &i) in channels.iter().zip(&order) {
        assert!((c["relevance"].as_f64().unwrap() - rel[i]).abs() < 1e-12);
    }

    let table = in_store(
        &dir,
        &[
            "direction",
            "--target",
            "grey hair",
            "--neutral",
            "hair",
            "--k",
            "20",
        ],
    );
    assert_eq!(table.out.lines().count(), 2 + 20);
}

#[test]
fn edit_global_alpha_zero_reproduces_plain_render() {
    let dir = precomputed();
    let (out, orig) = (path(&dir, "edit.png"), path(&dir, "orig.png"));
    let r = in_store(
        &dir,
        &[
            "edit-global",
            "--target",
            "grey hair",
            "--neutral",
            "hair",
            "--alpha",
            "0",
            "--k",
            "20",
            "--output",
            &out,
            "--original",
            &orig,
        ],
    );
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(fs::read(out).unwrap(), fs::read(orig).unwrap());
}

#[test]
fn grey_hair_operating_point_runs_and_reinverts() {
    let dir = precomputed();
    let (src, out) = (path(&dir, "src.png"), path(&dir, "out.png"));
    let r = in_store(
        &dir,
        &[
            "edit-global",
            "--target",
            "grey hair",
            "--neutral",
            "hair",
            "--alpha",
            "-4",
            "--beta",
            "0.14",
            "--output",
            &src,
        ],
    );
    assert_eq!(r.code, 0, "{}", r.err);
    let r = in_store(
        &dir,
        &[
            "edit-global",
            "--target",
            "grey hair",
            "--neutral",
            "hair",
            "--alpha",
            "4",
            "--beta",
            "0.14",
            "--image",
            &src,
            "--output",
            &out,
        ],
    );
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(fs::metadata(out).unwrap().len() > 0);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let dir = precomputed();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let (img, trace, ckpt, edit) = (
            path(&dir, &format!("opt{i}.png")),
            path(&dir, &format!("trace{i}.csv")),
            path(&dir, &format!("map{i}.bin")),
            path(&dir, &format!("edit{i}.png")),
        );
        let seed = ["--seed", "7"];
        let r = in_store(
            &dir,
            &[
                &seed[..],
                &[
                    "optimize",
                    "--prompt",
                    "a face with a beard",
                    "--steps",
                    "15",
                    "--output",
                    &img,
                    "--trace",
                    &trace,
                ],
            ]
            .concat(),
        );
        assert_eq!(r.code, 0, "{}", r.err);
        let r = in_store(
            &dir,
            &[
                &seed[..],
                &[
                    "train-mapper",
                    "--name",
                    "beard",
                    "--prompt",
                    "a face with a beard",
                    "--steps",
                    "5",
                    "--latents",
                    "4",
                    "--hidden-dim",
                    "8",
                    "--checkpoint",
                    &ckpt,
                ],
            ]
            .concat(),
        );
        assert_eq!(r.code, 0, "{}", r.err);
        let r = in_store(
            &dir,
            &[
                &seed[..],
                &[
                    "edit-global",
                    "--target",
                    "a beard",
                    "--neutral",
                    "a face",
                    "--alpha",
                    "3",
                    "--k",
                    "20",
                    "--output",
                    &edit,
                ],
            ]
            .concat(),
        );
        assert_eq!(r.code, 0, "{}", r.err);
        outputs.push([img, trace, ckpt, edit].map(|p| fs::read(p).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0][1].clone()).unwrap();
    assert!(csv.starts_with("step,total,clip,l2,id"));
}

#[test]
fn mapper_round_trip_through_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let r = in_store(
        &dir,
        &[
            "train-mapper",
            "--name",
            "curly",
            "--prompt",
            "curly hair",
            "--steps",
            "3",
            "--latents",
            "4",
            "--hidden-dim",
            "8",
            "--branches",
            "coarse,medium",
        ],
    );
    assert_eq!(r.code, 0, "{}", r.err);
    let out = path(&dir, "applied.png");
    let r = in_store(&dir, &["apply-mapper", "--name", "curly", "--output", &out]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(fs::metadata(&out).is_ok());

    let r = in_store(
        &dir,
        &[
            "--json",
            "report-similarity",
            "--name",
            "curly",
            "--latents",
            "10",
        ],
    );
    assert_eq!(r.code, 0, "{}", r.err);
    let report: Value = serde_json::from_str(&r.out).unwrap();
    assert!(report["mean"].as_f64().unwrap().abs() <= 1.0);

    let r = in_store(
        &dir,
        &["apply-mapper", "--name", "unknown", "--output", &out],
    );
    assert_eq!(r.code, 1);
}
