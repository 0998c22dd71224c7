//! Black-box tests of the command-line interface: each case runs the real
//! binary in a scratch directory and asserts on exit code, stdout, and
//! stderr. The exit-code contract under test: 0 success, 1 bad usage or
//! configuration, 2 verification findings, 3 I/O or container damage.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moi-pack"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, want: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "{what}: expected exit {want}\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out),
    );
}

/// Twelve short conversations across the four built-in tasks, plus a
/// matching balanced-mix configuration.
fn scratch_workspace() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut lines = Vec::new();
    for task in ["chat", "code", "math", "agent"] {
        for n in 0..3 {
            lines.push(
                serde_json::json!({
                    "id": format!("{task}-{n}"),
                    "task": task,
                    "turns": [
                        {"role": "user", "text": format!("ask {task} {n}")},
                        {"role": "assistant", "text": format!("reply {task} {n}")},
                    ],
                })
                .to_string(),
            );
        }
    }
    let corpus = dir.path().join("corpus.jsonl");
    std::fs::write(&corpus, lines.join("\n")).expect("corpus writes");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[pipeline]\nstrategy = \"moi\"\nmax_len = 512\nseed = 3\n",
    )
    .expect("config writes");
    (dir, config, corpus)
}

fn pack_container(dir: &TempDir, config: &Path, corpus: &Path) -> PathBuf {
    let out = dir.path().join("batch.moipack");
    let run = bin()
        .args(["pack", "--config"])
        .arg(config)
        .arg("--corpus")
        .arg(corpus)
        .arg("--out")
        .arg(&out)
        .output()
        .expect("binary runs");
    assert_exit(&run, 0, "pack");
    out
}

#[test]
fn pack_verify_inspect_stats_round_trip() {
    let (dir, config, corpus) = scratch_workspace();
    let container = pack_container(&dir, &config, &corpus);

    let verify = bin()
        .args(["verify", "--in"])
        .arg(&container)
        .output()
        .expect("binary runs");
    assert_exit(&verify, 0, "verify");
    let verify_out = stdout(&verify);
    assert!(
        verify_out.contains("all checks passed"),
        "verify should report success, got:\n{verify_out}"
    );

    let inspect = bin()
        .args(["inspect", "--in"])
        .arg(&container)
        .args(["--item", "0"])
        .output()
        .expect("binary runs");
    assert_exit(&inspect, 0, "inspect --item 0");
    let inspect_out = stdout(&inspect);
    assert!(
        inspect_out.contains("item 0"),
        "inspect should describe the requested item, got:\n{inspect_out}"
    );

    let plan = bin()
        .args(["inspect", "--in"])
        .arg(&container)
        .arg("--plan")
        .output()
        .expect("binary runs");
    assert_exit(&plan, 0, "inspect --plan");
    let parsed: serde_json::Value =
        serde_json::from_str(&stdout(&plan)).expect("plan output is JSON");
    assert!(
        parsed.get("order").is_some() && parsed.get("chunk_template").is_some(),
        "plan JSON must expose the emission order and chunk template"
    );

    let stats = bin()
        .args(["stats", "--corpus"])
        .arg(&corpus)
        .output()
        .expect("binary runs");
    assert_exit(&stats, 0, "stats");
    let stats_out = stdout(&stats);
    for task in ["chat", "code", "math", "agent"] {
        assert!(stats_out.contains(task), "stats must list task {task}:\n{stats_out}");
    }
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let no_args = bin().output().expect("binary runs");
    assert_exit(&no_args, 1, "no arguments");

    let unknown = bin().arg("frobnicate").output().expect("binary runs");
    assert_exit(&unknown, 1, "unknown subcommand");

    let missing_flag = bin()
        .args(["pack", "--config", "x.toml"])
        .output()
        .expect("binary runs");
    assert_exit(&missing_flag, 1, "pack without --corpus/--out");

    let help = bin().arg("--help").output().expect("binary runs");
    assert_exit(&help, 0, "--help");
    assert!(stdout(&help).contains("pack"));

    let version = bin().arg("--version").output().expect("binary runs");
    assert_exit(&version, 0, "--version");
}

#[test]
fn rejected_configuration_exits_one() {
    let (dir, _config, corpus) = scratch_workspace();

    let bogus = dir.path().join("bogus.toml");
    std::fs::write(&bogus, "[pipeline]\nstrategy = \"warp\"\n").expect("config writes");
    let run = bin()
        .args(["pack", "--config"])
        .arg(&bogus)
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(dir.path().join("x.moipack"))
        .output()
        .expect("binary runs");
    assert_exit(&run, 1, "unknown strategy");
    assert!(stderr(&run).contains("warp"), "error should name the bad strategy");

    // Chunk-level masking over unstructured packing is refused outright:
    // with no task mixing inside the pack it would change nothing.
    let noop = dir.path().join("noop.toml");
    std::fs::write(
        &noop,
        "[pipeline]\nstrategy = \"packed\"\nmask_regime = \"chunk\"\n",
    )
    .expect("config writes");
    let run = bin()
        .args(["pack", "--config"])
        .arg(&noop)
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(dir.path().join("y.moipack"))
        .output()
        .expect("binary runs");
    assert_exit(&run, 1, "packed + chunk regime");
    assert!(stderr(&run).contains("chunk"));
}

#[test]
fn missing_inputs_exit_three() {
    let (dir, config, _corpus) = scratch_workspace();

    let verify = bin()
        .args(["verify", "--in"])
        .arg(dir.path().join("absent.moipack"))
        .output()
        .expect("binary runs");
    assert_exit(&verify, 3, "verify on a missing container");

    let pack = bin()
        .args(["pack", "--config"])
        .arg(&config)
        .arg("--corpus")
        .arg(dir.path().join("absent.jsonl"))
        .arg("--out")
        .arg(dir.path().join("z.moipack"))
        .output()
        .expect("binary runs");
    assert_exit(&pack, 3, "pack on a missing corpus");
}

/// Locate an array's absolute file offset through the container header.
fn array_file_offset(bytes: &[u8], name: &str) -> usize {
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[16..16 + header_len]).expect("header is JSON");
    let arrays = header["arrays"].as_array().expect("arrays directory");
    let info = arrays
        .iter()
        .find(|a| a["name"] == name)
        .unwrap_or_else(|| panic!("array {name} in directory"));
    16 + header_len + info["offset"].as_u64().unwrap() as usize
}

#[test]
fn damaged_container_exits_two_and_broken_container_exits_three() {
    let (dir, config, corpus) = scratch_workspace();
    let container = pack_container(&dir, &config, &corpus);
    let pristine = std::fs::read(&container).expect("container reads");

    // Flip one stored byte: structure stays readable, so this must surface
    // as verification findings, not as a hard read error.
    let mut tampered = pristine.clone();
    let at = array_file_offset(&tampered, "scheme");
    tampered[at] ^= 0xFF;
    let damaged = dir.path().join("damaged.moipack");
    std::fs::write(&damaged, &tampered).expect("tampered copy writes");
    let verify = bin()
        .args(["verify", "--in"])
        .arg(&damaged)
        .output()
        .expect("binary runs");
    assert_exit(&verify, 2, "verify on a tampered container");
    assert!(
        stdout(&verify).contains("FAIL"),
        "findings must be printed:\n{}",
        stdout(&verify)
    );

    // Destroy the magic: the file is no longer a container at all.
    let mut broken = pristine.clone();
    broken[0] ^= 0xFF;
    let not_a_container = dir.path().join("broken.moipack");
    std::fs::write(&not_a_container, &broken).expect("broken copy writes");
    let verify = bin()
        .args(["verify", "--in"])
        .arg(&not_a_container)
        .output()
        .expect("binary runs");
    assert_exit(&verify, 3, "verify on a non-container");
}

#[test]
fn thread_cap_is_honored_and_validated() {
    let (dir, config, corpus) = scratch_workspace();

    let out = dir.path().join("single.moipack");
    let run = bin()
        .env("MOI_PACK_THREADS", "1")
        .args(["pack", "--config"])
        .arg(&config)
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(&out)
        .output()
        .expect("binary runs");
    assert_exit(&run, 0, "pack under MOI_PACK_THREADS=1");

    let run = bin()
        .env("MOI_PACK_THREADS", "several")
        .args(["stats", "--corpus"])
        .arg(&corpus)
        .output()
        .expect("binary runs");
    assert_exit(&run, 1, "non-numeric MOI_PACK_THREADS");
    assert!(stderr(&run).contains("MOI_PACK_THREADS"));
}
