use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use poact_bench::oracle::poact_script;
use poact_bench::world::{generate, SyntheticTask, TaskCounts};
use poact_bench::write_world;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_poact");

fn shipped() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A copy of the shipped config whose registry is the seed-7 world.
struct Fixture {
    dir: TempDir,
    tasks: Vec<SyntheticTask>,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        copy_dir(&shipped(), dir.path());
        let (world, tasks) = generate(7, TaskCounts::default());
        write_world(dir.path(), &world, &tasks).unwrap();
        Fixture { dir, tasks }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("poact.toml")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn task(&self, id: &str) -> &SyntheticTask {
        self.tasks.iter().find(|t| t.id == id).unwrap()
    }

    fn script_for(&self, id: &str) -> PathBuf {
        let path = self.path(&format!("{id}.script.json"));
        let script = poact_script(self.task(id)).unwrap();
        std::fs::write(&path, serde_json::to_string(&script).unwrap()).unwrap();
        path
    }

    fn edit(&self, name: &str, f: impl FnOnce(String) -> String) {
        let path = self.path(name);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(path, f(text)).unwrap();
    }

    fn poact(&self, args: &[&str]) -> Output {
        let config = self.config();
        let mut full = vec!["--config", config.to_str().unwrap()];
        full.extend_from_slice(args);
        poact(&full)
    }
}

fn poact(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shipped_config_validates() {
    let config = shipped().join("poact.toml");
    let o = poact(&["--config", config.to_str().unwrap(), "validate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("ok"));
}

#[test]
fn rule_table_without_default_fails_naming_the_file() {
    let f = Fixture::new();
    f.edit("error_rules.json", |t| {
        let mut rules: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&t).unwrap();
        rules.remove("default");
        serde_json::to_string(&rules).unwrap()
    });
    let o = f.poact(&["validate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error_rules.json"), "{}", stderr(&o));
    assert!(stderr(&o).contains("default"), "{}", stderr(&o));
}

#[test]
fn unknown_placeholder_fails_naming_it_and_all_issues_are_reported() {
    let f = Fixture::new();
    f.edit("prompts/thought.tmpl", |t| t + "\n<<oops>>\n");
    f.edit("triggers.json", |_| "[{\"id\": \"x\", \"kind\": \"keyword\", \"hint\": \"h\"}]".into());
    let o = f.poact(&["validate"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("<<oops>>") && err.contains("thought.tmpl"), "{err}");
    assert!(err.contains("triggers.json"), "{err}");
}

#[test]
fn scripted_one_hop_run_prints_the_answer() {
    let f = Fixture::new();
    let task = f.task("hop1-000");
    let script = f.script_for("hop1-000");
    let logs = f.path("logs");
    let o = f.poact(&[
        "--log-dir",
        logs.to_str().unwrap(),
        "run",
        "--script",
        script.to_str().unwrap(),
        &task.query,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // keyword is the traced terminal value from the generator
    assert_eq!(stdout(&o).trim(), task.expected_keywords[0]);
    assert!(logs.join("query.jsonl").exists());
}

#[test]
fn run_logs_are_byte_identical_across_runs() {
    let f = Fixture::new();
    let task = f.task("hop3-000");
    let script = f.script_for("hop3-000");
    let mut logs = Vec::new();
    for i in 0..2 {
        let dir = f.path(&format!("logs{i}"));
        let o = f.poact(&["--log-dir", dir.to_str().unwrap(), "run", "--script", script.to_str().unwrap(), &task.query]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        logs.push(std::fs::read(dir.join("query.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn step_limit_exit_code_and_partial_log() {
    let f = Fixture::new();
    let task = f.task("hop3-000");
    let script = f.script_for("hop3-000");
    let logs = f.path("logs");
    let o = f.poact(&[
        "--log-dir",
        logs.to_str().unwrap(),
        "--step-limit",
        "1",
        "run",
        "--script",
        script.to_str().unwrap(),
        &task.query,
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let log = std::fs::read_to_string(logs.join("query.jsonl")).unwrap();
    assert!(log.contains("\"role\":\"thought\""));
}

#[test]
fn missing_template_directory_is_a_config_error_before_any_backend_call() {
    let f = Fixture::new();
    f.edit("poact.toml", |t| {
        t.replace("prompt_dir = \"prompts\"", "prompt_dir = \"no-such-prompts\"")
            .replace("provider = \"scripted\"", "provider = \"http\"\nendpoint = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"")
    });
    let o = f.poact(&["run", "anything"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("no-such-prompts"));
}

fn error_line(step: u32, message: &str) -> String {
    let content = format!(
        "Error (name-error): {message}\nPossible cause: c\nSuggested solution: s"
    );
    serde_json::json!({"role": "error", "content": content, "step": step}).to_string()
}

fn line(role: &str, content: &str, step: u32) -> String {
    serde_json::json!({"role": role, "content": content, "step": step}).to_string()
}

fn repeated_error_log() -> Vec<String> {
    vec![
        line("query", "q", 0),
        line("plan", "p", 0),
        line("thought", "t", 1),
        line("code", "a = 1", 1),
        line("observation", "(no output)", 1),
        line("thought", "t", 2),
        line("code", "print(x)", 2),
        error_line(2, "name 'x' is not defined"),
        line("thought", "t", 3),
        line("code", "print(x)", 3),
        error_line(3, "name 'x' is not defined"),
        line("thought", "t", 4),
        line("code", "print(x)", 4),
    ]
}

#[test]
fn replay_check_reports_backtrack_target() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    std::fs::write(&path, repeated_error_log().join("\n")).unwrap();
    let o = poact(&["replay", "--check", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("code at step 4 (line 13): would backtrack to step 1; log: none"), "{}", stdout(&o));
}

#[test]
fn replay_marks_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut log = repeated_error_log();
    log.push(
        serde_json::json!({
            "role": "error",
            "content": "Error (backtrack): repeated\nPossible cause: c\nSuggested solution: s",
            "step": 2
        })
        .to_string(),
    );
    std::fs::write(&path, log.join("\n")).unwrap();
    let o = poact(&["replay", "--check", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("---- truncated: steps 2..=4 discarded, resuming after step 1 ----"), "{out}");
    assert!(out.contains("decisions: backtrack at step 2"), "{out}");
    assert!(out.contains("[agrees]"), "{out}");
}

#[test]
fn replay_of_empty_file_fails_at_line_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let o = poact(&["replay", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn bench_run_writes_reports_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = poact(&[
        "bench",
        "run",
        "--strategy",
        "all",
        "--seed",
        "3",
        "--per-hop",
        "1",
        "--knowledge",
        "1",
        "--workers",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert_eq!(stdout(&o), table);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 4);
    for run in report["runs"].as_array().unwrap() {
        assert_eq!(run["all"]["pass_rate"], 1.0, "{}", run["strategy"]);
        for task in run["tasks"].as_array().unwrap() {
            assert!(Path::new(task["log_path"].as_str().unwrap()).exists());
        }
    }
}

#[test]
fn bench_generate_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = poact(&["bench", "generate", "--seed", "5", "--scripts", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tasks = poact_bench::load_tasks(&dir.path().join("tasks.json")).unwrap();
    assert_eq!(tasks.len(), TaskCounts::default().total());
    assert!(dir.path().join("scripts/hop5-000.json").exists());
}
