//! JSONL task files. Latents travel separately in `latents.json` so a task
//! file can be handed to anything without leaking preferences.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{EnvError, Environment, EnvironmentSpec};
use crate::types::{parse_task_line, TaskInstance};

fn io_err(path: &Path, e: impl std::fmt::Display) -> EnvError {
    EnvError::Io(format!("{}: {e}", path.display()))
}

pub fn write_tasks_jsonl(path: &Path, tasks: &[TaskInstance]) -> Result<(), EnvError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tasks {
        let line = serde_json::to_string(t).map_err(|e| io_err(path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<TaskInstance>, EnvError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut tasks = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task = parse_task_line(&line).map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// Write `train.jsonl`, `eval.jsonl` and `latents.json` into `dir`.
pub fn export_dataset(env: &Environment, dir: &Path) -> Result<(), EnvError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_tasks_jsonl(&dir.join("train.jsonl"), env.train())?;
    write_tasks_jsonl(&dir.join("eval.jsonl"), env.eval())?;
    let latents = dir.join("latents.json");
    let json = serde_json::to_string_pretty(env.spec()).map_err(|e| io_err(&latents, e))?;
    fs::write(&latents, json).map_err(|e| io_err(&latents, e))
}

pub fn import_dataset(dir: &Path) -> Result<Environment, EnvError> {
    let latents = dir.join("latents.json");
    let text = fs::read_to_string(&latents).map_err(|e| io_err(&latents, e))?;
    let spec: EnvironmentSpec = serde_json::from_str(&text).map_err(|e| io_err(&latents, e))?;
    let train = read_tasks_jsonl(&dir.join("train.jsonl"))?;
    let eval = read_tasks_jsonl(&dir.join("eval.jsonl"))?;
    Environment::from_parts(spec, train, eval)
}
