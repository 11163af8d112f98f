use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{IntentClassifier, Prediction};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Scores {
    List(Vec<f64>),
    Map(BTreeMap<String, f64>),
}

#[derive(Deserialize)]
struct Response {
    intent: String,
    #[serde(default)]
    scores: Option<Scores>,
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A classifier living in another process. Each request is one JSON line
/// `{"text": ...}` on its stdin; each answer one JSON line
/// `{"intent": ..., "scores": [...] | {intent: score}}` on its stdout.
pub struct ExternalClassifier {
    classes: Vec<String>,
    pipe: Mutex<Pipe>,
}

impl ExternalClassifier {
    pub fn spawn(program: &str, args: &[String], classes: Vec<String>) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("failed to start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            classes,
            pipe: Mutex::new(Pipe {
                child,
                stdin,
                stdout,
            }),
        })
    }

    fn scores_in_class_order(&self, intent: &str, scores: Option<Scores>) -> Vec<f64> {
        match scores {
            Some(Scores::List(v)) => v,
            Some(Scores::Map(m)) => self
                .classes
                .iter()
                .map(|c| m.get(c).copied().unwrap_or(0.0))
                .collect(),
            None => self
                .classes
                .iter()
                .map(|c| if c == intent { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

impl IntentClassifier for ExternalClassifier {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn predict(&self, text: &str) -> Result<Prediction> {
        let mut pipe = self.pipe.lock().expect("external classifier lock");
        let mut line = serde_json::to_string(&Request { text })?;
        line.push('\n');
        pipe.stdin
            .write_all(line.as_bytes())
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| Error::External(format!("write failed: {e}")))?;
        let mut answer = String::new();
        let read = pipe
            .stdout
            .read_line(&mut answer)
            .map_err(|e| Error::External(format!("read failed: {e}")))?;
        if read == 0 {
            return Err(Error::External("classifier process closed its output".into()));
        }
        let response: Response = serde_json::from_str(answer.trim())
            .map_err(|e| Error::External(format!("bad response {answer:?}: {e}")))?;
        if !self.classes.iter().any(|c| c == &response.intent) {
            return Err(Error::External(format!(
                "unknown intent `{}` in response",
                response.intent
            )));
        }
        let scores = self.scores_in_class_order(&response.intent, response.scores);
        Ok(Prediction {
            intent: response.intent,
            scores,
        })
    }
}

impl Drop for ExternalClassifier {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            let _ = pipe.child.kill();
            let _ = pipe.child.wait();
        }
    }
}
