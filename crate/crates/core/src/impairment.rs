//! Delay and fault injection keyed by (functionality, step, invocation).
//!
//! Plans are CSV files with the header
//! `functionality,step,invocation_index,action,value`. Every consultation of
//! a (functionality, step) pair bumps a global counter; a rule fires when the
//! counter equals its invocation index.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::error::{Error, Result};

const HEADER: [&str; 5] = ["functionality", "step", "invocation_index", "action", "value"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImpairmentAction {
    /// Sleep this many milliseconds before the step runs.
    Delay(u64),
    /// Raise the named error instead of running the step.
    Fail(String),
}

impl ImpairmentAction {
    pub fn kind(&self) -> &'static str {
        match self {
            ImpairmentAction::Delay(_) => "DELAY",
            ImpairmentAction::Fail(_) => "FAIL",
        }
    }

    pub fn value(&self) -> String {
        match self {
            ImpairmentAction::Delay(ms) => ms.to_string(),
            ImpairmentAction::Fail(name) => name.clone(),
        }
    }
}

impl fmt::Display for ImpairmentAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind(), self.value())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpairmentRule {
    pub functionality: String,
    pub step: String,
    pub invocation_index: u64,
    pub action: ImpairmentAction,
}

/// One fired rule, as written to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    /// Milliseconds since the handler was created.
    pub ts: u64,
    pub functionality: String,
    pub step: String,
    pub invocation: u64,
    pub action: String,
    pub value: String,
}

#[derive(Debug, Default)]
pub struct ImpairmentHandler {
    origin: OnceLock<Instant>,
    rules: RwLock<Vec<ImpairmentRule>>,
    counters: Mutex<HashMap<(String, String), u64>>,
    fired: Mutex<Vec<ReportEntry>>,
    report_path: RwLock<Option<PathBuf>>,
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedPlan { line, reason: reason.into() }
}

/// Parses one plan file. Line numbers in errors are 1-based and count the header.
pub fn parse_plan(text: &str) -> Result<Vec<ImpairmentRule>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(malformed(1, format!("expected header {}", HEADER.join(","))));
    }
    let mut rules = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| malformed(line, e.to_string()))?;
        if row.len() != HEADER.len() {
            return Err(malformed(line, format!("expected 5 fields, found {}", row.len())));
        }
        let (functionality, step) = (&row[0], &row[1]);
        if functionality.is_empty() || step.is_empty() {
            return Err(malformed(line, "empty functionality or step"));
        }
        let invocation_index: u64 =
            row[2].parse().map_err(|_| malformed(line, format!("invalid invocation index {:?}", &row[2])))?;
        if invocation_index == 0 {
            return Err(malformed(line, "invocation index starts at 1"));
        }
        let action = match &row[3] {
            "DELAY" => ImpairmentAction::Delay(
                row[4].parse().map_err(|_| malformed(line, format!("invalid delay {:?}", &row[4])))?,
            ),
            "FAIL" if !row[4].is_empty() => ImpairmentAction::Fail(row[4].to_string()),
            "FAIL" => return Err(malformed(line, "FAIL needs an error name")),
            other => return Err(malformed(line, format!("unknown action {other:?}"))),
        };
        rules.push(ImpairmentRule { functionality: functionality.to_string(), step: step.to_string(), invocation_index, action });
    }
    Ok(rules)
}

impl ImpairmentHandler {
    pub fn new() -> Self {
        Self::default()
    }

    fn now_ms(&self) -> u64 {
        let origin = *self.origin.get_or_init(Instant::now);
        Instant::now().saturating_duration_since(origin).as_millis() as u64
    }

    /// Replaces the active rules and resets every counter.
    pub fn set_rules(&self, rules: Vec<ImpairmentRule>) {
        *self.rules.write() = rules;
        self.counters.lock().clear();
        self.fired.lock().clear();
    }

    pub fn rules(&self) -> Vec<ImpairmentRule> {
        self.rules.read().clone()
    }

    /// Loads a single plan file in place of the current rules.
    pub fn load_plan(&self, path: &Path) -> Result<usize> {
        let rules = parse_plan(&std::fs::read_to_string(path)?)?;
        let n = rules.len();
        self.set_rules(rules);
        Ok(n)
    }

    /// Loads every `*.csv` in `dir`, in file name order, in place of the current rules.
    pub fn load_dir(&self, dir: &Path) -> Result<usize> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        let mut rules = Vec::new();
        for f in files {
            rules.extend(parse_plan(&std::fs::read_to_string(f)?)?);
        }
        let n = rules.len();
        self.set_rules(rules);
        Ok(n)
    }

    /// Fired rules are also appended to this file as JSONL.
    pub fn set_report_path(&self, path: Option<PathBuf>) {
        *self.report_path.write() = path;
    }

    /// Counts one invocation of the step and returns the action scheduled for it.
    pub fn consult(&self, functionality: &str, step: &str) -> Option<ImpairmentAction> {
        let rules = self.rules.read();
        if rules.is_empty() {
            return None;
        }
        let invocation = {
            let mut counters = self.counters.lock();
            let c = counters.entry((functionality.to_string(), step.to_string())).or_insert(0);
            *c += 1;
            *c
        };
        let rule = rules
            .iter()
            .find(|r| r.functionality == functionality && r.step == step && r.invocation_index == invocation)?;
        let entry = ReportEntry {
            ts: self.now_ms(),
            functionality: functionality.to_string(),
            step: step.to_string(),
            invocation,
            action: rule.action.kind().to_string(),
            value: rule.action.value(),
        };
        if let Some(path) = self.report_path.read().as_ref() {
            if let Err(e) = append_jsonl(path, &entry) {
                tracing::warn!(path = %path.display(), error = %e, "could not write impairment report");
            }
        }
        self.fired.lock().push(entry);
        Some(rule.action.clone())
    }

    /// Rules fired since the last load.
    pub fn report(&self) -> Vec<ReportEntry> {
        self.fired.lock().clone()
    }

    pub fn invocations(&self, functionality: &str, step: &str) -> u64 {
        self.counters.lock().get(&(functionality.to_string(), step.to_string())).copied().unwrap_or(0)
    }
}

fn append_jsonl(path: &Path, entry: &ReportEntry) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(entry)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalitySpec {
    pub name: String,
    pub steps: Vec<String>,
}

/// Input to [`generate_plans`]: every listed action is tried on every step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub functionalities: Vec<FunctionalitySpec>,
    pub actions: Vec<ImpairmentAction>,
}

/// Writes `<functionality>.csv` into `dir` for each functionality, holding
/// the step × action cross product. Row k (1-based) is scenario k and fires
/// on the k-th invocation of its step.
pub fn generate_plans(spec: &PlanSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    if spec.functionalities.is_empty() || spec.actions.is_empty() || spec.functionalities.iter().any(|f| f.steps.is_empty()) {
        return Err(Error::EmptySpec);
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in &spec.functionalities {
        let path = dir.join(format!("{}.csv", f.name));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io(e.to_string()))?;
        w.write_record(HEADER).map_err(|e| Error::Io(e.to_string()))?;
        let mut scenario = 0u64;
        for step in &f.steps {
            for action in &spec.actions {
                scenario += 1;
                w.write_record([f.name.as_str(), step, &scenario.to_string(), action.kind(), &action.value()])
                    .map_err(|e| Error::Io(e.to_string()))?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAN: &str = "functionality,step,invocation_index,action,value\n\
        addParticipant,addParticipantStep,1,FAIL,SimulatedCrash\n\
        addParticipant,getUserStep,2,DELAY,25\n";

    #[test]
    fn loads_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, PLAN).unwrap();
        let h = ImpairmentHandler::new();
        assert_eq!(h.load_plan(&path).unwrap(), 2);
    }

    #[test]
    fn rejects_bad_rows() {
        for (body, line) in [
            ("a,b,1,DELAY,-5", 2),
            ("a,b,0,FAIL,X", 2),
            ("a,b,1,EXPLODE,1", 2),
            ("a,b,1,FAIL,X\na,b,x,FAIL,X", 3),
            ("a,b,1", 2),
        ] {
            let text = format!("{}\n{body}\n", HEADER.join(","));
            match parse_plan(&text) {
                Err(Error::MalformedPlan { line: l, .. }) => assert_eq!(l, line, "{body}"),
                other => panic!("{body}: {other:?}"),
            }
        }
        assert!(matches!(parse_plan("a,b,c\n"), Err(Error::MalformedPlan { line: 1, .. })));
    }

    #[test]
    fn fires_once_on_its_invocation() {
        let h = ImpairmentHandler::new();
        h.set_rules(parse_plan(PLAN).unwrap());
        assert_eq!(h.consult("addParticipant", "addParticipantStep"), Some(ImpairmentAction::Fail("SimulatedCrash".into())));
        assert_eq!(h.consult("addParticipant", "addParticipantStep"), None);
        assert_eq!(h.consult("addParticipant", "getUserStep"), None);
        assert_eq!(h.consult("addParticipant", "getUserStep"), Some(ImpairmentAction::Delay(25)));
        assert_eq!(h.consult("other", "x"), None);
        assert_eq!(h.report().len(), 2);
    }

    #[test]
    fn reload_resets_counters_and_report_repeats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, PLAN).unwrap();
        let h = ImpairmentHandler::new();
        let run = |h: &ImpairmentHandler| {
            h.load_plan(&path).unwrap();
            for _ in 0..3 {
                h.consult("addParticipant", "addParticipantStep");
                h.consult("addParticipant", "getUserStep");
            }
            h.report().into_iter().map(|e| (e.step, e.invocation, e.action, e.value)).collect::<Vec<_>>()
        };
        let first = run(&h);
        assert_eq!(first, run(&h));
        assert_eq!(first.len(), 2);
    }

    #[test]
    fn report_file_is_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let report = dir.path().join("report.jsonl");
        let h = ImpairmentHandler::new();
        h.set_rules(parse_plan(PLAN).unwrap());
        h.set_report_path(Some(report.clone()));
        h.consult("addParticipant", "addParticipantStep");
        let entry: ReportEntry = serde_json::from_str(std::fs::read_to_string(&report).unwrap().trim()).unwrap();
        assert_eq!((entry.invocation, entry.action.as_str(), entry.value.as_str()), (1, "FAIL", "SimulatedCrash"));
    }

    fn spec(steps: usize, actions: Vec<ImpairmentAction>) -> PlanSpec {
        PlanSpec {
            functionalities: vec![FunctionalitySpec { name: "f".into(), steps: (0..steps).map(|i| format!("s{i}")).collect() }],
            actions,
        }
    }

    #[test]
    fn generator_cardinality() {
        let dir = tempfile::tempdir().unwrap();
        let fail = ImpairmentAction::Fail("SimulatedCrash".into());
        for (steps, actions, rows) in [
            (2, vec![fail.clone(), ImpairmentAction::Delay(10)], 4),
            (1, vec![fail.clone()], 1),
            (3, vec![fail.clone(), ImpairmentAction::Delay(10), ImpairmentAction::Delay(100)], 9),
        ] {
            let files = generate_plans(&spec(steps, actions), dir.path()).unwrap();
            let parsed = parse_plan(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
            assert_eq!(parsed.len(), rows);
            let distinct: std::collections::HashSet<_> =
                parsed.iter().map(|r| (r.step.clone(), r.action.clone())).collect();
            assert_eq!(distinct.len(), rows);
        }
        assert_eq!(generate_plans(&PlanSpec::default(), dir.path()).unwrap_err(), Error::EmptySpec);
    }
}
