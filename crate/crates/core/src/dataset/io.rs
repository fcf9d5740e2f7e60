use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Dataset, IdMap, Log};
use crate::numeric::SparseAdjacency;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadOptions {
    /// Keep the first of repeated (student, exercise) logs instead of
    /// rejecting the file.
    pub dedupe: bool,
    /// Drop students with fewer logs than this.
    pub min_logs_per_student: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct LogRow {
    student_id: String,
    exercise_id: String,
    response: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct QRow {
    exercise_id: String,
    concept_id: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct DependencyRow {
    concept_id: String,
    prerequisite_concept_id: String,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| Error::parse(path, e))
}

#[derive(Default)]
struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Loads logs, Q-matrix and (optionally) dependencies from CSV.
///
/// Exercises and concepts are indexed in order of first appearance in the
/// Q-matrix file; students in order of first appearance in the logs.
pub fn load_dataset(
    logs_path: &Path,
    q_path: &Path,
    dep_path: Option<&Path>,
    options: &LoadOptions,
) -> Result<Dataset> {
    let q_rows: Vec<QRow> = read_rows(q_path)?;
    let mut exercises = Interner::default();
    let mut concepts = Interner::default();
    let mut q_pairs = Vec::with_capacity(q_rows.len());
    for row in &q_rows {
        q_pairs.push((exercises.intern(&row.exercise_id), concepts.intern(&row.concept_id)));
    }

    let mut dep_pairs = Vec::new();
    if let Some(dep_path) = dep_path {
        let rows: Vec<DependencyRow> = read_rows(dep_path)?;
        let mut unknown = Vec::new();
        for row in &rows {
            if row.concept_id == row.prerequisite_concept_id {
                return Err(Error::Validation(format!(
                    "concept {} is listed as its own prerequisite",
                    row.concept_id
                )));
            }
            match (concepts.get(&row.concept_id), concepts.get(&row.prerequisite_concept_id)) {
                (Some(k), Some(m)) => dep_pairs.push((k, m)),
                _ => unknown.push(format!("{}->{}", row.concept_id, row.prerequisite_concept_id)),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Validation(format!(
                "dependency rows reference concepts absent from the Q-matrix: {}",
                unknown.join(", ")
            )));
        }
    }

    let log_rows: Vec<LogRow> = read_rows(logs_path)?;
    let mut raw = Vec::with_capacity(log_rows.len());
    let mut missing = Vec::new();
    for row in &log_rows {
        let response = match row.response.as_str() {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::Validation(format!(
                    "response `{other}` for student {} on exercise {} is not 0 or 1",
                    row.student_id, row.exercise_id
                )))
            }
        };
        match exercises.get(&row.exercise_id) {
            Some(j) => raw.push((row.student_id.as_str(), j, response)),
            None => missing.push(row.exercise_id.clone()),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Validation(format!(
            "logs reference exercises with no concept in the Q-matrix: {}",
            missing.join(", ")
        )));
    }

    if options.dedupe {
        let mut seen = HashSet::new();
        raw.retain(|&(s, j, _)| seen.insert((s, j)));
    }
    if options.min_logs_per_student > 0 {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for &(s, _, _) in &raw {
            *counts.entry(s).or_default() += 1;
        }
        raw.retain(|(s, _, _)| counts[s] >= options.min_logs_per_student);
    }

    let mut students = Interner::default();
    let logs: Vec<Log> = raw
        .iter()
        .map(|&(s, j, r)| Log::new(students.intern(s), j, r))
        .collect();

    let (n, m, k) = (students.names.len(), exercises.names.len(), concepts.names.len());
    let q = SparseAdjacency::from_pattern(m, k, q_pairs).map_err(|e| Error::parse(q_path, e))?;
    let d = SparseAdjacency::from_pattern(k, k, dep_pairs)?;
    let ids = IdMap {
        students: students.names,
        exercises: exercises.names,
        concepts: concepts.names,
    };
    Dataset::new(n, m, k, logs, Arc::new(q), Arc::new(d), Arc::new(ids))
}

/// Writes `logs.csv`, `q.csv`, `dependency.csv` and `ids.json` into `dir`
/// using external ids.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids = dataset.ids();

    let path = dir.join("logs.csv");
    write_rows(
        &path,
        dataset.logs().iter().map(|l| LogRow {
            student_id: ids.students[l.student].clone(),
            exercise_id: ids.exercises[l.exercise].clone(),
            response: l.response.to_string(),
        }),
    )?;
    let path = dir.join("q.csv");
    write_rows(
        &path,
        dataset.q_matrix().iter().map(|(j, k, _)| QRow {
            exercise_id: ids.exercises[j].clone(),
            concept_id: ids.concepts[k].clone(),
        }),
    )?;
    let path = dir.join("dependency.csv");
    write_rows(
        &path,
        dataset.dependency().iter().map(|(k, m, _)| DependencyRow {
            concept_id: ids.concepts[k].clone(),
            prerequisite_concept_id: ids.concepts[m].clone(),
        }),
    )?;
    write_json(&dir.join("ids.json"), ids.as_ref())
}

fn write_rows<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let mut wrote = false;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::parse(path, e))?;
        wrote = true;
    }
    if !wrote {
        // csv only emits headers with the first record
        drop(writer);
        let header = if path.ends_with("dependency.csv") {
            "concept_id,prerequisite_concept_id\n"
        } else if path.ends_with("q.csv") {
            "exercise_id,concept_id\n"
        } else {
            "student_id,exercise_id,response\n"
        };
        std::fs::write(path, header).map_err(|e| Error::io(path, e))?;
        return Ok(());
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_and_remaps_ids() {
        let dir = tempfile::tempdir().unwrap();
        let logs = write(
            dir.path(),
            "logs.csv",
            "student_id,exercise_id,response\nalice,ex9,1\nbob,ex9,0\nalice,ex2,0\n",
        );
        let q = write(dir.path(), "q.csv", "exercise_id,concept_id\nex2,add\nex9,add\nex9,mul\n");
        let d = write(dir.path(), "d.csv", "concept_id,prerequisite_concept_id\nmul,add\n");
        let ds = load_dataset(&logs, &q, Some(&d), &LoadOptions::default()).unwrap();
        assert_eq!((ds.n_students(), ds.n_exercises(), ds.n_concepts()), (2, 2, 2));
        assert_eq!(ds.ids().students, vec!["alice", "bob"]);
        assert_eq!(ds.ids().exercises, vec!["ex2", "ex9"]);
        assert_eq!(ds.logs()[0], Log::new(0, 1, 1));
        assert!(ds.dependency().contains(1, 0));
    }

    #[test]
    fn unknown_exercise_and_bad_response_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let q = write(dir.path(), "q.csv", "exercise_id,concept_id\ne1,k1\n");
        let logs = write(dir.path(), "l.csv", "student_id,exercise_id,response\ns,e2,1\n");
        let err = load_dataset(&logs, &q, None, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("e2")), "{err}");
        let logs = write(dir.path(), "l2.csv", "student_id,exercise_id,response\ns,e1,2\n");
        assert!(matches!(
            load_dataset(&logs, &q, None, &LoadOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn self_dependency_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let q = write(dir.path(), "q.csv", "exercise_id,concept_id\ne1,k1\n");
        let logs = write(dir.path(), "l.csv", "student_id,exercise_id,response\ns,e1,1\n");
        let d = write(dir.path(), "d.csv", "concept_id,prerequisite_concept_id\nk1,k1\n");
        assert!(matches!(
            load_dataset(&logs, &q, Some(&d), &LoadOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_dataset(
            Path::new("/nonexistent/logs.csv"),
            Path::new("/nonexistent/q.csv"),
            None,
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/q.csv"));
    }

    #[test]
    fn duplicates_rejected_unless_deduped() {
        let dir = tempfile::tempdir().unwrap();
        let q = write(dir.path(), "q.csv", "exercise_id,concept_id\ne1,k1\n");
        let logs = write(dir.path(), "l.csv", "student_id,exercise_id,response\ns,e1,1\ns,e1,0\n");
        assert!(load_dataset(&logs, &q, None, &LoadOptions::default()).is_err());
        let opts = LoadOptions {
            dedupe: true,
            ..Default::default()
        };
        let ds = load_dataset(&logs, &q, None, &opts).unwrap();
        assert_eq!(ds.logs(), &[Log::new(0, 0, 1)]);
    }

    #[test]
    fn write_then_load_round_trips() {
        let ds = super::super::fixtures::tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(
            &dir.path().join("logs.csv"),
            &dir.path().join("q.csv"),
            Some(&dir.path().join("dependency.csv")),
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(back, ds);
    }
}
