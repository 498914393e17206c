//! Greedy generation over a dataset and score reports.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::{Mode, Task};
use crate::data::Triplet;
use crate::error::Result;
use crate::metrics::Scores;
use crate::model::{Decoded, Model};

/// Greedy decodes `task` for every triplet.
pub fn generate(model: &Model, triplets: &[Triplet], task: Task) -> Result<Vec<Decoded>> {
    triplets.iter().map(|t| model.greedy_decode(task, &t.context, t.counterpart(task))).collect()
}

/// Fraction of generations equal to their reference.
pub fn exact_match(decoded: &[Decoded], triplets: &[Triplet], task: Task) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let hits = decoded.iter().zip(triplets).filter(|(d, t)| d.tokens == t.target(task)).count();
    hits as f64 / triplets.len() as f64
}

pub fn score(decoded: &[Decoded], triplets: &[Triplet], task: Task, corpus_bleu: bool, rouge_beta: f64) -> Scores {
    let pairs: Vec<(&[String], &[String])> =
        decoded.iter().zip(triplets).map(|(d, t)| (&d.tokens[..], t.target(task))).collect();
    Scores::compute(&pairs, corpus_bleu, rouge_beta)
}

fn matrix_text<'r>(rows: impl Iterator<Item = &'r [f64]>) -> String {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).expect("write to string");
    }
    out
}

/// Writes the score matrices of one generation as whitespace-separated
/// text: `{task}-{index}.first.txt` (context rows by counterpart columns)
/// and `{task}-{index}.second.txt` (one row per emitted step).
pub fn dump_attention(dir: &Path, task: Task, index: usize, decoded: &Decoded) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}-{index}", task.name());
    if let Some(first) = &decoded.first_scores {
        std::fs::write(dir.join(format!("{stem}.first.txt")), matrix_text((0..first.rows()).map(|r| first.row(r))))?;
    }
    let second = matrix_text(decoded.second_scores.iter().map(Vec::as_slice));
    std::fs::write(dir.join(format!("{stem}.second.txt")), second)?;
    Ok(())
}

/// One line of a report: a model's scores on one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    pub task: Task,
    pub scores: Scores,
    pub exact: f64,
}

/// Scores every direction `model` carries.
pub fn evaluate(model: &Model, triplets: &[Triplet], corpus_bleu: bool, rouge_beta: f64) -> Result<Vec<ReportRow>> {
    model
        .config
        .mode
        .tasks()
        .iter()
        .map(|&task| {
            let decoded = generate(model, triplets, task)?;
            Ok(ReportRow {
                mode: model.config.mode,
                task,
                scores: score(&decoded, triplets, task, corpus_bleu, rouge_beta),
                exact: exact_match(&decoded, triplets, task),
            })
        })
        .collect()
}

/// Tab-separated table with a header line; scores are percentages.
pub struct Report<'r>(pub &'r [ReportRow]);

impl Report<'_> {
    pub const HEADER: &'static str = "model\ttask\tB1\tB2\tB3\tB4\tRL\tEM";
}

impl fmt::Display for Report<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Report::HEADER)?;
        for row in self.0 {
            writeln!(
                f,
                "{}\t{}\t{}\t{:.2}",
                row.mode.name(),
                row.task.name().to_uppercase(),
                row.scores,
                100.0 * row.exact
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::embedding::build_vocabulary;

    #[test]
    fn report_has_a_row_per_direction() {
        let data = vec![Triplet::new("a", "who sat ?", "the cat sat .", "the cat")];
        let vocab = build_vocabulary(data.iter().flat_map(|t| [&t.context[..], &t.question[..], &t.answer[..]]), 1);
        let cfg = ModelConfig { gen_hidden: 8, decode_cap: 4, ..ModelConfig::tiny() };
        let model = Model::new(cfg.clone(), vocab.clone()).unwrap();
        let rows = evaluate(&model, &data, false, 1.0).unwrap();
        assert_eq!(rows.iter().map(|r| r.task).collect::<Vec<_>>(), vec![Task::Qa, Task::Qg]);
        let mono = Model::new(ModelConfig { mode: Mode::QgOnly, ..cfg }, vocab).unwrap();
        let rows = [rows, evaluate(&mono, &data, false, 1.0).unwrap()].concat();
        let text = Report(&rows).to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("qg-only\tQG\t"));
        assert!(lines.iter().all(|l| l.split('\t').count() == 8));
    }

    #[test]
    fn attention_dump_is_numeric_text() {
        let first = crate::Tensor::from_rows(&[vec![0.25, 0.75], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let d = Decoded {
            tokens: vec![],
            ids: vec![],
            first_scores: Some(first),
            second_scores: vec![vec![0.2, 0.3, 0.5]],
        };
        let dir = tempfile::tempdir().unwrap();
        dump_attention(dir.path(), Task::Qg, 7, &d).unwrap();
        let parse = |name: &str| -> Vec<Vec<f64>> {
            std::fs::read_to_string(dir.path().join(name))
                .unwrap()
                .lines()
                .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
                .collect()
        };
        assert_eq!(parse("qg-7.first.txt"), vec![vec![0.25, 0.75], vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert_eq!(parse("qg-7.second.txt"), vec![vec![0.2, 0.3, 0.5]]);
    }

    #[test]
    fn exact_match_counts_identical_outputs() {
        let t = Triplet::new("a", "q ?", "x y", "x");
        let hit = Decoded { tokens: vec!["x".into()], ids: vec![4], first_scores: None, second_scores: vec![] };
        let miss = Decoded { tokens: vec![], ..hit.clone() };
        assert_eq!(exact_match(&[hit, miss], &[t.clone(), t], Task::Qa), 0.5);
    }
}
