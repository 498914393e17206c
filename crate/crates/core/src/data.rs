//! SQuAD-format ingestion, tokenization and dataset statistics.

use std::fmt;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '‘' | '’' | '“' | '”' | '\u{2013}' | '\u{2014}' | '…' | '«' | '»' | '¿' | '¡')
}

/// Lowercases, splits on whitespace and makes every punctuation character
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_punctuation(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub question_text: String,
    pub context_text: String,
    pub answer_text: String,
    pub question: Vec<String>,
    pub context: Vec<String>,
    pub answer: Vec<String>,
}

impl Triplet {
    pub fn new(id: &str, question: &str, context: &str, answer: &str) -> Self {
        Triplet {
            id: id.to_string(),
            question_text: question.to_string(),
            context_text: context.to_string(),
            answer_text: answer.to_string(),
            question: tokenize(question),
            context: tokenize(context),
            answer: tokenize(answer),
        }
    }

    /// The sequence a task decodes.
    pub fn target(&self, task: crate::config::Task) -> &[String] {
        match task {
            crate::config::Task::Qa => &self.answer,
            crate::config::Task::Qg => &self.question,
        }
    }

    /// The sequence a task conditions on besides the context.
    pub fn counterpart(&self, task: crate::config::Task) -> &[String] {
        self.target(task.dual())
    }
}

/// Result of [`parse_squad`].
#[derive(Clone, Debug, Default)]
pub struct Parsed {
    pub triplets: Vec<Triplet>,
    /// Questions skipped because they carried no answer, or because one of
    /// the three sequences tokenized to nothing.
    pub skipped: usize,
}

fn field<'v>(v: &'v Value, key: &str, locator: &str) -> Result<&'v Value> {
    v.get(key).ok_or_else(|| Error::Dataset { locator: locator.to_string(), msg: format!("missing `{key}`") })
}

fn array<'v>(v: &'v Value, key: &str, locator: &str) -> Result<&'v Vec<Value>> {
    field(v, key, locator)?
        .as_array()
        .ok_or_else(|| Error::Dataset { locator: locator.to_string(), msg: format!("`{key}` is not an array") })
}

fn string<'v>(v: &'v Value, key: &str, locator: &str) -> Result<&'v str> {
    field(v, key, locator)?
        .as_str()
        .ok_or_else(|| Error::Dataset { locator: locator.to_string(), msg: format!("`{key}` is not a string") })
}

/// Reads `data → paragraphs → qas` from a SQuAD JSON document: one triplet
/// per question, paired with its first answer.
pub fn parse_squad_str(text: &str) -> Result<Parsed> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Dataset {
        locator: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;
    let mut parsed = Parsed::default();
    for (ai, article) in array(&root, "data", "root")?.iter().enumerate() {
        let loc_a = format!("data[{ai}]");
        for (pi, para) in array(article, "paragraphs", &loc_a)?.iter().enumerate() {
            let loc_p = format!("{loc_a}.paragraphs[{pi}]");
            let context = string(para, "context", &loc_p)?;
            for (qi, qa) in array(para, "qas", &loc_p)?.iter().enumerate() {
                let loc_q = format!("{loc_p}.qas[{qi}]");
                let question = string(qa, "question", &loc_q)?;
                let id = match qa.get("id") {
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                    None => loc_q.clone(),
                };
                let answers = array(qa, "answers", &loc_q)?;
                let Some(first) = answers.first() else {
                    parsed.skipped += 1;
                    continue;
                };
                let answer = string(first, "text", &format!("{loc_q}.answers[0]"))?;
                let t = Triplet::new(&id, question, context, answer);
                if t.question.is_empty() || t.context.is_empty() || t.answer.is_empty() {
                    parsed.skipped += 1;
                    continue;
                }
                parsed.triplets.push(t);
            }
        }
    }
    Ok(parsed)
}

pub fn parse_squad(path: &Path) -> Result<Parsed> {
    let text = std::fs::read_to_string(path)?;
    parse_squad_str(&text)
}

/// Serializes triplets back to the SQuAD layout, grouping consecutive
/// triplets that share a context into one paragraph.
pub fn to_squad_json(triplets: &[Triplet]) -> Value {
    let mut paragraphs: Vec<Value> = Vec::new();
    let mut last_context: Option<&str> = None;
    for t in triplets {
        let qa = json!({
            "id": t.id,
            "question": t.question_text,
            "answers": [{ "text": t.answer_text, "answer_start": t.context_text.find(&t.answer_text).map_or(-1, |i| i as i64) }],
        });
        if last_context == Some(t.context_text.as_str()) {
            if let Some(p) = paragraphs.last_mut() {
                p["qas"].as_array_mut().expect("qas array").push(qa);
            }
        } else {
            paragraphs.push(json!({ "context": t.context_text, "qas": [qa] }));
            last_context = Some(&t.context_text);
        }
    }
    json!({ "version": "1.1", "data": [{ "title": "generated", "paragraphs": paragraphs }] })
}

/// Corpus summary: triplet count and mean token lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub count: usize,
    pub mean_context: f64,
    pub mean_question: f64,
    pub mean_answer: f64,
}

pub fn dataset_stats(triplets: &[Triplet]) -> Result<DatasetStats> {
    if triplets.is_empty() {
        return Err(Error::Dataset { locator: "root".into(), msg: "no triplets".into() });
    }
    let n = triplets.len() as f64;
    let mean = |f: fn(&Triplet) -> usize| triplets.iter().map(f).sum::<usize>() as f64 / n;
    Ok(DatasetStats {
        count: triplets.len(),
        mean_context: mean(|t| t.context.len()),
        mean_question: mean(|t| t.question.len()),
        mean_answer: mean(|t| t.answer.len()),
    })
}

impl DatasetStats {
    pub const HEADER: &'static str = "#\tn̄\tm̄\tk̄";
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.2}\t{:.2}\t{:.2}", self.count, self.mean_context, self.mean_question, self.mean_answer)
    }
}
