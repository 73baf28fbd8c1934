//! Cloze task templates, verbalizers, and JSONL ingestion.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::{tokenize, Vocabulary, MASK, MASK_LITERAL};
use crate::error::{Error, Result};

fn default_label_field() -> String {
    "label".to_string()
}

/// Declares how raw records become cloze instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Record fields consumed by the template, e.g. `["question", "passage"]`.
    pub fields: Vec<String>,
    /// Text with `{field}` placeholders and exactly one `[MASK]`.
    pub template: String,
    /// Label value → vocabulary word scored at the mask. Order defines label ids.
    pub verbalizer: IndexMap<String, String>,
    pub max_len: usize,
    #[serde(default = "default_label_field")]
    pub label_field: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(String),
    Mask,
}

impl TaskSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: TaskSpec = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_labels(&self) -> usize {
        self.verbalizer.len()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.verbalizer.keys().map(String::as_str).collect()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.verbalizer.get_index_of(label)
    }

    fn segments(&self) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        let mut lit = String::new();
        let mut rest = self.template.as_str();
        while !rest.is_empty() {
            if let Some(after) = rest.strip_prefix(MASK_LITERAL) {
                if !lit.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                out.push(Segment::Mask);
                rest = after;
            } else if let Some(after) = rest.strip_prefix('{') {
                let close = after
                    .find('}')
                    .ok_or_else(|| Error::config(format!("unclosed placeholder in template '{}'", self.template)))?;
                if !lit.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                out.push(Segment::Field(after[..close].to_string()));
                rest = &after[close + 1..];
            } else {
                let ch = rest.chars().next().expect("non-empty");
                lit.push(ch);
                rest = &rest[ch.len_utf8()..];
            }
        }
        if !lit.is_empty() {
            out.push(Segment::Literal(lit));
        }
        Ok(out)
    }

    /// Structural checks that need no vocabulary.
    pub fn validate(&self) -> Result<()> {
        let segs = self.segments()?;
        let masks = segs.iter().filter(|s| **s == Segment::Mask).count();
        if masks != 1 {
            return Err(Error::config(format!(
                "template must contain exactly one {MASK_LITERAL}, found {masks}"
            )));
        }
        for s in &segs {
            if let Segment::Field(f) = s {
                if !self.fields.contains(f) {
                    return Err(Error::config(format!("template placeholder {{{f}}} is not a declared field")));
                }
            }
        }
        if self.verbalizer.len() < 2 {
            return Err(Error::config("verbalizer needs at least two labels"));
        }
        let mut words: Vec<&String> = self.verbalizer.values().collect();
        words.sort();
        words.dedup();
        if words.len() != self.verbalizer.len() {
            return Err(Error::config("verbalizer words must be distinct"));
        }
        for w in self.verbalizer.values() {
            if tokenize(w).len() != 1 {
                return Err(Error::config(format!("verbalizer word '{w}' must be a single token")));
            }
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        Ok(())
    }

    /// Vocabulary ids of the verbalizer words, in label order.
    pub fn label_token_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        self.verbalizer
            .values()
            .map(|w| {
                let t = tokenize(w);
                vocab
                    .id(&t[0])
                    .ok_or_else(|| Error::config(format!("verbalizer word '{w}' is not in the vocabulary")))
            })
            .collect()
    }

    /// Fills the template, tokenizes, and truncates to `max_len`. Truncation
    /// removes tokens from the end of the currently longest field (later field
    /// on ties) so short fields and the mask survive.
    pub fn encode(&self, raw: &RawInstance, vocab: &Vocabulary) -> Result<LabeledInstance> {
        let label_id = self
            .label_id(&raw.label)
            .ok_or_else(|| Error::data(format!("instance {}: unknown label '{}'", raw.id, raw.label)))?;
        let segs = self.segments()?;
        let mut pieces: Vec<(bool, Vec<usize>)> = Vec::with_capacity(segs.len());
        for s in &segs {
            match s {
                Segment::Literal(t) => pieces.push((false, vocab.encode(t))),
                Segment::Mask => pieces.push((false, vec![MASK])),
                Segment::Field(f) => {
                    let text = raw
                        .fields
                        .get(f)
                        .ok_or_else(|| Error::data(format!("instance {}: missing field '{f}'", raw.id)))?;
                    pieces.push((true, vocab.encode(text)));
                }
            }
        }
        let mut total: usize = pieces.iter().map(|p| p.1.len()).sum();
        while total > self.max_len {
            let longest = pieces
                .iter()
                .enumerate()
                .filter(|(_, p)| p.0 && !p.1.is_empty())
                .max_by(|a, b| a.1 .1.len().cmp(&b.1 .1.len()).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i);
            match longest {
                Some(i) => {
                    pieces[i].1.pop();
                    total -= 1;
                }
                None => {
                    return Err(Error::data(format!(
                        "instance {}: [MASK] lost by truncation (template alone needs {total} > max_len {})",
                        raw.id, self.max_len
                    )))
                }
            }
        }
        let token_ids: Vec<usize> = pieces.into_iter().flat_map(|p| p.1).collect();
        let mask_position = token_ids
            .iter()
            .position(|&t| t == MASK)
            .ok_or_else(|| Error::data(format!("instance {}: [MASK] lost by truncation", raw.id)))?;
        Ok(LabeledInstance {
            id: raw.id.clone(),
            raw_fields: raw.fields.clone(),
            token_ids,
            label_id,
            mask_position,
        })
    }
}

/// An unencoded record: named text fields plus a label value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    pub id: String,
    pub fields: IndexMap<String, String>,
    pub label: String,
}

/// A tokenized cloze instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub raw_fields: IndexMap<String, String>,
    pub token_ids: Vec<usize>,
    pub label_id: usize,
    pub mask_position: usize,
}

/// Encoded instances of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub instances: Vec<LabeledInstance>,
}

impl Dataset {
    pub fn encode(spec: TaskSpec, raw: &[RawInstance], vocab: &Vocabulary) -> Result<Self> {
        spec.validate()?;
        spec.label_token_ids(vocab)?;
        let instances = raw.iter().map(|r| spec.encode(r, vocab)).collect::<Result<_>>()?;
        Ok(Self { spec, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label_id).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<LabeledInstance> {
        idx.iter().map(|&i| self.instances[i].clone()).collect()
    }
}

fn value_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses JSONL text into objects; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<serde_json::Map<String, Value>>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(m)) => out.push(m),
            Ok(_) => return Err(Error::data(format!("line {}: expected a JSON object", n + 1))),
            Err(e) => return Err(Error::data(format!("line {}: {e}", n + 1))),
        }
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Map<String, Value>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Maps JSONL records onto the spec's fields. Unknown keys are ignored; `id`
/// or `idx` become the instance id when present.
pub fn records_to_raw(spec: &TaskSpec, records: &[serde_json::Map<String, Value>]) -> Result<Vec<RawInstance>> {
    records
        .iter()
        .enumerate()
        .map(|(n, rec)| {
            let id = rec
                .get("id")
                .or_else(|| rec.get("idx"))
                .and_then(value_to_string)
                .unwrap_or_else(|| format!("line{}", n + 1));
            let mut fields = IndexMap::new();
            for f in &spec.fields {
                let v = rec
                    .get(f)
                    .and_then(value_to_string)
                    .ok_or_else(|| Error::data(format!("record {id}: missing field '{f}'")))?;
                fields.insert(f.clone(), v);
            }
            let label = rec
                .get(&spec.label_field)
                .and_then(value_to_string)
                .ok_or_else(|| Error::data(format!("record {id}: missing label field '{}'", spec.label_field)))?;
            Ok(RawInstance { id, fields, label })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boolq_spec(max_len: usize) -> TaskSpec {
        TaskSpec {
            name: "boolq".into(),
            fields: vec!["q".into(), "p".into()],
            template: "question: {q} passage: {p} answer: [MASK]".into(),
            verbalizer: IndexMap::from([("false".into(), "no".into()), ("true".into(), "yes".into())]),
            max_len,
            label_field: "label".into(),
        }
    }

    fn vocab_with(words: &str) -> Vocabulary {
        Vocabulary::build(&[format!("question passage answer : yes no {words}")], 1).unwrap()
    }

    fn raw(q: &str, p: &str, label: &str) -> RawInstance {
        RawInstance {
            id: "x".into(),
            fields: IndexMap::from([("q".into(), q.into()), ("p".into(), p.into())]),
            label: label.into(),
        }
    }

    #[test]
    fn substitution_ends_in_mask() {
        let v = vocab_with("q p");
        let inst = boolq_spec(100).encode(&raw("q", "p", "true"), &v).unwrap();
        assert_eq!(*inst.token_ids.last().unwrap(), MASK);
        assert_eq!(inst.mask_position, inst.token_ids.len() - 1);
        assert_eq!(
            v.decode(&inst.token_ids),
            vec!["question", ":", "q", "passage", ":", "p", "answer", ":", "[MASK]"]
        );
    }

    #[test]
    fn long_passage_truncated_to_max_len() {
        let passage: Vec<String> = (0..150).map(|i| format!("w{i}")).collect();
        let v = vocab_with(&passage.join(" "));
        let inst = boolq_spec(100).encode(&raw("is it", &passage.join(" "), "false"), &v).unwrap();
        assert_eq!(inst.token_ids.len(), 100);
        assert_eq!(inst.token_ids[inst.mask_position], MASK);
        // question kept intact, passage head kept
        let toks = v.decode(&inst.token_ids);
        assert_eq!(&toks[..5], &["question", ":", "[UNK]", "[UNK]", "passage"]);
        assert_eq!(toks[6], "w0");
    }

    #[test]
    fn verbalizer_maps_label_to_token() {
        let v = vocab_with("");
        let spec = boolq_spec(10);
        let ids = spec.label_token_ids(&v).unwrap();
        assert_eq!(ids[spec.label_id("true").unwrap()], v.id("yes").unwrap());
    }

    #[test]
    fn missing_field_and_lost_mask_error() {
        let v = vocab_with("");
        let mut r = raw("a", "b", "true");
        r.fields.shift_remove("p");
        assert!(boolq_spec(100).encode(&r, &v).is_err());
        let err = boolq_spec(5).encode(&raw("a", "b", "true"), &v).unwrap_err();
        assert!(err.to_string().contains("[MASK] lost"));
    }

    #[test]
    fn template_validation() {
        let mut s = boolq_spec(10);
        s.template = "{q} {p}".into();
        assert!(s.validate().is_err());
        s.template = "{q} [MASK] [MASK]".into();
        assert!(s.validate().is_err());
        s.template = "{zzz} [MASK]".into();
        assert!(s.validate().is_err());
        assert!(boolq_spec(10).validate().is_ok());
    }

    #[test]
    fn jsonl_ingestion_ignores_unknown_fields() {
        let spec = boolq_spec(50);
        let recs = parse_jsonl(
            "{\"q\": \"a\", \"p\": \"b\", \"label\": true, \"extra\": 1}\n\n{\"q\": \"c\", \"p\": \"d\", \"label\": \"false\", \"idx\": 7}\n",
        )
        .unwrap();
        let raws = records_to_raw(&spec, &recs).unwrap();
        assert_eq!(raws.len(), 2);
        assert_eq!(raws[0].label, "true");
        assert_eq!(raws[0].id, "line1");
        assert_eq!(raws[1].id, "7");
        assert!(parse_jsonl("[1,2]").is_err());
    }
}
