//! Binary checkpoints.
//!
//! Layout (little endian): `DAAN`, u32 version, tensor table, alias table,
//! configuration as TOML text, vocabulary, Adam step and moment table,
//! trailing CRC32 of everything before it. A tensor is u32 name length,
//! name, u32 rank, u64 extents, then f64 values. Strings are u32 length
//! and UTF-8 bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::ModelConfig;
use crate::embedding::{Vocabulary, SPECIALS};
use crate::error::{Error, Result};
use crate::model::{assemble_model, Model};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const MAGIC: &[u8; 4] = b"DAAN";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensors<'t>(&mut self, tensors: impl ExactSizeIterator<Item = (String, &'t Tensor)>) {
        self.len(tensors.len());
        for (name, t) in tensors {
            self.str(&name);
            self.len(t.shape().len());
            for &e in t.shape() {
                self.u64(e as u64);
            }
            for v in t.data() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CheckpointCorrupt(msg.into())
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("string is not UTF-8"))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.len()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.str()?;
            let rank = self.len()?;
            let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n =
                shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| corrupt("tensor too large"))?;
            if n.saturating_mul(8) > self.bytes.len() - self.pos {
                return Err(corrupt(format!("tensor `{name}` runs past the end")));
            }
            let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
            out.insert(name, t);
        }
        Ok(out)
    }
}

pub fn to_bytes(trainer: &Trainer) -> Vec<u8> {
    let model = &trainer.model;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.tensors(model.registry.tensors().iter().map(|(k, t)| (k.clone(), t)));
    let aliases = model.registry.aliases();
    w.len(aliases.len());
    for (logical, physical) in aliases {
        w.str(logical);
        w.str(physical);
    }
    w.str(&model.config.to_toml());
    let words = &model.vocab.tokens()[SPECIALS.len()..];
    w.len(words.len());
    for word in words {
        w.str(word);
    }
    w.u64(trainer.adam.step);
    let moments = trainer.adam.first_moment.iter().map(|(k, t)| (format!("adam.m/{k}"), t));
    let second = trainer.adam.second_moment.iter().map(|(k, t)| (format!("adam.v/{k}"), t));
    let all: Vec<(String, &Tensor)> = moments.chain(second).collect();
    w.tensors(all.into_iter());
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing DAAN header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CheckpointChecksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let tensors = r.tensors()?;
    let alias_count = r.len()?;
    let mut aliases = BTreeMap::new();
    for _ in 0..alias_count {
        let logical = r.str()?;
        aliases.insert(logical, r.str()?);
    }
    let config = ModelConfig::from_toml(&r.str()?)?;
    let word_count = r.len()?;
    let words = (0..word_count).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(words);
    if vocab.len() != word_count + SPECIALS.len() {
        return Err(corrupt("vocabulary repeats a word"));
    }
    let step = r.u64()?;
    let moments = r.tensors()?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }

    let mut registry = assemble_model(&config, vocab.len())?;
    if registry.aliases() != &aliases {
        return Err(corrupt("alias table does not match the configuration"));
    }
    if registry.tensors().len() != tensors.len() {
        return Err(corrupt(format!("expected {} tensors, found {}", registry.tensors().len(), tensors.len())));
    }
    for (name, t) in tensors {
        let slot =
            registry.tensors_mut().get_mut(&name).ok_or_else(|| corrupt(format!("unexpected tensor `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(corrupt(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    let mut adam = AdamState { step, ..AdamState::default() };
    for (key, t) in moments {
        let (table, name) = match key.split_once('/') {
            Some(("adam.m", name)) => (&mut adam.first_moment, name),
            Some(("adam.v", name)) => (&mut adam.second_moment, name),
            _ => return Err(corrupt(format!("unexpected optimizer tensor `{key}`"))),
        };
        let param = registry.tensors().get(name).ok_or_else(|| corrupt(format!("moment for unknown `{name}`")))?;
        if !param.same_shape(&t) {
            return Err(corrupt(format!("moment shape for `{name}`")));
        }
        table.insert(name.to_string(), t);
    }
    Ok(Trainer { model: Model { config, vocab, registry }, adam })
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    std::fs::write(path, to_bytes(trainer))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;
    use crate::data::Triplet;
    use crate::embedding::build_vocabulary;
    use crate::train::batch_at;

    fn trained() -> (Trainer, Vec<Triplet>) {
        let data = vec![
            Triplet::new("a", "who sat on the mat ?", "the cat sat on the mat .", "the cat"),
            Triplet::new("b", "where did the dog run ?", "the dog ran to the park .", "the park"),
        ];
        let vocab = build_vocabulary(data.iter().flat_map(|t| [&t.context[..], &t.question[..], &t.answer[..]]), 2);
        let cfg = ModelConfig { gen_hidden: 8, decode_cap: 5, ..ModelConfig::tiny() };
        let mut tr = Trainer::new(Model::new(cfg, vocab).unwrap());
        for i in 0..2 {
            tr.train_step(&batch_at(&data, 2, i)).unwrap();
        }
        (tr, data)
    }

    #[test]
    fn round_trip_is_byte_identical_and_decodes_the_same() {
        let (tr, data) = trained();
        let bytes = to_bytes(&tr);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, tr);
        assert_eq!(to_bytes(&back), bytes);
        let t = &data[0];
        for task in [Task::Qa, Task::Qg] {
            assert_eq!(
                back.model.greedy_decode(task, &t.context, t.counterpart(task)).unwrap(),
                tr.model.greedy_decode(task, &t.context, t.counterpart(task)).unwrap()
            );
        }
    }

    #[test]
    fn sharing_survives_loading() {
        let (tr, _) = trained();
        let mut back = from_bytes(&to_bytes(&tr)).unwrap();
        back.model.registry.get_mut("qa.projection.w").unwrap().data_mut()[0] = 42.0;
        assert_eq!(back.model.registry.get("qg.projection.w").unwrap().data()[0], 42.0);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let (tr, _) = trained();
        let bytes = to_bytes(&tr);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 9]), Err(Error::CheckpointChecksum { .. })));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::CheckpointChecksum { .. })));
        let mut future = bytes.clone();
        future[4] = 2;
        assert!(matches!(from_bytes(&future), Err(Error::CheckpointVersion { found: 2, .. })));
        assert!(matches!(from_bytes(b"DAA"), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn file_round_trip() {
        let (tr, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.daan");
        save_checkpoint(&path, &tr).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), tr);
    }
}
