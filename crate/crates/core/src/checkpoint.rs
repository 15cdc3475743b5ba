//! Binary checkpoints: model, optimizer state, vocabulary and class names in
//! one self-describing file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "TCNNCKPT" | u32 version | [32] sha256(spec text)
//! text spec | text optimizer config | text classes | text vocab TSV
//! u64 max_len | u64 optimizer step | u8 phase (0 adam, 1 sgd)
//! u64 tensor count | per tensor: text name, u32 rank, u64 dims…, f64 values…
//! [32] sha256 of every preceding byte
//! ```
//!
//! `text` is a u64 byte length followed by UTF-8. Tensor names are
//! `param/<name>`, `bn/<layer>/mean`, `bn/<layer>/var`, and
//! `optim/{m,v,velocity}/<name>`, in that order.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::arch::{self, ArchSpec, Model, ModelParams};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::layers::BatchNormState;
use crate::optim::{OptimConfig, OptimizerState, Phase};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TCNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub classes: Vec<String>,
    pub vocab: Vocab,
    pub max_len: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let spec = self.model.spec();
        out.extend_from_slice(&spec.hash());
        put_text(&mut out, &spec.to_text());
        put_text(&mut out, &self.optimizer.config.to_text());
        put_text(&mut out, &self.classes.join("\n"));
        put_text(&mut out, &self.vocab.to_tsv());
        put_u64(&mut out, self.max_len as u64);
        put_u64(&mut out, self.optimizer.step_count());
        out.push(match self.optimizer.phase() {
            Phase::Adam => 0,
            Phase::Sgd => 1,
        });

        let params = self.model.params();
        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (name, t) in params.iter() {
            tensors.push((format!("param/{name}"), t.shape().to_vec(), t.data()));
        }
        for (layer, bn) in self.model.batch_norm_names().iter().zip(self.model.batch_norms()) {
            tensors.push((format!("bn/{layer}/mean"), vec![bn.features()], &bn.running_mean));
            tensors.push((format!("bn/{layer}/var"), vec![bn.features()], &bn.running_var));
        }
        let slots = [
            ("m", self.optimizer.first_moments()),
            ("v", self.optimizer.second_moments()),
            ("velocity", self.optimizer.velocities()),
        ];
        for (slot, list) in slots {
            for (name, t) in params.names().iter().zip(list) {
                tensors.push((format!("optim/{slot}/{name}"), t.shape().to_vec(), t.data()));
            }
        }
        put_u64(&mut out, tensors.len() as u64);
        for (name, dims, data) in tensors {
            put_text(&mut out, &name);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                put_u64(&mut out, d as u64);
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let stored_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let spec = ArchSpec::from_text(&r.text()?)?;
        if spec.hash() != stored_hash {
            return Err(Error::Format("spec hash does not match spec text".into()));
        }
        let config = OptimConfig::from_text(&r.text()?)?;
        let classes_text = r.text()?;
        let classes: Vec<String> = classes_text.split('\n').map(str::to_string).collect();
        if classes.len() != spec.num_classes {
            return Err(Error::Format(format!(
                "{} class names for {} classes",
                classes.len(),
                spec.num_classes
            )));
        }
        let vocab = Vocab::from_tsv(&r.text()?)?;
        if vocab.len() != spec.vocab_size {
            return Err(Error::Format(format!(
                "vocabulary has {} entries, spec expects {}",
                vocab.len(),
                spec.vocab_size
            )));
        }
        let max_len = r.u64()? as usize;
        let step = r.u64()?;
        let phase = match r.take(1)?[0] {
            0 => Phase::Adam,
            1 => Phase::Sgd,
            other => return Err(Error::Format(format!("unknown optimizer phase {other}"))),
        };

        let count = r.u64()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count.min(body.len()) {
            let name = r.text()?;
            let rank = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| Error::Format(format!("tensor {name} has an implausible shape {dims:?}")))?;
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, dims, data));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }

        let mut tensors = tensors.into_iter();
        let mut next = |expected: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            match tensors.next() {
                Some((name, dims, data)) if name == expected => Ok((dims, data)),
                Some((name, ..)) => Err(Error::Format(format!("expected tensor {expected}, found {name}"))),
                None => Err(Error::Format(format!("missing tensor {expected}"))),
            }
        };
        let probe = arch::param_names(&spec);
        let mut names = Vec::with_capacity(probe.len());
        let mut params = Vec::with_capacity(probe.len());
        for name in &probe {
            let (dims, data) = next(&format!("param/{name}"))?;
            params.push(Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))?);
            names.push(name.clone());
        }
        let mut bn = Vec::new();
        for layer in arch::batch_norm_layers(&spec) {
            let (_, mean) = next(&format!("bn/{layer}/mean"))?;
            let (_, var) = next(&format!("bn/{layer}/var"))?;
            let mut state = BatchNormState::new(mean.len(), spec.bn_momentum, spec.bn_epsilon)?;
            state.running_mean = mean;
            state.running_var = var;
            bn.push(state);
        }
        let mut slot = |kind: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|n| {
                    let (dims, data) = next(&format!("optim/{kind}/{n}"))?;
                    Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))
                })
                .collect()
        };
        let m = slot("m")?;
        let v = slot("v")?;
        let velocity = slot("velocity")?;
        if tensors.next().is_some() {
            return Err(Error::Format("unexpected extra tensors".into()));
        }
        let model = Model::from_parts(spec, ModelParams::new(names, params)?, bn)?;
        for (p, slots) in model.params().tensors().iter().zip(m.iter().zip(&v).zip(&velocity)) {
            let ((m, v), u) = slots;
            if m.shape() != p.shape() || v.shape() != p.shape() || u.shape() != p.shape() {
                return Err(Error::Format("optimizer slot shape does not match its parameter".into()));
            }
        }
        let optimizer = OptimizerState::from_parts(config, step, phase, m, v, velocity)?;
        Ok(Self {
            model,
            optimizer,
            classes,
            vocab,
            max_len,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| Error::Format("text length overflow".into()))?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("text is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::data::Document;
    use crate::optim::OptimizerKind;
    use crate::tensor::Rng;

    fn sample() -> Checkpoint {
        let docs = [Document {
            id: "a__1".into(),
            label: "a".into(),
            tokens: vec!["x".into(), "y".into()],
        }];
        let vocab = Vocab::build(docs.iter().map(|d| d.tokens.as_slice()), 1).unwrap();
        let mut model = Model::build(ArchSpec::lightweight(vocab.len(), 2), &mut Rng::new(4)).unwrap();
        let config = OptimConfig {
            kind: OptimizerKind::Swats,
            switch_step: 1,
            ..OptimConfig::default()
        };
        let mut optimizer = OptimizerState::new(config, model.params().tensors()).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..2 {
            let tokens: Vec<usize> = (0..16).map(|i| (i * 7) % 4).collect();
            model.compute_gradients(&tokens, 2, 8, &[0, 1], &mut rng).unwrap();
            optimizer.step(model.params_mut().tensors_mut()).unwrap();
        }
        model.params_mut().zero_grad();
        Checkpoint {
            model,
            optimizer,
            classes: vec!["a".into(), "b".into()],
            vocab,
            max_len: 8,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.optimizer.phase(), Phase::Sgd);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
        for at in [60, bytes.len() / 3, bytes.len() - 40] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))), "flip at {at}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    fn adam_step(model: &mut Model, optimizer: &mut OptimizerState, step: u64) {
        let tokens: Vec<usize> = (0..16).map(|i| (i * 5 + step as usize) % 4).collect();
        model
            .compute_gradients(&tokens, 2, 8, &[1, 0], &mut Rng::new(100 + step))
            .unwrap();
        optimizer.step(model.params_mut().tensors_mut()).unwrap();
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let fresh = || {
            let model = Model::build(ArchSpec::lightweight(4, 2), &mut Rng::new(8)).unwrap();
            let optimizer = OptimizerState::new(OptimConfig::default(), model.params().tensors()).unwrap();
            (model, optimizer)
        };
        let (mut model, mut optimizer) = fresh();
        for s in 0..4 {
            adam_step(&mut model, &mut optimizer, s);
        }

        let (mut half, mut half_opt) = fresh();
        for s in 0..2 {
            adam_step(&mut half, &mut half_opt, s);
        }
        half.params_mut().zero_grad();
        let mut ck = sample();
        ck.model = half;
        ck.optimizer = half_opt;
        let mut back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        for s in 2..4 {
            adam_step(&mut back.model, &mut back.optimizer, s);
        }
        model.params_mut().zero_grad();
        back.model.params_mut().zero_grad();
        for ((_, a), (_, b)) in model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.optimizer.step_count(), 4);
    }

    #[test]
    fn fresh_base_model_round_trips() {
        let mut ck = sample();
        ck.model = Model::build(ArchSpec::base(ck.vocab.len(), 2), &mut Rng::new(2)).unwrap();
        ck.optimizer = OptimizerState::new(OptimConfig::default(), ck.model.params().tensors()).unwrap();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn flipped_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
