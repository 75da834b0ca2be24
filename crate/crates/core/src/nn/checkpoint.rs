//! Checkpoint files: a text manifest followed by a raw little-endian payload.
//!
//! ```text
//! #ceres-ckpt v1
//! dtype f32
//! step 1200
//! config d 64
//! tensor tok_emb 812 64
//! end 207872
//! <payload bytes>
//! ```
//!
//! Tensors are stored in manifest order, row-major.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::real::{Dtype, Real};
use super::tensor::Tensor;
use super::NnError;

pub const CKPT_HEADER: &str = "#ceres-ckpt v1";

/// Everything in a checkpoint besides the tensor values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Free-form key/value pairs, written in the given order.
    pub config: Vec<(String, String)>,
}

impl CheckpointMeta {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn check_token(s: &str, what: &str) -> Result<(), NnError> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(bad(format!("{what} `{s}` must be a non-empty token without spaces")));
    }
    Ok(())
}

pub fn write_checkpoint<F: Real, W: Write>(
    out: &mut W,
    store: &ParamStore<F>,
    meta: &CheckpointMeta,
) -> Result<(), NnError> {
    let mut head = String::new();
    head.push_str(CKPT_HEADER);
    head.push('\n');
    head.push_str(&format!("dtype {}\nstep {}\n", F::DTYPE, meta.step));
    for (k, v) in &meta.config {
        check_token(k, "config key")?;
        check_token(v, "config value")?;
        head.push_str(&format!("config {k} {v}\n"));
    }
    let mut payload = Vec::with_capacity(store.numel() * F::DTYPE.size());
    for (name, t) in store.named() {
        check_token(name, "tensor name")?;
        head.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    head.push_str(&format!("end {}\n", payload.len()));
    out.write_all(head.as_bytes())?;
    out.write_all(&payload)?;
    Ok(())
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    store: &ParamStore<F>,
    meta: &CheckpointMeta,
) -> Result<(), NnError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store, meta)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint into a fresh store of element type `F`, converting
/// from the stored dtype when they differ. The store's step is restored.
pub fn read_checkpoint<F: Real, R: Read>(input: R) -> Result<(ParamStore<F>, CheckpointMeta), NnError> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<R>| -> Result<String, NnError> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of manifest"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != CKPT_HEADER {
        return Err(bad(format!("missing `{CKPT_HEADER}` header")));
    }
    let mut dtype = None;
    let mut meta = CheckpointMeta::default();
    let mut tensors: Vec<(String, usize, usize)> = Vec::new();
    let nbytes = loop {
        let l = next_line(&mut reader)?;
        let parts: Vec<&str> = l.split(' ').collect();
        match parts.as_slice() {
            ["dtype", d] => dtype = Some(d.parse::<Dtype>().map_err(bad)?),
            ["step", s] => meta.step = s.parse().map_err(|_| bad(format!("bad step `{s}`")))?,
            ["config", k, v] => meta.config.push((k.to_string(), v.to_string())),
            ["tensor", name, r, c] => {
                let r = r.parse().map_err(|_| bad(format!("bad rows for `{name}`")))?;
                let c = c.parse().map_err(|_| bad(format!("bad cols for `{name}`")))?;
                tensors.push((name.to_string(), r, c));
            }
            ["end", n] => break n.parse::<usize>().map_err(|_| bad("bad payload size"))?,
            _ => return Err(bad(format!("unrecognised manifest line `{l}`"))),
        }
    };
    let dtype = dtype.ok_or_else(|| bad("manifest lacks a dtype line"))?;
    let expected: usize = tensors.iter().map(|(_, r, c)| r * c).sum::<usize>() * dtype.size();
    if expected != nbytes {
        return Err(bad(format!("payload size {nbytes} does not match {expected} bytes of tensors")));
    }
    let mut payload = Vec::with_capacity(nbytes);
    reader.read_to_end(&mut payload)?;
    if payload.len() != nbytes {
        return Err(bad(format!("payload holds {} bytes, manifest says {nbytes}", payload.len())));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    let size = dtype.size();
    for (name, r, c) in tensors {
        let n = r * c;
        let bytes = &payload[offset..offset + n * size];
        offset += n * size;
        let data: Vec<F> = bytes
            .chunks_exact(size)
            .map(|b| match dtype {
                Dtype::F32 => F::lit(f32::read_le(b) as f64),
                Dtype::F64 => F::lit(f64::read_le(b)),
            })
            .collect();
        store.insert(name, Tensor::from_vec(r, c, data)?)?;
    }
    store.set_step(meta.step);
    Ok((store, meta))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(ParamStore<F>, CheckpointMeta), NnError> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore<f32>, CheckpointMeta) {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::from_rows(&[&[1.0, -2.5]])).unwrap();
        store
            .insert("a.w", Tensor::from_rows(&[&[0.125], &[3.0], &[-7.0]]))
            .unwrap();
        let meta = CheckpointMeta {
            step: 42,
            config: vec![("d".into(), "2".into()), ("use_gnn".into(), "true".into())],
        };
        (store, meta)
    }

    #[test]
    fn round_trip_preserves_values_and_meta() {
        let (store, meta) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, &meta).unwrap();
        let (back, meta2) = read_checkpoint::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.step(), 42);
        for (name, t) in store.named() {
            assert_eq!(back.value(back.id(name).unwrap()), t);
        }
    }

    #[test]
    fn manifest_layout_is_stable() {
        let (store, meta) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, &meta).unwrap();
        let text_end = buf.len() - 5 * 4;
        let text = std::str::from_utf8(&buf[..text_end]).unwrap();
        assert_eq!(
            text,
            "#ceres-ckpt v1\ndtype f32\nstep 42\nconfig d 2\nconfig use_gnn true\n\
             tensor a.w 3 1\ntensor b 1 2\nend 20\n"
        );
        assert_eq!(&buf[text_end..text_end + 4], &0.125f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_rejected() {
        let (store, meta) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, &meta).unwrap();
        buf.pop();
        assert!(matches!(
            read_checkpoint::<f32, _>(buf.as_slice()),
            Err(NnError::Checkpoint(_))
        ));
    }

    #[test]
    fn reads_across_dtypes() {
        let (store, meta) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, &meta).unwrap();
        let (back, _) = read_checkpoint::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(back.value(back.id("b").unwrap()).data(), &[1.0, -2.5]);
    }
}
