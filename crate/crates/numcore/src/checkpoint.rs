//! Checkpoint files: a text manifest followed by little-endian `f32`
//! payloads in manifest order.
//!
//! ```text
//! SALVIT-CKPT 1
//! meta <key> <value...>
//! tensor <name> <d0>x<d1>x... f32
//! end
//! <payload bytes>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "SALVIT-CKPT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered free-form metadata (configuration, GELU form, run hash).
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(NumError::Checkpoint(format!("bad meta entry `{k}`")));
            }
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, t) in self.params.iter() {
            if name.contains(char::is_whitespace) {
                return Err(NumError::Checkpoint(format!("bad tensor name `{name}`")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "tensor {name} {} f32", dims.join("x"))?;
        }
        writeln!(w, "end")?;
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(NumError::Checkpoint(format!("bad header `{}`", line.trim_end())));
        }
        let mut meta = Vec::new();
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(NumError::Checkpoint("manifest not terminated".into()));
            }
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 || parts[2] != "f32" {
                    return Err(NumError::Checkpoint(format!("bad tensor line `{l}`")));
                }
                let shape = parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| NumError::Checkpoint(format!("bad shape `{}`: {e}", parts[1])))?;
                entries.push((parts[0].to_string(), shape));
            } else {
                return Err(NumError::Checkpoint(format!("unexpected manifest line `{l}`")));
            }
        }
        let mut params = ParamStore::new();
        let mut buf = [0u8; 4];
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| NumError::Checkpoint(format!("payload truncated in `{name}`")))?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            params.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_f32() {
        let mut params = ParamStore::new();
        params.insert("enc.w", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.0]).unwrap());
        params.insert("b", Tensor::scalar(0.1));
        let ck = Checkpoint {
            meta: vec![("gelu".into(), "erf".into()), ("config".into(), "a = 1; b = two".into())],
            params,
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert!(back.params.get("enc.w").unwrap().max_abs_diff(ck.params.get("enc.w").unwrap()) < 1e-7);
        assert!((back.params.get("b").unwrap().item() - 0.1).abs() < 1e-7);
    }

    #[test]
    fn manifest_is_text_then_le_f32() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let mut bytes = Vec::new();
        Checkpoint { meta: vec![], params }.write_to(&mut bytes).unwrap();
        let header = b"SALVIT-CKPT 1\ntensor x 2 f32\nend\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), header.len() + 8);
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let mut bytes = Vec::new();
        Checkpoint { meta: vec![], params }.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
    }
}
