//! Parameter checkpoint container.
//!
//! ```text
//! TCYOLO-CHECKPOINT 1\n
//! meta <key> <nbytes>\n<nbytes raw bytes>\n        (zero or more)
//! tensor <name> <rank> <d0> ... <d(rank-1)>\n       (one per tensor)
//! data\n
//! <for each tensor, in header order: product(dims) little-endian f32>
//! ```
//!
//! Keys and names are non-empty and contain no whitespace. The file ends
//! exactly after the last tensor's data. See `docs/checkpoint.md`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const MAGIC: &str = "TCYOLO-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(bad(format!("{kind} {s:?} must be non-empty without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            out.extend(format!("meta {k} {}\n", v.len()).bytes());
            out.extend(v.bytes());
            out.push(b'\n');
        }
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            out.extend(format!("tensor {name} {} {}\n", dims.len(), dims.join(" ")).bytes());
        }
        out.extend(b"data\n");
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend((v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            *pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8"))
        };
        let head = line(&mut pos)?;
        let mut parts = head.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(bad("missing TCYOLO-CHECKPOINT magic"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let l = line(&mut pos)?;
            let fields: Vec<&str> = l.split(' ').collect();
            match fields[0] {
                "meta" if fields.len() == 3 => {
                    let n: usize = fields[2].parse().map_err(|_| bad(format!("bad meta length in {l:?}")))?;
                    if pos + n + 1 > bytes.len() || bytes[pos + n] != b'\n' {
                        return Err(bad(format!("truncated meta value for {}", fields[1])));
                    }
                    let v = String::from_utf8(bytes[pos..pos + n].to_vec())
                        .map_err(|_| bad("meta value is not UTF-8"))?;
                    pos += n + 1;
                    ck.meta.push((fields[1].to_string(), v));
                }
                "tensor" if fields.len() >= 3 => {
                    let rank: usize = fields[2].parse().map_err(|_| bad(format!("bad rank in {l:?}")))?;
                    if fields.len() != 3 + rank || rank == 0 {
                        return Err(bad(format!("rank/dims mismatch in {l:?}")));
                    }
                    let dims = fields[3..]
                        .iter()
                        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(format!("bad dims in {l:?}")))?;
                    shapes.push((fields[1].to_string(), dims));
                }
                "data" if fields.len() == 1 => break,
                _ => return Err(bad(format!("unexpected header line {l:?}"))),
            }
        }
        for (name, dims) in shapes {
            let n: usize = dims.iter().product();
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(bad(format!("truncated data for tensor {name}")));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos = end;
            ck.tensors.push((name, Tensor::new(dims, data)?));
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes after tensor data", bytes.len() - pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: vec![("graph".into(), "[model]\nname = \"x\"\n".into())],
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.25)),
                ("a.bias".into(), Tensor::new(vec![2], vec![-1.5, 2.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn byte_layout_is_exact() {
        let ck = Checkpoint {
            meta: vec![],
            tensors: vec![("b".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())],
        };
        let bytes = ck.encode().unwrap();
        let mut expected = b"TCYOLO-CHECKPOINT 1\ntensor b 1 2\ndata\n".to_vec();
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("graph"), ck.meta("graph"));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        assert!(Checkpoint::decode(b"NOPE 1\ndata\n").is_err());
    }

    #[test]
    fn rejects_whitespace_names() {
        let ck = Checkpoint {
            meta: vec![],
            tensors: vec![("bad name".into(), Tensor::zeros(&[1]))],
        };
        assert!(ck.encode().is_err());
    }
}
