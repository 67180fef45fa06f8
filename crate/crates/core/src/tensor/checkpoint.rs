//! Flat archive of named tensors.
//!
//! Layout: a UTF-8 header, then raw little-endian buffers.
//!
//! ```text
//! tinyseek-checkpoint v1
//! meta <key> <value...>
//! tensor <name> <f64|f32> <d0,d1,...|scalar> <offset> <nbytes>
//! end
//! <data section>
//! ```
//!
//! Offsets are relative to the first byte after the `end\n` line. Values are
//! stored bit-exactly in the stated dtype.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::dense::{Precision, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_TAG: &str = "tinyseek-checkpoint v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Precision, Tensor)>,
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Precision, t: Tensor) {
        self.tensors.push((name.into(), dtype, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{CHECKPOINT_TAG}\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return fmt_err(format!("meta entry {k:?} cannot be encoded"));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut data = Vec::new();
        for (name, dtype, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return fmt_err(format!("tensor name {name:?} cannot be encoded"));
            }
            let offset = data.len();
            match dtype {
                Precision::F64 => {
                    for x in t.data() {
                        data.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Precision::F32 => {
                    for x in t.data() {
                        data.extend_from_slice(&(*x as f32).to_le_bytes());
                    }
                }
            }
            let dims = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!(
                "tensor {name} {} {dims} {offset} {}\n",
                dtype.dtype(),
                data.len() - offset
            ));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return fmt_err("checkpoint header is not terminated by `end`");
            };
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        let data = &bytes[pos..];
        let mut it = lines.into_iter();
        match it.next() {
            Some(tag) if tag == CHECKPOINT_TAG => {}
            other => return fmt_err(format!("unsupported checkpoint tag {other:?}")),
        }
        let mut ck = Checkpoint::new();
        for line in it {
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().unwrap_or_default().to_string();
                    let v = parts.next().unwrap_or_default().to_string();
                    ck.meta.insert(k, v);
                }
                Some("tensor") => {
                    let fields: Vec<&str> = line.split(' ').collect();
                    if fields.len() != 6 {
                        return fmt_err(format!("bad tensor line {line:?}"));
                    }
                    let dtype = match fields[2] {
                        "f64" => Precision::F64,
                        "f32" => Precision::F32,
                        d => return fmt_err(format!("unknown dtype {d}")),
                    };
                    let shape: Vec<usize> = if fields[3] == "scalar" {
                        vec![]
                    } else {
                        fields[3]
                            .split(',')
                            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dim in {line:?}"))))
                            .collect::<Result<_>>()?
                    };
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad number in {line:?}")))
                    };
                    let (offset, nbytes) = (parse(fields[4])?, parse(fields[5])?);
                    let width = if dtype == Precision::F64 { 8 } else { 4 };
                    let n: usize = shape.iter().product();
                    if n * width != nbytes || offset + nbytes > data.len() {
                        return fmt_err(format!("tensor {} has inconsistent extent", fields[1]));
                    }
                    let raw = &data[offset..offset + nbytes];
                    let values: Vec<f64> = if dtype == Precision::F64 {
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect()
                    } else {
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                            .collect()
                    };
                    ck.push(fields[1], dtype, Tensor::new(&shape, values)?);
                }
                _ => return fmt_err(format!("unrecognized header line {line:?}")),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
