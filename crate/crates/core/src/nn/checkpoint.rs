//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! overmod-checkpoint v1
//! <key>=<value>            metadata lines (role, seed, config, ...)
//! param <name> <d0,d1,..>  one line per tensor, in payload order
//! end
//! <little-endian f64 payload of every tensor, concatenated in header order>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{NnError, ParameterSet, Tensor};

const MAGIC: &str = "overmod-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParameterSet,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(params: ParameterSet) -> Self {
        Self {
            metadata: BTreeMap::new(),
            params,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str, NnError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing metadata `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n']) || k.starts_with("param ") || k == "end" {
                return Err(bad(format!("invalid metadata key `{k}`")));
            }
            if v.contains('\n') {
                return Err(bad(format!("metadata `{k}` contains a newline")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        for (name, t) in self.params.iter() {
            if name.contains(char::is_whitespace) {
                return Err(bad(format!("parameter name `{name}` contains whitespace")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("param {name} {}\n", dims.join(",")));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(self.params.num_scalars() * 8);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str, NnError> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not utf-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("not an overmod checkpoint"));
        }
        let mut metadata = BTreeMap::new();
        let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("param ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed param line `{line}`")))?;
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension in `{line}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                layout.push((name.to_string(), shape));
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("malformed metadata line `{line}`")))?;
                metadata.insert(k.to_string(), v.to_string());
            }
        }
        let mut params = ParameterSet::new();
        let mut payload = &bytes[pos..];
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            if payload.len() < n * 8 {
                return Err(bad(format!("payload truncated at `{name}`")));
            }
            let data = payload[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            payload = &payload[n * 8..];
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self { metadata, params })
    }

    /// Writes via a temporary sibling file and an atomic rename.
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        crate::util::write_atomic(path, &self.to_bytes()?).map_err(|e| io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| io_at(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn io_at(path: &Path, e: std::io::Error) -> NnError {
    NnError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
