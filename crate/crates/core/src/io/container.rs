//! Binary container: named, typed, shaped sections in little-endian order.
//!
//! ```text
//! "CADT" | version u32 | section count u32
//! per section: name_len u32 | name (UTF-8) | dtype u8 | rank u32 | extents u32 × rank | payload
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = i32, 4 = u8 (used for UTF-8 text).

use std::collections::HashSet;
use std::path::Path;

use sfda_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"CADT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> u8 {
        match self {
            Self::F32(_) => 1,
            Self::F64(_) => 2,
            Self::I32(_) => 3,
            Self::U8(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::I32(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn elem_size(dtype: u8) -> Option<usize> {
    match dtype {
        1 | 3 => Some(4),
        2 => Some(8),
        4 => Some(1),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Section {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, payload: Payload) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != payload.len() {
            return Err(CoreError::InvalidInput(format!(
                "section {name}: shape {shape:?} holds {n} elements, payload has {}",
                payload.len()
            )));
        }
        if shape.iter().any(|&e| e > u32::MAX as usize) || name.len() > u32::MAX as usize {
            return Err(CoreError::InvalidInput(format!("section {name} exceeds 32-bit extents")));
        }
        Ok(Self { name, shape, payload })
    }

    pub fn tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let payload = if T::NAME == "f64" {
            Payload::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect())
        } else {
            Payload::F32(t.data().iter().map(|v| v.to_f32().expect("finite cast")).collect())
        };
        Self::new(name, t.shape().to_vec(), payload).expect("tensor shape matches its data")
    }

    pub fn labels(name: impl Into<String>, labels: &[usize]) -> Self {
        let v = labels.iter().map(|&y| y as i32).collect();
        Self::new(name, vec![labels.len()], Payload::I32(v)).expect("1-d")
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        let b = text.as_bytes().to_vec();
        Self::new(name, vec![b.len()], Payload::U8(b)).expect("1-d")
    }

    /// Floating-point payload as a tensor of `T` (exact for matching widths).
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| T::from_f32(x).expect("f32 fits")).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            _ => return Err(self.wrong_type("floating-point")),
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }

    pub fn to_labels(&self) -> Result<Vec<usize>> {
        match &self.payload {
            Payload::I32(v) => v
                .iter()
                .map(|&y| {
                    usize::try_from(y)
                        .map_err(|_| CoreError::InvalidInput(format!("section {}: negative label {y}", self.name)))
                })
                .collect(),
            _ => Err(self.wrong_type("i32")),
        }
    }

    pub fn to_text(&self) -> Result<String> {
        match &self.payload {
            Payload::U8(b) => String::from_utf8(b.clone())
                .map_err(|e| CoreError::InvalidInput(format!("section {}: {e}", self.name))),
            _ => Err(self.wrong_type("text")),
        }
    }

    fn wrong_type(&self, want: &str) -> CoreError {
        CoreError::InvalidInput(format!(
            "section {} has dtype {}, expected {want}",
            self.name,
            self.payload.dtype()
        ))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn push(&mut self, section: Section) -> Result<()> {
        if self.get(&section.name).is_some() {
            return Err(CoreError::InvalidInput(format!("duplicate section {}", section.name)));
        }
        self.sections.push(section);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.get(name)
            .ok_or_else(|| CoreError::InvalidInput(format!("container has no section {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.payload.dtype());
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &e in &s.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            match &s.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.err_at(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let count = r.u32("section count")?;
        let mut names = HashSet::new();
        let mut sections = Vec::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.err_at(start + 4, "section name is not UTF-8"))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(r.err_at(start, format!("duplicate section {name}")));
            }
            let dtype_at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            let size = elem_size(dtype).ok_or_else(|| r.err_at(dtype_at, format!("unknown dtype {dtype}")))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(size))
                .ok_or_else(|| r.err_at(dtype_at, "payload size overflows"))?;
            let raw = r.take(n, "payload")?;
            let payload = match dtype {
                1 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                3 => Payload::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => Payload::U8(raw.to_vec()),
            };
            sections.push(Section { name, shape, payload });
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, msg: impl Into<String>) -> CoreError {
        CoreError::Format {
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err_at(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
