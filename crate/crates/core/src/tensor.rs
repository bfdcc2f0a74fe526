//! Dense row-major `f64` tensors and the `RTNS` interchange format.
//!
//! An `RTNS` record is laid out as
//!
//! ```text
//! b"RTNS" | u8 version (=1) | u8 rank | rank x u32 LE dims | f64 LE payload
//! ```
//!
//! Several records may be concatenated in one file; parameter files do this.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const RTNS_MAGIC: &[u8; 4] = b"RTNS";
pub const RTNS_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    /// Gradient of the last backward pass, same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "element count".into(),
                expected: numel,
                actual: data.len(),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Usage(format!(
                "tensor shape {shape:?} has a zero-length axis"
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                axis: "element count".into(),
                expected: self.data.len(),
                actual: numel,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise map, dropping any gradient.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape != first.shape {
                return Err(Error::Dimension {
                    op: "stack",
                    axis: format!("item {i} element count"),
                    expected: first.numel(),
                    actual: t.numel(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Concatenates tensors along axis 0. Trailing axes must match.
    pub fn concat_rows(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("cannot concatenate an empty list".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    axis: "trailing axes".into(),
                    expected: tail.iter().product(),
                    actual: t.shape[1..].iter().product(),
                });
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    /// Row `index` along axis 0, with the leading axis dropped.
    pub fn row(&self, index: usize) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn write_rtns<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let rank = u8::try_from(self.shape.len()).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255")
        })?;
        w.write_all(RTNS_MAGIC)?;
        w.write_all(&[RTNS_VERSION, rank])?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
            })?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_rtns_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_rtns(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one record. Returns `Ok(None)` on a clean end of stream.
    pub fn read_rtns<R: Read>(mut r: R) -> Result<Option<Tensor>> {
        let mut magic = [0u8; 4];
        match read_full(&mut r, &mut magic)? {
            0 => return Ok(None),
            4 => {}
            n => return Err(Error::Format(format!("truncated header ({n} of 4 magic bytes)"))),
        }
        if &magic != RTNS_MAGIC {
            return Err(Error::Format(format!("bad magic bytes {magic:02x?}")));
        }
        let mut head = [0u8; 2];
        expect_full(&mut r, &mut head, "version/rank")?;
        if head[0] != RTNS_VERSION {
            return Err(Error::UnsupportedVersion(head[0]));
        }
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            expect_full(&mut r, &mut d, "dimension")?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 8];
        expect_full(&mut r, &mut payload, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
            .map(Some)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_rtns_bytes(bytes: &[u8]) -> Result<Tensor> {
        Tensor::read_rtns(bytes)?.ok_or_else(|| Error::Format("empty input".into()))
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Format(e.to_string())),
        }
    }
    Ok(filled)
}

fn expect_full<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    let n = read_full(r, buf)?;
    if n != buf.len() {
        return Err(Error::Format(format!(
            "truncated {what}: expected {} bytes, found {n}",
            buf.len()
        )));
    }
    Ok(())
}
